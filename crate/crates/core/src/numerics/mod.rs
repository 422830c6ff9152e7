//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The design is a define-by-run tape: [`Graph`] records every operation as
//! it executes, [`Graph::backward`] walks the records in exact reverse
//! order, and [`Graph::replay`] re-executes the recorded forward pass
//! against the current parameter values (which is what makes finite
//! difference checking possible without rebuilding the graph).

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamGradError};
pub use graph::{Graph, NodeId};
pub use tensor::{GradBuffer, Param, ParamId, ParamStore, Tensor};
