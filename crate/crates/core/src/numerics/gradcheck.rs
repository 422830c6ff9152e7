//! Central finite-difference validation of the backward pass.
//!
//! Perturbs every parameter element in turn, replays the recorded graph,
//! and compares the difference quotient against the analytic gradient.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{GradBuffer, ParamStore};

/// Per-parameter comparison of analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    /// ||analytic - fd||_2 / max(||analytic||_2, ||fd||_2, 1e-10)
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub fd_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradError>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamGradError> {
        self.per_param.iter().max_by(|a, b| {
            a.relative_error
                .partial_cmp(&b.relative_error)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    }
}

/// Compare analytic gradients of `loss` against central finite differences
/// `(f(p+eps) - f(p-eps)) / (2 eps)` for every registered parameter element.
pub fn grad_check(
    store: &mut ParamStore,
    graph: &mut Graph,
    loss: NodeId,
    eps: f64,
) -> Result<GradCheckReport> {
    if graph.value_in(store, loss).len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check requires a scalar loss node, got shape {:?}",
            graph.value_in(store, loss).shape()
        )));
    }

    let mut analytic = GradBuffer::zeros(store);
    graph.backward(store, loss, &mut analytic)?;

    let mut per_param = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let mut diff_sq = 0.0;
        let mut fd_sq = 0.0;
        let mut max_abs = 0.0f64;
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            graph.replay(store)?;
            let f_plus = graph.value(loss).item();
            store.get_mut(id).data_mut()[j] = orig - eps;
            graph.replay(store)?;
            let f_minus = graph.value(loss).item();
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.get(id)[j];
            let d = a - fd;
            diff_sq += d * d;
            fd_sq += fd * fd;
            max_abs = max_abs.max(d.abs());
        }
        let a_norm = analytic.get(id).iter().map(|v| v * v).sum::<f64>().sqrt();
        let fd_norm = fd_sq.sqrt();
        let denom = a_norm.max(fd_norm).max(1e-10);
        per_param.push(ParamGradError {
            name: store.name(id).to_string(),
            relative_error: diff_sq.sqrt() / denom,
            max_abs_error: max_abs,
            analytic_norm: a_norm,
            fd_norm,
        });
    }
    // restore recorded values to the unperturbed state
    graph.replay(store)?;

    let max_relative_error = per_param
        .iter()
        .map(|p| p.relative_error)
        .fold(0.0f64, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_relative_error,
    })
}
