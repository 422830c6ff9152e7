//! Decoupled-weight-decay adaptive-moment optimizer.

use crate::error::Result;
use crate::numerics::{GradBuffer, ParamStore};
use crate::model::Transformer;

pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamW {
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    /// One update. Rejected for frozen models.
    pub fn step(&mut self, model: &mut Transformer, grads: &GradBuffer, lr: f64) -> Result<()> {
        let params = model.params_mut()?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, id) in params.ids().enumerate() {
            let g = grads.get(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to the peak rate, then linear decay to 10% of peak.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let warmup = (warmup_frac * total).ceil().max(1.0);
    let s = step as f64;
    if s < warmup {
        peak * (s + 1.0) / warmup
    } else if total <= warmup {
        peak
    } else {
        let progress = (s - warmup) / (total - warmup);
        peak * (1.0 - 0.9 * progress)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::numerics::GradBuffer;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 8,
            cot_token_id: 3,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn step_moves_parameters() {
        let mut model = init_model(&cfg(), 1).unwrap();
        let mut opt = AdamW::new(model.params(), 0.9, 0.99, 1e-8, 0.0);
        let mut grads = GradBuffer::zeros(model.params());
        let id = model.params().ids().next().unwrap();
        grads.get_mut(id)[0] = 1.0;
        let before = model.params().get(id).data()[0];
        opt.step(&mut model, &grads, 1e-2).unwrap();
        let after = model.params().get(id).data()[0];
        assert!(after < before);
    }

    #[test]
    fn frozen_model_rejected() {
        let mut model = init_model(&cfg(), 1).unwrap();
        model.freeze();
        let mut opt = AdamW::new(model.params(), 0.9, 0.99, 1e-8, 0.0);
        let grads = GradBuffer::zeros(model.params());
        assert!(opt.step(&mut model, &grads, 1e-2).is_err());
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let peak = 1e-3;
        assert!(lr_at(0, 100, peak, 0.05) < peak);
        assert!((lr_at(4, 100, peak, 0.05) - peak).abs() < 1e-12);
        assert!(lr_at(99, 100, peak, 0.05) < peak * 0.2);
        assert!(lr_at(99, 100, peak, 0.05) > 0.0);
    }
}
