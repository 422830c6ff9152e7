//! Autoregressive decoding with a per-layer key/value cache.
//!
//! The prefix is encoded in matrix form through the same recorded forward
//! pass used for training (so handoff-time representations match training
//! bit for bit); subsequent tokens run through a single-position step that
//! appends to the cache.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::rng::Rng;

use super::{EmbeddingOverride, Transformer};

const LN_EPS: f64 = 1e-5;

/// Temperatures at or below this decode greedily (lowest-id tie-break).
pub const GREEDY_TEMPERATURE: f64 = 0.01;

fn layer_norm_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let d = x.len();
    let mu = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..d {
        out[j] = w[j] * (x[j] - mu) * inv + b[j];
    }
}

/// y = x [1,k] @ W [k,n]
fn vec_mat(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    let k = x.len();
    unsafe {
        matrixmultiply::dgemm(
            1,
            k,
            n,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

/// Incremental decoding state over one growing sequence.
pub struct DecodeState<'m> {
    model: &'m Transformer,
    /// Per-layer caches of projected keys/values, row-appended, [len, d].
    kcache: Vec<Vec<f64>>,
    vcache: Vec<Vec<f64>>,
    len: usize,
    last_logits: Vec<f64>,
}

impl<'m> DecodeState<'m> {
    /// Encode a prefix in matrix form and fill the caches.
    pub fn prefill(
        model: &'m Transformer,
        tokens: &[u32],
        overrides: &[EmbeddingOverride],
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty prefix"));
        }
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, tokens, overrides, false, None)?;
        let layers = model.config().num_layers;
        let mut kcache = Vec::with_capacity(layers);
        let mut vcache = Vec::with_capacity(layers);
        for (k, v) in &fwd.kv_nodes {
            kcache.push(g.value(*k).data().to_vec());
            vcache.push(g.value(*v).data().to_vec());
        }
        let fh = g.value(fwd.final_hidden);
        let last = fh.row(tokens.len() - 1);
        let vsz = model.config().vocab_size;
        let mut last_logits = vec![0.0; vsz];
        vec_mat(last, model.params().get(model.ids.out_w).data(), vsz, &mut last_logits);
        Ok(DecodeState {
            model,
            kcache,
            vcache,
            len: tokens.len(),
            last_logits,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the next position.
    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    /// Append one token (optionally with an input-embedding override) and
    /// advance the caches by one position.
    pub fn feed(&mut self, token: u32, override_emb: Option<&[f64]>) -> Result<()> {
        let cfg = self.model.config();
        let d = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = self.len;
        if pos >= cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds maximum {}",
                pos + 1,
                cfg.max_seq_len
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!("token id {token} out of range")));
        }
        if let Some(v) = override_emb {
            if token != cfg.cot_token_id {
                return Err(Error::invalid(
                    "override fed at a token other than the reserved handoff token",
                ));
            }
            if v.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "embedding_override",
                    lhs: vec![v.len()],
                    rhs: vec![d],
                });
            }
        }
        let params = self.model.params();
        let ids = &self.model.ids;

        let mut x = vec![0.0; d];
        match override_emb {
            Some(v) => x.copy_from_slice(v),
            None => x.copy_from_slice(params.get(ids.tok).row(token as usize)),
        }
        for (xx, p) in x.iter_mut().zip(params.get(ids.pos).row(pos)) {
            *xx += *p;
        }

        let mut xn = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut h1 = vec![0.0; 4 * d];
        let t_new = pos + 1;
        for (l, layer) in ids.layers.iter().enumerate() {
            layer_norm_row(
                &x,
                params.get(layer.ln1_w).data(),
                params.get(layer.ln1_b).data(),
                &mut xn,
            );
            vec_mat(&xn, params.get(layer.wq).data(), d, &mut q);
            vec_mat(&xn, params.get(layer.wk).data(), d, &mut k);
            vec_mat(&xn, params.get(layer.wv).data(), d, &mut v);
            self.kcache[l].extend_from_slice(&k);
            self.vcache[l].extend_from_slice(&v);
            let kc = &self.kcache[l];
            let vc = &self.vcache[l];
            att.iter_mut().for_each(|a| *a = 0.0);
            for h in 0..heads {
                let off = h * hd;
                let qh = &q[off..off + hd];
                // scores over all cached positions (causal by construction)
                let mut scores = Vec::with_capacity(t_new);
                let mut maxs = f64::NEG_INFINITY;
                for j in 0..t_new {
                    let kh = &kc[j * d + off..j * d + off + hd];
                    let s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    maxs = maxs.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - maxs).exp();
                    denom += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / denom;
                    let vh = &vc[j * d + off..j * d + off + hd];
                    for (a, b) in att[off..off + hd].iter_mut().zip(vh) {
                        *a += w * b;
                    }
                }
            }
            vec_mat(&att, params.get(layer.wo).data(), d, &mut proj);
            for (xx, p) in x.iter_mut().zip(&proj) {
                *xx += *p;
            }
            layer_norm_row(
                &x,
                params.get(layer.ln2_w).data(),
                params.get(layer.ln2_b).data(),
                &mut xn,
            );
            vec_mat(&xn, params.get(layer.fc1).data(), 4 * d, &mut h1);
            h1.iter_mut().for_each(|a| *a = gelu(*a));
            vec_mat(&h1, params.get(layer.fc2).data(), d, &mut proj);
            for (xx, p) in x.iter_mut().zip(&proj) {
                *xx += *p;
            }
        }
        layer_norm_row(
            &x,
            params.get(ids.lnf_w).data(),
            params.get(ids.lnf_b).data(),
            &mut xn,
        );
        vec_mat(
            &xn,
            params.get(ids.out_w).data(),
            cfg.vocab_size,
            &mut self.last_logits,
        );
        self.len = t_new;
        Ok(())
    }
}

/// Sample the next token id from logits. Temperatures at or below the
/// greedy threshold take the argmax with lowest-token-id tie-break, which
/// keeps decoding a pure function of its inputs.
pub fn sample_token(logits: &[f64], temperature: f64, top_p: f64, rng: &mut Rng) -> u32 {
    if temperature <= GREEDY_TEMPERATURE {
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| ((l - maxv) / temperature).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if top_p < 1.0 {
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (rank, &i) in order.iter().enumerate() {
            cum += probs[i];
            if cum >= top_p {
                keep = rank + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut dart = rng.uniform() * mass;
    for &i in &order {
        dart -= probs[i];
        if dart <= 0.0 {
            return i as u32;
        }
    }
    *order.last().unwrap() as u32
}

/// Autoregressive decode: emit until a stop token (which is included in the
/// output) or `max_new` tokens.
pub fn decode(
    model: &Transformer,
    prefix: &[u32],
    overrides: &[EmbeddingOverride],
    stop_set: &HashSet<u32>,
    max_new: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::invalid("max_new must be at least 1"));
    }
    let mut state = DecodeState::prefill(model, prefix, overrides)?;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tok = sample_token(state.last_logits(), temperature, top_p, rng);
        out.push(tok);
        if stop_set.contains(&tok) {
            break;
        }
        if state.len() >= model.config().max_seq_len {
            break;
        }
        state.feed(tok, None)?;
    }
    Ok(out)
}
