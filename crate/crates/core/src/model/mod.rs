//! Decoder-only transformer with a reserved handoff token.
//!
//! The one non-standard feature is the embedding override: a forward pass
//! may replace the embedding-table lookup at chosen positions (holding the
//! reserved token) with externally supplied vectors, before positional
//! encodings are added. This is the injection point for compressed thought
//! representations produced by a frozen companion model.

mod checkpoint;
mod decode;

pub use checkpoint::{content_hash, load_checkpoint, save_checkpoint};
pub use decode::{decode, sample_token, DecodeState, GREEDY_TEMPERATURE};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub cot_token_id: u32,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.cot_token_id as usize >= self.vocab_size {
            return Err(Error::config(format!(
                "cot_token_id {} outside vocabulary of size {}",
                self.cot_token_id, self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.num_layers == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::config("zero-sized model dimension"));
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let v = self.vocab_size;
        // embeddings + per-layer (4 attn mats + 2 mlp mats + 2 norms) + final norm + output
        v * d + self.max_seq_len * d + self.num_layers * (12 * d * d + 4 * d) + 2 * d + d * v
    }
}

/// Replace the input embedding at `position` with `vector` (the position
/// must hold the reserved handoff token in the accompanying sequence).
#[derive(Clone, Debug)]
pub struct EmbeddingOverride {
    pub position: usize,
    pub vector: Tensor,
}

/// Output of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub logits: Tensor,
    /// Last layer hidden states after the final normalization, [T, d].
    pub final_hidden: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1_w: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_w: ParamId,
    pub ln2_b: ParamId,
    pub fc1: ParamId,
    pub fc2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_w: ParamId,
    pub lnf_b: ParamId,
    pub out_w: ParamId,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) ids: ParamIds,
    frozen: bool,
}

/// Registers all parameter tensors in a fixed, stable order.
fn register_params(
    config: &ModelConfig,
    mut init: impl FnMut(&str, &[usize]) -> Tensor,
) -> (ParamStore, ParamIds) {
    let d = config.hidden_dim;
    let v = config.vocab_size;
    let mut store = ParamStore::new();
    let mut ins = |store: &mut ParamStore, name: String, shape: &[usize]| {
        let t = init(&name, shape);
        store.insert(name, t)
    };
    let tok = ins(&mut store, "embed.token".into(), &[v, d]);
    let pos = ins(&mut store, "embed.pos".into(), &[config.max_seq_len, d]);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        layers.push(LayerIds {
            ln1_w: ins(&mut store, format!("layer{l}.ln1.weight"), &[d]),
            ln1_b: ins(&mut store, format!("layer{l}.ln1.bias"), &[d]),
            wq: ins(&mut store, format!("layer{l}.attn.wq"), &[d, d]),
            wk: ins(&mut store, format!("layer{l}.attn.wk"), &[d, d]),
            wv: ins(&mut store, format!("layer{l}.attn.wv"), &[d, d]),
            wo: ins(&mut store, format!("layer{l}.attn.wo"), &[d, d]),
            ln2_w: ins(&mut store, format!("layer{l}.ln2.weight"), &[d]),
            ln2_b: ins(&mut store, format!("layer{l}.ln2.bias"), &[d]),
            fc1: ins(&mut store, format!("layer{l}.mlp.fc1"), &[d, 4 * d]),
            fc2: ins(&mut store, format!("layer{l}.mlp.fc2"), &[4 * d, d]),
        });
    }
    let lnf_w = ins(&mut store, "final_norm.weight".into(), &[d]);
    let lnf_b = ins(&mut store, "final_norm.bias".into(), &[d]);
    let out_w = ins(&mut store, "output.w".into(), &[d, v]);
    (
        store,
        ParamIds {
            tok,
            pos,
            layers,
            lnf_w,
            lnf_b,
            out_w,
        },
    )
}

/// Deterministic initialization: scaled normals with std 0.02, residual
/// projections scaled by 1/sqrt(2 * num_layers), norms at identity.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Transformer> {
    config.validate()?;
    let mut rng = Rng::derive(seed, "model-init");
    let resid_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
    let (params, ids) = register_params(config, |name, shape| {
        let n: usize = shape.iter().product();
        if name.ends_with("norm.weight")
            || name.ends_with("ln1.weight")
            || name.ends_with("ln2.weight")
        {
            Tensor::from_vec(shape, vec![1.0; n]).unwrap()
        } else if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("mlp.fc2") {
                INIT_STD * resid_scale
            } else {
                INIT_STD
            };
            Tensor::from_vec(shape, (0..n).map(|_| std * rng.normal()).collect()).unwrap()
        }
    });
    Ok(Transformer {
        config: config.clone(),
        params,
        ids,
        frozen: false,
    })
}

/// Node handles of a recorded forward pass.
pub struct GraphForward {
    pub final_hidden: NodeId,
    pub logits: Option<NodeId>,
    /// Per-layer (k, v) projection nodes, for cache extraction.
    pub kv_nodes: Vec<(NodeId, NodeId)>,
}

impl Transformer {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameter access; rejected for frozen models so that no
    /// training step can touch them.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        Ok(&mut self.params)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore, frozen: bool) -> Result<Self> {
        config.validate()?;
        // Rebuild the id table; insertion order is fixed by register_params.
        let (reference, ids) = register_params(&config, |_, shape| Tensor::zeros(shape));
        if reference.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (id, p) in reference.iter() {
            let actual = params.get(id);
            if params.name(id) != p.name || actual.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has unexpected name/shape {:?}",
                    params.name(id),
                    actual.shape()
                )));
            }
        }
        Ok(Transformer {
            config,
            params,
            ids,
            frozen,
        })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Embedding-table row for a token id.
    pub fn token_embedding_row(&self, id: u32) -> &[f64] {
        self.params.get(self.ids.tok).row(id as usize)
    }

    fn validate_sequence(&self, tokens: &[u32], overrides: &[EmbeddingOverride]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds maximum {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        for ov in overrides {
            if ov.position >= tokens.len() {
                return Err(Error::invalid(format!(
                    "override position {} outside sequence of length {}",
                    ov.position,
                    tokens.len()
                )));
            }
            if tokens[ov.position] != self.config.cot_token_id {
                return Err(Error::invalid(format!(
                    "override at position {} which holds token {} instead of the reserved handoff token {}",
                    ov.position, tokens[ov.position], self.config.cot_token_id
                )));
            }
            if ov.vector.len() != self.config.hidden_dim {
                return Err(Error::ShapeMismatch {
                    op: "embedding_override",
                    lhs: ov.vector.shape().to_vec(),
                    rhs: vec![self.config.hidden_dim],
                });
            }
        }
        Ok(())
    }

    /// Record a teacher-forced forward pass on `g`. Returns node handles so
    /// callers can attach losses, pool spans, or read hidden rows.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        overrides: &[EmbeddingOverride],
        want_logits: bool,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<GraphForward> {
        self.validate_sequence(tokens, overrides)?;
        let store = &self.params;
        let ids = &self.ids;
        let d = self.config.hidden_dim;
        let rate = self.config.dropout_rate;

        let apply_dropout =
            |g: &mut Graph, node: NodeId, len: usize, rng: &mut Option<&mut Rng>| -> Result<NodeId> {
                if rate == 0.0 {
                    return Ok(node);
                }
                let Some(rng) = rng.as_deref_mut() else {
                    return Ok(node);
                };
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..len)
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(store, node, mask)
            };

        let ov: Vec<(usize, Vec<f64>)> = overrides
            .iter()
            .map(|o| (o.position, o.vector.data().to_vec()))
            .collect();
        let tok_node = g.param(ids.tok);
        let emb = g.embed(store, tok_node, tokens, &ov)?;
        let pos_node = g.param(ids.pos);
        let mut h = g.add_positional(store, emb, pos_node)?;
        let t = tokens.len();
        h = apply_dropout(g, h, t * d, &mut dropout_rng)?;

        let mut kv_nodes = Vec::with_capacity(self.config.num_layers);
        for layer in &ids.layers {
            let ln1w = g.param(layer.ln1_w);
            let ln1b = g.param(layer.ln1_b);
            let xn = g.layer_norm(store, h, ln1w, ln1b)?;
            let wq = g.param(layer.wq);
            let wk = g.param(layer.wk);
            let wv = g.param(layer.wv);
            let q = g.matmul(store, xn, wq)?;
            let k = g.matmul(store, xn, wk)?;
            let v = g.matmul(store, xn, wv)?;
            kv_nodes.push((k, v));
            let att = g.causal_attention(store, q, k, v, self.config.num_heads)?;
            let wo = g.param(layer.wo);
            let mut proj = g.matmul(store, att, wo)?;
            proj = apply_dropout(g, proj, t * d, &mut dropout_rng)?;
            h = g.add(store, h, proj)?;

            let ln2w = g.param(layer.ln2_w);
            let ln2b = g.param(layer.ln2_b);
            let xn2 = g.layer_norm(store, h, ln2w, ln2b)?;
            let fc1 = g.param(layer.fc1);
            let pre = g.matmul(store, xn2, fc1)?;
            let act = g.gelu(store, pre)?;
            let fc2 = g.param(layer.fc2);
            let mut mlp = g.matmul(store, act, fc2)?;
            mlp = apply_dropout(g, mlp, t * d, &mut dropout_rng)?;
            h = g.add(store, h, mlp)?;
        }
        let lnfw = g.param(ids.lnf_w);
        let lnfb = g.param(ids.lnf_b);
        let final_hidden = g.layer_norm(store, h, lnfw, lnfb)?;
        let logits = if want_logits {
            let ow = g.param(ids.out_w);
            Some(g.matmul(store, final_hidden, ow)?)
        } else {
            None
        };
        Ok(GraphForward {
            final_hidden,
            logits,
            kv_nodes,
        })
    }

    /// Causal forward pass over a full sequence.
    pub fn forward(&self, tokens: &[u32], overrides: &[EmbeddingOverride]) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let fwd = self.forward_graph(&mut g, tokens, overrides, true, None)?;
        Ok(ForwardResult {
            logits: g.value(fwd.logits.unwrap()).clone(),
            final_hidden: g.value(fwd.final_hidden).clone(),
        })
    }
}

/// Hidden-state row at a handoff position: the compressed representation
/// read out of the encoding model.
pub fn extract_cot_representation(result: &ForwardResult, position: usize) -> Result<Tensor> {
    if position >= result.final_hidden.rows() {
        return Err(Error::invalid(format!(
            "position {} outside sequence of length {}",
            position,
            result.final_hidden.rows()
        )));
    }
    Tensor::from_vec(
        &[result.final_hidden.cols()],
        result.final_hidden.row(position).to_vec(),
    )
}
