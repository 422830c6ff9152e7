//! Define-by-run computation graph with hand-written backward passes.
//!
//! Every builder method executes its operation immediately (forward) and
//! records enough context to run the exact reverse-order backward sweep and
//! to re-execute the whole recorded program against updated parameter
//! values (`replay`). Nodes only ever reference earlier nodes, so the
//! record order is a topological order by construction.

use crate::error::{Error, Result};
use crate::numerics::tensor::{GradBuffer, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

/// Operation record. Holds everything needed to re-execute the op.
#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Input,
    /// Embedding-table row gather with optional per-position replacement of
    /// the looked-up row by an externally supplied constant vector.
    Embed {
        table: NodeId,
        ids: Vec<u32>,
        overrides: Vec<(usize, Vec<f64>)>,
    },
    /// y = x + pos[0..T] where pos is a [T_max, d] table.
    AddPositional {
        x: NodeId,
        pos: NodeId,
    },
    LayerNorm {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Multi-head scaled dot-product attention with a causal mask, applied
    /// to already-projected q/k/v of shape [T, d].
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    Gelu {
        x: NodeId,
    },
    /// y = x * mask, mask entries are 0 or 1/(1-rate), baked at build time.
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// Mask-weighted mean of -log softmax(logits)[target] over positions.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<f64>,
    },
    /// Mean of the selected rows of a [T, d] tensor -> [d].
    MeanPool {
        x: NodeId,
        span: Vec<usize>,
    },
    RowSelect {
        x: NodeId,
        row: usize,
    },
    L2Normalize {
        v: NodeId,
    },
    /// Symmetric in-batch contrastive loss over two equal-length lists of
    /// unit vectors; similarities are raw dot products.
    Contrastive {
        zs: Vec<NodeId>,
        rs: Vec<NodeId>,
    },
    /// Scalar linear combination sum_i c_i * v_i.
    LinComb {
        terms: Vec<(NodeId, f64)>,
    },
    /// coeff * 0.5 * sum of squared entries -> scalar.
    SumSquares {
        x: NodeId,
        coeff: f64,
    },
}

/// Forward-pass context saved for the backward sweep.
#[derive(Clone, Debug)]
enum Saved {
    None,
    Attention { probs: Vec<f64> },
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { probs: Vec<f64>, mask_sum: f64 },
    L2Norm { norm: f64 },
    Contrastive { prow: Vec<f64>, pcol: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Value,
    saved: Saved,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Thin wrapper over the blocked dgemm kernel. Shapes are validated by the
/// callers; strides let us multiply by transposes and head slices without
/// materializing them.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn gelu(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654;
    let u = S * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-sum-exp of a slice.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn resolve<'a>(&'a self, store: &'a ParamStore, id: NodeId) -> &'a Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => store.get(*p),
        }
    }

    /// Value of an owned (non-parameter) node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(_) => panic!("value() on a parameter node; use value_in()"),
        }
    }

    pub fn value_in<'a>(&'a self, store: &'a ParamStore, id: NodeId) -> &'a Tensor {
        self.resolve(store, id)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Value::Param(id),
            saved: Saved::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value: Value::Owned(t),
            saved: Saved::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, store: &ParamStore, op: Op) -> Result<NodeId> {
        let (value, saved) = {
            let resolve = |id: NodeId| self.resolve(store, id);
            execute(&op, resolve)?
        };
        debug_assert!(value.all_finite(), "non-finite output of {op:?}");
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn embed(
        &mut self,
        store: &ParamStore,
        table: NodeId,
        ids: &[u32],
        overrides: &[(usize, Vec<f64>)],
    ) -> Result<NodeId> {
        self.push(
            store,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                overrides: overrides.to_vec(),
            },
        )
    }

    pub fn add_positional(&mut self, store: &ParamStore, x: NodeId, pos: NodeId) -> Result<NodeId> {
        self.push(store, Op::AddPositional { x, pos })
    }

    pub fn layer_norm(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        self.push(store, Op::LayerNorm { x, weight, bias })
    }

    pub fn matmul(&mut self, store: &ParamStore, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(store, Op::Matmul { a, b })
    }

    pub fn add(&mut self, store: &ParamStore, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(store, Op::Add { a, b })
    }

    pub fn causal_attention(
        &mut self,
        store: &ParamStore,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        self.push(store, Op::CausalAttention { q, k, v, heads })
    }

    pub fn gelu(&mut self, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.push(store, Op::Gelu { x })
    }

    pub fn dropout(&mut self, store: &ParamStore, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.push(store, Op::Dropout { x, mask })
    }

    pub fn softmax_cross_entropy(
        &mut self,
        store: &ParamStore,
        logits: NodeId,
        targets: &[u32],
        mask: &[f64],
    ) -> Result<NodeId> {
        self.push(
            store,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    pub fn mean_pool(&mut self, store: &ParamStore, x: NodeId, span: &[usize]) -> Result<NodeId> {
        self.push(
            store,
            Op::MeanPool {
                x,
                span: span.to_vec(),
            },
        )
    }

    pub fn row_select(&mut self, store: &ParamStore, x: NodeId, row: usize) -> Result<NodeId> {
        self.push(store, Op::RowSelect { x, row })
    }

    pub fn l2_normalize(&mut self, store: &ParamStore, v: NodeId) -> Result<NodeId> {
        self.push(store, Op::L2Normalize { v })
    }

    pub fn contrastive(
        &mut self,
        store: &ParamStore,
        zs: &[NodeId],
        rs: &[NodeId],
    ) -> Result<NodeId> {
        self.push(
            store,
            Op::Contrastive {
                zs: zs.to_vec(),
                rs: rs.to_vec(),
            },
        )
    }

    pub fn lin_comb(&mut self, store: &ParamStore, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        self.push(
            store,
            Op::LinComb {
                terms: terms.to_vec(),
            },
        )
    }

    pub fn sum_squares(&mut self, store: &ParamStore, x: NodeId, coeff: f64) -> Result<NodeId> {
        self.push(store, Op::SumSquares { x, coeff })
    }

    /// Re-execute every recorded operation against the current parameter
    /// values, refreshing node values and saved contexts in place.
    pub fn replay(&mut self, store: &ParamStore) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Param(_) | Op::Input) {
                continue;
            }
            let (value, saved) = {
                let resolve = |id: NodeId| match &done[id.0].value {
                    Value::Owned(t) => t,
                    Value::Param(p) => store.get(*p),
                };
                execute(&node.op, resolve)?
            };
            node.value = Value::Owned(value);
            node.saved = saved;
        }
        Ok(())
    }

    /// Backward from a scalar loss node with seed gradient 1.
    pub fn backward(&self, store: &ParamStore, loss: NodeId, out: &mut GradBuffer) -> Result<()> {
        let t = self.resolve(store, loss);
        if t.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss node, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(store, &[(loss, vec![1.0])], out)
    }

    /// Backward sweep seeded with externally supplied output gradients.
    /// Visits records in exact reverse order; fan-out accumulates.
    pub fn backward_seeded(
        &self,
        store: &ParamStore,
        seeds: &[(NodeId, Vec<f64>)],
        out: &mut GradBuffer,
    ) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (id, seed) in seeds {
            let len = self.resolve(store, *id).len();
            if seed.len() != len {
                return Err(Error::invalid(format!(
                    "seed gradient length {} does not match node length {}",
                    seed.len(),
                    len
                )));
            }
            let g = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            for (a, b) in g.iter_mut().zip(seed) {
                *a += *b;
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            // Lazily materialized gradient buffer for an input node.
            macro_rules! gbuf {
                ($id:expr) => {{
                    let len = self.resolve(store, $id).len();
                    grads[$id.0].get_or_insert_with(|| vec![0.0; len])
                }};
            }

            match &node.op {
                Op::Param(pid) => {
                    let dst = out.get_mut(*pid);
                    for (a, b) in dst.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                Op::Input => {}
                Op::Embed {
                    table,
                    ids,
                    overrides,
                } => {
                    let d = self.resolve(store, *table).cols();
                    let dt = gbuf!(*table);
                    let mut overridden = vec![false; ids.len()];
                    for (pos, _) in overrides {
                        overridden[*pos] = true;
                    }
                    for (t, &id) in ids.iter().enumerate() {
                        if overridden[t] {
                            continue;
                        }
                        let row = id as usize * d;
                        for j in 0..d {
                            dt[row + j] += g[t * d + j];
                        }
                    }
                }
                Op::AddPositional { x, pos } => {
                    {
                        let dx = gbuf!(*x);
                        for (a, b) in dx.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    let dp = gbuf!(*pos);
                    for (a, b) in dp.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                Op::LayerNorm { x, weight, bias } => {
                    let (xhat, inv_std) = match &node.saved {
                        Saved::LayerNorm { xhat, inv_std } => (xhat, inv_std),
                        _ => unreachable!(),
                    };
                    let w = self.resolve(store, *weight).data();
                    let rows = inv_std.len();
                    let d = w.len();
                    {
                        let dw = gbuf!(*weight);
                        for t in 0..rows {
                            for j in 0..d {
                                dw[j] += g[t * d + j] * xhat[t * d + j];
                            }
                        }
                    }
                    {
                        let db = gbuf!(*bias);
                        for t in 0..rows {
                            for j in 0..d {
                                db[j] += g[t * d + j];
                            }
                        }
                    }
                    let dx = gbuf!(*x);
                    let inv_d = 1.0 / d as f64;
                    for t in 0..rows {
                        let gr = &g[t * d..(t + 1) * d];
                        let xh = &xhat[t * d..(t + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * w[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * w[j];
                            dx[t * d + j] += inv_std[t] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let ta = self.resolve(store, *a);
                    let tb = self.resolve(store, *b);
                    let (m, k) = (ta.rows(), ta.cols());
                    let nn = tb.cols();
                    {
                        let da = gbuf!(*a);
                        // dA += dC * B^T
                        gemm(
                            m, nn, k, 1.0, &g, nn as isize, 1, tb.data(), 1, nn as isize, 1.0, da,
                            k as isize, 1,
                        );
                    }
                    let db = gbuf!(*b);
                    // dB += A^T * dC
                    gemm(
                        k, m, nn, 1.0, ta.data(), 1, k as isize, &g, nn as isize, 1, 1.0, db,
                        nn as isize, 1,
                    );
                }
                Op::Add { a, b } => {
                    {
                        let da = gbuf!(*a);
                        for (x, y) in da.iter_mut().zip(&g) {
                            *x += *y;
                        }
                    }
                    let db = gbuf!(*b);
                    for (x, y) in db.iter_mut().zip(&g) {
                        *x += *y;
                    }
                }
                Op::CausalAttention { q, k, v, heads } => {
                    let probs = match &node.saved {
                        Saved::Attention { probs } => probs,
                        _ => unreachable!(),
                    };
                    let tq = self.resolve(store, *q);
                    let tk = self.resolve(store, *k);
                    let tv = self.resolve(store, *v);
                    let t = tq.rows();
                    let d = tq.cols();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    let mut dp = vec![0.0; t * t];
                    for h in 0..*heads {
                        let off = h * hd;
                        let ph = &probs[h * t * t..(h + 1) * t * t];
                        // dV_h += P^T dO_h
                        gemm(
                            t,
                            t,
                            hd,
                            1.0,
                            ph,
                            1,
                            t as isize,
                            &g[off..],
                            d as isize,
                            1,
                            1.0,
                            &mut dv[off..],
                            d as isize,
                            1,
                        );
                        // dP = dO_h V_h^T
                        gemm(
                            t,
                            hd,
                            t,
                            1.0,
                            &g[off..],
                            d as isize,
                            1,
                            &tv.data()[off..],
                            1,
                            d as isize,
                            0.0,
                            &mut dp,
                            t as isize,
                            1,
                        );
                        // softmax backward row by row (masked tail has P=0)
                        for i in 0..t {
                            let prow = &ph[i * t..(i + 1) * t];
                            let drow = &mut dp[i * t..(i + 1) * t];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                dot += drow[j] * prow[j];
                            }
                            for j in 0..=i {
                                drow[j] = prow[j] * (drow[j] - dot);
                            }
                            for j in i + 1..t {
                                drow[j] = 0.0;
                            }
                        }
                        // dQ_h += scale * dS K_h
                        gemm(
                            t,
                            t,
                            hd,
                            scale,
                            &dp,
                            t as isize,
                            1,
                            &tk.data()[off..],
                            d as isize,
                            1,
                            1.0,
                            &mut dq[off..],
                            d as isize,
                            1,
                        );
                        // dK_h += scale * dS^T Q_h
                        gemm(
                            t,
                            t,
                            hd,
                            scale,
                            &dp,
                            1,
                            t as isize,
                            &tq.data()[off..],
                            d as isize,
                            1,
                            1.0,
                            &mut dk[off..],
                            d as isize,
                            1,
                        );
                    }
                    {
                        let gq = gbuf!(*q);
                        for (a, b) in gq.iter_mut().zip(&dq) {
                            *a += *b;
                        }
                    }
                    {
                        let gk = gbuf!(*k);
                        for (a, b) in gk.iter_mut().zip(&dk) {
                            *a += *b;
                        }
                    }
                    let gv = gbuf!(*v);
                    for (a, b) in gv.iter_mut().zip(&dv) {
                        *a += *b;
                    }
                }
                Op::Gelu { x } => {
                    let tx = self.resolve(store, *x);
                    let dx = gbuf!(*x);
                    for (j, (d, &xv)) in dx.iter_mut().zip(tx.data()).enumerate() {
                        *d += g[j] * gelu_grad(xv);
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = gbuf!(*x);
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d += g[j] * mask[j];
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let (probs, mask_sum) = match &node.saved {
                        Saved::CrossEntropy { probs, mask_sum } => (probs, *mask_sum),
                        _ => unreachable!(),
                    };
                    let vsz = self.resolve(store, *logits).cols();
                    let gs = g[0];
                    let dl = gbuf!(*logits);
                    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        let w = gs * m / mask_sum;
                        for j in 0..vsz {
                            dl[t * vsz + j] += w * probs[t * vsz + j];
                        }
                        dl[t * vsz + y as usize] -= w;
                    }
                }
                Op::MeanPool { x, span } => {
                    let d = self.resolve(store, *x).cols();
                    let dx = gbuf!(*x);
                    let inv = 1.0 / span.len() as f64;
                    for &t in span {
                        for j in 0..d {
                            dx[t * d + j] += g[j] * inv;
                        }
                    }
                }
                Op::RowSelect { x, row } => {
                    let d = self.resolve(store, *x).cols();
                    let dx = gbuf!(*x);
                    for j in 0..d {
                        dx[row * d + j] += g[j];
                    }
                }
                Op::L2Normalize { v } => {
                    let norm = match &node.saved {
                        Saved::L2Norm { norm } => *norm,
                        _ => unreachable!(),
                    };
                    let y = match &node.value {
                        Value::Owned(t) => t.data(),
                        Value::Param(_) => unreachable!(),
                    };
                    let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let dv = gbuf!(*v);
                    for j in 0..y.len() {
                        dv[j] += (g[j] - y[j] * dot) / norm;
                    }
                }
                Op::Contrastive { zs, rs } => {
                    let (prow, pcol) = match &node.saved {
                        Saved::Contrastive { prow, pcol } => (prow, pcol),
                        _ => unreachable!(),
                    };
                    let nb = zs.len();
                    let gs = g[0];
                    let zvals: Vec<&Tensor> = zs.iter().map(|&z| self.resolve(store, z)).collect();
                    let rvals: Vec<&Tensor> = rs.iter().map(|&r| self.resolve(store, r)).collect();
                    let d = zvals[0].len();
                    // dA[i][j] = g * (prow[i][j] + pcol[i][j] - 2*delta_ij) / (2n)
                    let inv = gs / (2.0 * nb as f64);
                    let mut da = vec![0.0; nb * nb];
                    for i in 0..nb {
                        for j in 0..nb {
                            let delta = if i == j { 2.0 } else { 0.0 };
                            da[i * nb + j] = inv * (prow[i * nb + j] + pcol[i * nb + j] - delta);
                        }
                    }
                    for (i, &z) in zs.iter().enumerate() {
                        let dz = gbuf!(z);
                        for j in 0..nb {
                            let c = da[i * nb + j];
                            for (x, &rv) in dz.iter_mut().zip(rvals[j].data()) {
                                *x += c * rv;
                            }
                        }
                        let _ = d;
                    }
                    for (j, &r) in rs.iter().enumerate() {
                        let dr = gbuf!(r);
                        for i in 0..nb {
                            let c = da[i * nb + j];
                            for (x, &zv) in dr.iter_mut().zip(zvals[i].data()) {
                                *x += c * zv;
                            }
                        }
                    }
                }
                Op::LinComb { terms } => {
                    let gs = g[0];
                    for (id, c) in terms {
                        let dt = gbuf!(*id);
                        dt[0] += gs * c;
                    }
                }
                Op::SumSquares { x, coeff } => {
                    let tx = self.resolve(store, *x);
                    let gs = g[0];
                    let dx = gbuf!(*x);
                    for (d, &v) in dx.iter_mut().zip(tx.data()) {
                        *d += gs * coeff * v;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Execute one op. `resolve` maps input node ids to their current values.
fn execute<'a, F>(op: &Op, resolve: F) -> Result<(Tensor, Saved)>
where
    F: Fn(NodeId) -> &'a Tensor,
{
    match op {
        Op::Param(_) | Op::Input => unreachable!("leaf nodes are not executed"),
        Op::Embed {
            table,
            ids,
            overrides,
        } => {
            let tt = resolve(*table);
            let (vsz, d) = (tt.rows(), tt.cols());
            let t = ids.len();
            let mut out = vec![0.0; t * d];
            for (pos, &id) in ids.iter().enumerate() {
                if id as usize >= vsz {
                    return Err(Error::invalid(format!(
                        "token id {id} out of vocabulary range {vsz}"
                    )));
                }
                out[pos * d..(pos + 1) * d].copy_from_slice(tt.row(id as usize));
            }
            for (pos, vec) in overrides {
                if *pos >= t {
                    return Err(Error::invalid(format!(
                        "override position {pos} outside sequence of length {t}"
                    )));
                }
                if vec.len() != d {
                    return Err(Error::ShapeMismatch {
                        op: "embed_override",
                        lhs: vec![vec.len()],
                        rhs: vec![d],
                    });
                }
                out[pos * d..(pos + 1) * d].copy_from_slice(vec);
            }
            Ok((Tensor::from_vec(&[t, d], out)?, Saved::None))
        }
        Op::AddPositional { x, pos } => {
            let tx = resolve(*x);
            let tp = resolve(*pos);
            let (t, d) = (tx.rows(), tx.cols());
            if tp.cols() != d || tp.rows() < t {
                return Err(Error::ShapeMismatch {
                    op: "add_positional",
                    lhs: tx.shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            let mut out = tx.data().to_vec();
            for (o, p) in out.iter_mut().zip(tp.data()) {
                *o += *p;
            }
            Ok((Tensor::from_vec(&[t, d], out)?, Saved::None))
        }
        Op::LayerNorm { x, weight, bias } => {
            let tx = resolve(*x);
            let w = resolve(*weight);
            let b = resolve(*bias);
            let (t, d) = (tx.rows(), tx.cols());
            if w.len() != d || b.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; t * d];
            let mut xhat = vec![0.0; t * d];
            let mut inv_std = vec![0.0; t];
            for i in 0..t {
                let row = tx.row(i);
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..d {
                    let xh = (row[j] - mu) * is;
                    xhat[i * d + j] = xh;
                    out[i * d + j] = w.data()[j] * xh + b.data()[j];
                }
            }
            Ok((
                Tensor::from_vec(&[t, d], out)?,
                Saved::LayerNorm { xhat, inv_std },
            ))
        }
        Op::Matmul { a, b } => {
            let ta = resolve(*a);
            let tb = resolve(*b);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                1.0,
                ta.data(),
                k as isize,
                1,
                tb.data(),
                n as isize,
                1,
                0.0,
                &mut out,
                n as isize,
                1,
            );
            Ok((Tensor::from_vec(&[m, n], out)?, Saved::None))
        }
        Op::Add { a, b } => {
            let ta = resolve(*a);
            let tb = resolve(*b);
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op: "add",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let out = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            Ok((Tensor::from_vec(ta.shape(), out)?, Saved::None))
        }
        Op::CausalAttention { q, k, v, heads } => {
            let tq = resolve(*q);
            let tk = resolve(*k);
            let tv = resolve(*v);
            if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    lhs: tq.shape().to_vec(),
                    rhs: tk.shape().to_vec(),
                });
            }
            let (t, d) = (tq.rows(), tq.cols());
            if d % heads != 0 {
                return Err(Error::invalid(format!(
                    "hidden dim {d} not divisible by {heads} heads"
                )));
            }
            let hd = d / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut out = vec![0.0; t * d];
            let mut probs = vec![0.0; heads * t * t];
            for h in 0..*heads {
                let off = h * hd;
                let ph = &mut probs[h * t * t..(h + 1) * t * t];
                // S = scale * Q_h K_h^T (K_h^T via strides)
                gemm(
                    t,
                    hd,
                    t,
                    scale,
                    &tq.data()[off..],
                    d as isize,
                    1,
                    &tk.data()[off..],
                    1,
                    d as isize,
                    0.0,
                    ph,
                    t as isize,
                    1,
                );
                for i in 0..t {
                    let row = &mut ph[i * t..(i + 1) * t];
                    let m = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - m).exp();
                        sum += row[j];
                    }
                    for j in 0..=i {
                        row[j] /= sum;
                    }
                    for j in i + 1..t {
                        row[j] = 0.0;
                    }
                }
                // O_h = P V_h
                gemm(
                    t,
                    t,
                    hd,
                    1.0,
                    ph,
                    t as isize,
                    1,
                    &tv.data()[off..],
                    d as isize,
                    1,
                    0.0,
                    &mut out[off..],
                    d as isize,
                    1,
                );
            }
            Ok((Tensor::from_vec(&[t, d], out)?, Saved::Attention { probs }))
        }
        Op::Gelu { x } => {
            let tx = resolve(*x);
            let out = tx.data().iter().map(|&v| gelu(v)).collect();
            Ok((Tensor::from_vec(tx.shape(), out)?, Saved::None))
        }
        Op::Dropout { x, mask } => {
            let tx = resolve(*x);
            if mask.len() != tx.len() {
                return Err(Error::ShapeMismatch {
                    op: "dropout",
                    lhs: vec![mask.len()],
                    rhs: vec![tx.len()],
                });
            }
            let out = tx.data().iter().zip(mask).map(|(v, m)| v * m).collect();
            Ok((Tensor::from_vec(tx.shape(), out)?, Saved::None))
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            let tl = resolve(*logits);
            let (t, vsz) = (tl.rows(), tl.cols());
            if targets.len() != t || mask.len() != t {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: vec![targets.len(), mask.len()],
                    rhs: vec![t],
                });
            }
            for &y in targets {
                if y as usize >= vsz {
                    return Err(Error::invalid(format!(
                        "target index {y} out of range for vocabulary size {vsz}"
                    )));
                }
            }
            if mask.iter().any(|&m| m < 0.0) {
                return Err(Error::invalid("negative mask weight"));
            }
            let mask_sum: f64 = mask.iter().sum();
            if mask_sum <= 0.0 {
                return Err(Error::invalid("mask selects no positions"));
            }
            let mut probs = vec![0.0; t * vsz];
            let mut loss = 0.0;
            for i in 0..t {
                let row = tl.row(i);
                let lse = log_sum_exp(row);
                for j in 0..vsz {
                    probs[i * vsz + j] = (row[j] - lse).exp();
                }
                if mask[i] > 0.0 {
                    loss += mask[i] * (lse - row[targets[i] as usize]);
                }
            }
            loss /= mask_sum;
            Ok((
                Tensor::scalar(loss),
                Saved::CrossEntropy { probs, mask_sum },
            ))
        }
        Op::MeanPool { x, span } => {
            let tx = resolve(*x);
            let (t, d) = (tx.rows(), tx.cols());
            if span.is_empty() {
                return Err(Error::invalid("mean_pool over an empty span"));
            }
            if let Some(&bad) = span.iter().find(|&&p| p >= t) {
                return Err(Error::invalid(format!(
                    "mean_pool position {bad} outside sequence of length {t}"
                )));
            }
            let mut out = vec![0.0; d];
            for &p in span {
                for j in 0..d {
                    out[j] += tx.data()[p * d + j];
                }
            }
            let inv = 1.0 / span.len() as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Ok((Tensor::from_vec(&[d], out)?, Saved::None))
        }
        Op::RowSelect { x, row } => {
            let tx = resolve(*x);
            let (t, d) = (tx.rows(), tx.cols());
            if *row >= t {
                return Err(Error::invalid(format!(
                    "row {row} outside sequence of length {t}"
                )));
            }
            Ok((
                Tensor::from_vec(&[d], tx.row(*row).to_vec())?,
                Saved::None,
            ))
        }
        Op::L2Normalize { v } => {
            let tv = resolve(*v);
            let norm = tv.l2_norm();
            if norm <= NORM_FLOOR {
                return Err(Error::invalid(format!(
                    "cannot normalize near-zero vector (norm {norm:e})"
                )));
            }
            let out = tv.data().iter().map(|x| x / norm).collect();
            Ok((
                Tensor::from_vec(tv.shape(), out)?,
                Saved::L2Norm { norm },
            ))
        }
        Op::Contrastive { zs, rs } => {
            if zs.len() != rs.len() || zs.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "contrastive",
                    lhs: vec![zs.len()],
                    rhs: vec![rs.len()],
                });
            }
            let n = zs.len();
            let zvals: Vec<&Tensor> = zs.iter().map(|&z| resolve(z)).collect();
            let rvals: Vec<&Tensor> = rs.iter().map(|&r| resolve(r)).collect();
            let d = zvals[0].len();
            for t in zvals.iter().chain(&rvals) {
                if t.len() != d {
                    return Err(Error::ShapeMismatch {
                        op: "contrastive",
                        lhs: t.shape().to_vec(),
                        rhs: vec![d],
                    });
                }
                if (t.l2_norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "contrastive input not unit-norm (norm {})",
                        t.l2_norm()
                    )));
                }
            }
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = zvals[i]
                        .data()
                        .iter()
                        .zip(rvals[j].data())
                        .map(|(x, y)| x * y)
                        .sum();
                }
            }
            let mut prow = vec![0.0; n * n];
            let mut pcol = vec![0.0; n * n];
            let mut loss = 0.0;
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|j| a[i * n + j]).collect();
                let lr = log_sum_exp(&row);
                for j in 0..n {
                    prow[i * n + j] = (a[i * n + j] - lr).exp();
                }
                let col: Vec<f64> = (0..n).map(|j| a[j * n + i]).collect();
                let lc = log_sum_exp(&col);
                for j in 0..n {
                    pcol[j * n + i] = (a[j * n + i] - lc).exp();
                }
                loss -= (a[i * n + i] - lr) + (a[i * n + i] - lc);
            }
            loss /= 2.0 * n as f64;
            Ok((Tensor::scalar(loss), Saved::Contrastive { prow, pcol }))
        }
        Op::LinComb { terms } => {
            let mut acc = 0.0;
            for (id, c) in terms {
                let t = resolve(*id);
                if t.len() != 1 {
                    return Err(Error::invalid(format!(
                        "lin_comb expects scalar terms, got shape {:?}",
                        t.shape()
                    )));
                }
                acc += c * t.item();
            }
            Ok((Tensor::scalar(acc), Saved::None))
        }
        Op::SumSquares { x, coeff } => {
            let tx = resolve(*x);
            let s: f64 = tx.data().iter().map(|v| v * v).sum();
            Ok((Tensor::scalar(0.5 * coeff * s), Saved::None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let eye = g.input(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(tensor(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let out = g.matmul(&store, eye, m).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn matmul_column_selection() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.input(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(tensor(&[2, 1], &[0.0, 1.0]));
        let out = g.matmul(&store, a, b).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = Rng::new(11);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let na = g.input(a.clone());
        let nb = g.input(b.clone());
        let out = g.matmul(&store, na, nb).unwrap();
        // independent scalar triple-loop reference
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((g.value(out).data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(&store, a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[1, 8]));
        let out = g
            .softmax_cross_entropy(&store, logits, &[3], &[1.0])
            .unwrap();
        assert!((g.value(out).item() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut data = vec![0.0; 8];
        data[2] = 1000.0;
        let logits = g.input(tensor(&[1, 8], &data));
        let out = g
            .softmax_cross_entropy(&store, logits, &[2], &[1.0])
            .unwrap();
        assert!(g.value(out).item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_against_lse_oracle() {
        let mut rng = Rng::new(5);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let logits = rand_tensor(&mut rng, &[4, 10]);
        let targets = [1u32, 9, 0, 4];
        let mask = [1.0, 0.5, 1.0, 2.0];
        let node = g.input(logits.clone());
        let out = g
            .softmax_cross_entropy(&store, node, &targets, &mask)
            .unwrap();
        // direct log-sum-exp reference
        let mut expect = 0.0;
        for (i, (&y, &m)) in targets.iter().zip(&mask).enumerate() {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            expect += m * (lse - row[y as usize]);
        }
        expect /= mask.iter().sum::<f64>();
        assert!((g.value(out).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[1, 8]));
        assert!(g
            .softmax_cross_entropy(&store, logits, &[8], &[1.0])
            .is_err());
    }

    #[test]
    fn mean_pool_singleton_and_symmetry() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(tensor(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let single = g.mean_pool(&store, x, &[1]).unwrap();
        assert_eq!(g.value(single).data(), &[1.0, 2.0, 3.0]);
        let both = g.mean_pool(&store, x, &[0, 1]).unwrap();
        assert_eq!(g.value(both).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mean_pool_against_summation_oracle() {
        let mut rng = Rng::new(17);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = rand_tensor(&mut rng, &[5, 3]);
        let node = g.input(x.clone());
        let out = g.mean_pool(&store, node, &[0, 2, 4]).unwrap();
        for j in 0..3 {
            let s = (x.data()[j] + x.data()[2 * 3 + j] + x.data()[4 * 3 + j]) / 3.0;
            assert!((g.value(out).data()[j] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_pool_rejects_empty_span() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.mean_pool(&store, x, &[]).is_err());
    }

    #[test]
    fn l2_normalize_345() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let v = g.input(tensor(&[2], &[3.0, 4.0]));
        let out = g.l2_normalize(&store, v).unwrap();
        assert!((g.value(out).data()[0] - 0.6).abs() < 1e-15);
        assert!((g.value(out).data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norm_property() {
        let mut rng = Rng::new(23);
        let store = ParamStore::new();
        for _ in 0..20 {
            let mut g = Graph::new();
            let v = g.input(rand_tensor(&mut rng, &[16]));
            let out = g.l2_normalize(&store, v).unwrap();
            assert!((g.value(out).l2_norm() - 1.0).abs() < 1e-12);
            // idempotence on the unit sphere
            let again = g.l2_normalize(&store, out).unwrap();
            for (a, b) in g.value(again).data().iter().zip(g.value(out).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let v = g.input(tensor(&[3], &[0.0, 1e-13, 0.0]));
        let err = g.l2_normalize(&store, v).unwrap_err();
        assert!(err.to_string().contains("norm"));
    }

    #[test]
    fn contrastive_single_element_is_exactly_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let z = g.input(tensor(&[2], &[1.0, 0.0]));
        let r = g.input(tensor(&[2], &[0.6, 0.8]));
        let out = g.contrastive(&store, &[z], &[r]).unwrap();
        assert_eq!(g.value(out).item(), 0.0);
    }

    #[test]
    fn contrastive_orthonormal_pair_closed_form() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let e1 = tensor(&[2], &[1.0, 0.0]);
        let e2 = tensor(&[2], &[0.0, 1.0]);
        let z1 = g.input(e1.clone());
        let z2 = g.input(e2.clone());
        let r1 = g.input(e1);
        let r2 = g.input(e2);
        let out = g.contrastive(&store, &[z1, z2], &[r1, r2]).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((g.value(out).item() - expect).abs() < 1e-12);
        assert!((g.value(out).item() - 0.3133).abs() < 1e-4);
    }

    /// Independent double-loop oracle for the symmetric contrastive loss.
    pub(crate) fn contrastive_oracle(zs: &[Vec<f64>], rs: &[Vec<f64>]) -> f64 {
        let n = zs.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let mut row_den = 0.0;
            for k in 0..n {
                row_den += dot(&zs[i], &rs[k]).exp();
            }
            let mut col_den = 0.0;
            for j in 0..n {
                col_den += dot(&zs[j], &rs[i]).exp();
            }
            let pos = dot(&zs[i], &rs[i]).exp();
            total += (pos / row_den).ln() + (pos / col_den).ln();
        }
        -total / (2.0 * n as f64)
    }

    #[test]
    fn contrastive_matches_double_loop_oracle() {
        let mut rng = Rng::new(31);
        let store = ParamStore::new();
        for _ in 0..10 {
            let mut g = Graph::new();
            let mut zs = Vec::new();
            let mut rs = Vec::new();
            let mut zv = Vec::new();
            let mut rv = Vec::new();
            for _ in 0..4 {
                let z = g.input(rand_tensor(&mut rng, &[16]));
                let zn = g.l2_normalize(&store, z).unwrap();
                zv.push(g.value(zn).data().to_vec());
                zs.push(zn);
                let r = g.input(rand_tensor(&mut rng, &[16]));
                let rn = g.l2_normalize(&store, r).unwrap();
                rv.push(g.value(rn).data().to_vec());
                rs.push(rn);
            }
            let out = g.contrastive(&store, &zs, &rs).unwrap();
            let expect = contrastive_oracle(&zv, &rv);
            assert!((g.value(out).item() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn contrastive_is_nonnegative_and_symmetric() {
        let mut rng = Rng::new(37);
        let store = ParamStore::new();
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut zs = Vec::new();
            let mut rs = Vec::new();
            for _ in 0..3 {
                let z = g.input(rand_tensor(&mut rng, &[8]));
                zs.push(g.l2_normalize(&store, z).unwrap());
                let r = g.input(rand_tensor(&mut rng, &[8]));
                rs.push(g.l2_normalize(&store, r).unwrap());
            }
            let fwd = g.contrastive(&store, &zs, &rs).unwrap();
            let swapped = g.contrastive(&store, &rs, &zs).unwrap();
            assert!(g.value(fwd).item() >= 0.0);
            // swapping roles transposes the similarity matrix; the two log
            // terms exchange and the loss is unchanged
            assert_eq!(g.value(fwd).item(), g.value(swapped).item());
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(41);
        let a = rand_tensor(&mut rng, &[4, 4]);
        let b = rand_tensor(&mut rng, &[4, 4]);
        let store = ParamStore::new();
        let run = || {
            let mut g = Graph::new();
            let na = g.input(a.clone());
            let nb = g.input(b.clone());
            let mm = g.matmul(&store, na, nb).unwrap();
            let act = g.gelu(&store, mm).unwrap();
            g.value(act).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_matmul_param_gradients() {
        // loss = (x W) with scalar output; d loss / d W = x^T.
        let mut store = ParamStore::new();
        let w = store.insert("w", tensor(&[2, 1], &[5.0, 7.0]));
        let mut g = Graph::new();
        let x = g.input(tensor(&[1, 2], &[2.0, 3.0]));
        let wn = g.param(w);
        let prod = g.matmul(&store, x, wn).unwrap();
        let loss = g.lin_comb(&store, &[(prod, 1.0)]).unwrap();
        let mut grads = GradBuffer::zeros(&store);
        g.backward(&store, loss, &mut grads).unwrap();
        assert_eq!(g.value(loss).item(), 31.0);
        assert_eq!(grads.get(w), &[2.0, 3.0]);
    }

    #[test]
    fn backward_flows_into_params() {
        // loss = ce(x W); checks parameter gradients are accumulated.
        let mut store = ParamStore::new();
        let w = store.insert("w", tensor(&[2, 3], &[0.1, 0.2, 0.3, -0.1, 0.0, 0.4]));
        let mut g = Graph::new();
        let x = g.input(tensor(&[1, 2], &[1.0, -1.0]));
        let wn = g.param(w);
        let logits = g.matmul(&store, x, wn).unwrap();
        let loss = g
            .softmax_cross_entropy(&store, logits, &[1], &[1.0])
            .unwrap();
        let mut grads = GradBuffer::zeros(&store);
        g.backward(&store, loss, &mut grads).unwrap();
        let gnorm: f64 = grads.get(w).iter().map(|v| v * v).sum();
        assert!(gnorm > 0.0);
    }

    #[test]
    fn replay_tracks_param_updates() {
        let mut store = ParamStore::new();
        let w = store.insert("w", tensor(&[1, 1], &[2.0]));
        let mut g = Graph::new();
        let x = g.input(tensor(&[1, 1], &[3.0]));
        let wn = g.param(w);
        let y = g.matmul(&store, x, wn).unwrap();
        assert_eq!(g.value(y).item(), 6.0);
        store.get_mut(w).data_mut()[0] = 5.0;
        g.replay(&store).unwrap();
        assert_eq!(g.value(y).item(), 15.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        let mut grads = GradBuffer::zeros(&store);
        assert!(g.backward(&store, x, &mut grads).is_err());
    }
}
