//! Two-stage training: first the thought compressor (cross-entropy plus a
//! symmetric in-batch contrastive term between pooled thought
//! representations and their anchor-token representations), then the
//! content model against the frozen compressor with representations
//! injected at every marker position.

mod optimizer;
mod steps;

pub use optimizer::{lr_at, AdamW};
pub use steps::{
    aux_batch_grads, aux_batch_grads_opts, aux_batch_graph, aux_batch_graph_opts,
    eval_aux_perplexity, hcot_batch_grads, hcot_representations, seq_batch_grads, LossBreakdown,
};

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataprep::{AuxInstance, HCoTInstance, SeqInstance};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::numerics::{GradBuffer, Graph, Tensor};
use crate::rng::Rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Contrastive weight; zero reduces the stage-1 loss to pure
    /// cross-entropy, bitwise.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_one")]
    pub grad_accum_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Optimizer steps between dev evaluations; 0 means once per epoch.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_warmup")]
    pub warmup_frac: f64,
    /// Intra-batch parallelism; 1 keeps everything on the calling thread.
    #[serde(default = "d_one")]
    pub threads: usize,
    /// Pool thought representations from standalone encodings of the bare
    /// thought sequence instead of the teacher-forced pass (non-default).
    #[serde(default)]
    pub standalone_pooling: bool,
}

fn d_lambda() -> f64 {
    0.1
}
fn d_lr() -> f64 {
    3e-4
}
fn d_batch() -> usize {
    16
}
fn d_epochs() -> usize {
    4
}
fn d_one() -> usize {
    1
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.99
}
fn d_eps() -> f64 {
    1e-8
}
fn d_warmup() -> f64 {
    0.05
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: d_lambda(),
            learning_rate: d_lr(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            grad_accum_steps: 1,
            seed: 0,
            checkpoint_every: 0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            warmup_frac: d_warmup(),
            threads: 1,
            standalone_pooling: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.grad_accum_steps == 0 {
            return Err(Error::config(
                "batch_size, epochs and grad_accum_steps must be at least 1",
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Aux,
    Hcot,
    Fullcot,
    Nocot,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Aux => "aux",
            Stage::Hcot => "hcot",
            Stage::Fullcot => "fullcot",
            Stage::Nocot => "nocot",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aux" => Ok(Stage::Aux),
            "hcot" => Ok(Stage::Hcot),
            "fullcot" => Ok(Stage::Fullcot),
            "nocot" => Ok(Stage::Nocot),
            other => Err(Error::config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Training inputs for one stage.
pub enum TrainData<'a> {
    Aux(&'a [AuxInstance]),
    Hcot {
        instances: &'a [HCoTInstance],
        frozen_aux: &'a Transformer,
    },
    Seq(&'a [SeqInstance]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Aux(v) => v.len(),
            TrainData::Hcot { instances, .. } => instances.len(),
            TrainData::Seq(v) => v.len(),
        }
    }

    fn source(&self, i: usize) -> usize {
        match self {
            TrainData::Aux(v) => v[i].source_sample,
            TrainData::Hcot { instances, .. } => instances[i].source_sample,
            TrainData::Seq(v) => v[i].source_sample,
        }
    }

    fn batch_grads(
        &self,
        model: &Transformer,
        idxs: &[usize],
        cfg: &TrainConfig,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<(LossBreakdown, GradBuffer)> {
        match self {
            TrainData::Aux(v) => {
                let refs: Vec<&AuxInstance> = idxs.iter().map(|&i| &v[i]).collect();
                aux_batch_grads_opts(model, &refs, cfg.lambda, cfg.standalone_pooling, pool)
            }
            TrainData::Hcot {
                instances,
                frozen_aux,
            } => {
                let refs: Vec<&HCoTInstance> = idxs.iter().map(|&i| &instances[i]).collect();
                hcot_batch_grads(model, frozen_aux, &refs, pool)
            }
            TrainData::Seq(v) => {
                let refs: Vec<&SeqInstance> = idxs.iter().map(|&i| &v[i]).collect();
                seq_batch_grads(model, &refs, pool)
            }
        }
    }
}

/// Dev-set selection metric.
pub enum DevEval<'a> {
    /// Perplexity on compressor targets; lower is better.
    AuxPerplexity(&'a [AuxInstance]),
    /// Arbitrary metric (task accuracy at desk scale); higher is better.
    Metric(Box<dyn Fn(&Transformer) -> crate::error::Result<f64> + Sync + 'a>),
}

impl DevEval<'_> {
    fn run(&self, model: &Transformer, pool: Option<&rayon::ThreadPool>) -> Result<f64> {
        match self {
            DevEval::AuxPerplexity(insts) => eval_aux_perplexity(model, insts, pool),
            DevEval::Metric(f) => f(model),
        }
    }

    fn higher_is_better(&self) -> bool {
        matches!(self, DevEval::Metric(_))
    }
}

/// One record per checkpoint event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: String,
    pub epoch: usize,
    /// Mean losses over the interval since the previous record; absent on
    /// the step-0 record.
    pub ce: Option<f64>,
    pub contrastive: Option<f64>,
    pub total: Option<f64>,
    pub dev_metric: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model restored to the best dev checkpoint.
    pub model: Transformer,
    pub log: Vec<LogRecord>,
    pub best_metric: f64,
    pub best_step: usize,
    /// Training stopped early on a non-finite loss; `model` holds the last
    /// good checkpoint.
    pub aborted_nan: bool,
}

/// Group shuffled instances into batches whose members come from distinct
/// source samples whenever possible (in-batch negatives must be genuine).
fn assemble_batches(order: &[usize], sources: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut remaining: VecDeque<usize> = order.iter().copied().collect();
    let mut batches = Vec::new();
    while !remaining.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut used: HashSet<usize> = HashSet::with_capacity(batch_size);
        let mut deferred: Vec<usize> = Vec::new();
        while batch.len() < batch_size {
            let Some(i) = remaining.pop_front() else { break };
            if used.insert(sources[i]) {
                batch.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            remaining.push_front(i);
        }
        batches.push(batch);
    }
    batches
}

/// Run one full training stage and return the best dev checkpoint plus a
/// step-indexed log. Deterministic for a fixed config (any thread count:
/// per-instance work is pure and reductions run in fixed order).
pub fn train_stage(
    mut model: Transformer,
    data: TrainData,
    dev: DevEval,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if model.frozen() {
        return Err(Error::FrozenModel);
    }
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let pool = pool.as_ref();

    let n = data.len();
    let sources: Vec<usize> = (0..n).map(|i| data.source(i)).collect();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.grad_accum_steps);
    let total_steps = steps_per_epoch * cfg.epochs;
    let every = if cfg.checkpoint_every == 0 {
        steps_per_epoch
    } else {
        cfg.checkpoint_every
    };

    let mut opt = AdamW::new(
        model.params(),
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.weight_decay,
    );
    let mut order_rng = Rng::derive(cfg.seed, "train-order");
    let started = Instant::now();
    let higher = dev.higher_is_better();

    let mut log: Vec<LogRecord> = Vec::new();
    let mut best_params = model.params().clone();
    let mut best_metric;
    let mut best_step = 0;
    let mut interval = IntervalMean::default();
    let mut step = 0usize;

    // step-0 baseline evaluation
    let metric0 = dev.run(&model, pool)?;
    best_metric = metric0;
    log.push(LogRecord {
        step: 0,
        stage: stage.as_str().to_string(),
        epoch: 0,
        ce: None,
        contrastive: None,
        total: None,
        dev_metric: metric0,
        wall_ms: started.elapsed().as_millis() as u64,
    });

    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        let batches = assemble_batches(&order, &sources, cfg.batch_size);
        for group in batches.chunks(cfg.grad_accum_steps) {
            let mut grads = GradBuffer::zeros(model.params());
            let mut breakdown = LossBreakdown::default();
            for idxs in group {
                let (b, g) = data.batch_grads(&model, idxs, cfg, pool)?;
                grads.add_from(&g);
                breakdown.ce += b.ce;
                breakdown.contrastive += b.contrastive;
                breakdown.total += b.total;
            }
            let gn = group.len() as f64;
            grads.scale(1.0 / gn);
            breakdown.ce /= gn;
            breakdown.contrastive /= gn;
            breakdown.total /= gn;
            if !breakdown.total.is_finite() {
                log::error!("non-finite loss at step {step}; aborting with last good checkpoint");
                let mut aborted = model;
                *aborted.params_mut()? = best_params;
                return Ok(TrainOutcome {
                    model: aborted,
                    log,
                    best_metric,
                    best_step,
                    aborted_nan: true,
                });
            }
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_frac);
            opt.step(&mut model, &grads, lr)?;
            step += 1;
            interval.push(&breakdown);

            if step % every == 0 {
                let metric = dev.run(&model, pool)?;
                // ties go to the later (more trained) checkpoint
                let improved = if higher {
                    metric >= best_metric
                } else {
                    metric <= best_metric
                };
                if improved || best_metric.is_nan() {
                    best_metric = metric;
                    best_step = step;
                    best_params = model.params().clone();
                }
                let (ce, contr, total) = interval.take();
                log.push(LogRecord {
                    step,
                    stage: stage.as_str().to_string(),
                    epoch,
                    ce,
                    contrastive: contr,
                    total,
                    dev_metric: metric,
                    wall_ms: started.elapsed().as_millis() as u64,
                });
            }
            if step >= total_steps {
                break 'outer;
            }
        }
    }

    *model.params_mut()? = best_params;
    Ok(TrainOutcome {
        model,
        log,
        best_metric,
        best_step,
        aborted_nan: false,
    })
}

#[derive(Default)]
struct IntervalMean {
    ce: f64,
    contrastive: f64,
    total: f64,
    count: usize,
}

impl IntervalMean {
    fn push(&mut self, b: &LossBreakdown) {
        self.ce += b.ce;
        self.contrastive += b.contrastive;
        self.total += b.total;
        self.count += 1;
    }

    fn take(&mut self) -> (Option<f64>, Option<f64>, Option<f64>) {
        if self.count == 0 {
            return (None, None, None);
        }
        let n = self.count as f64;
        let out = (
            Some(self.ce / n),
            Some(self.contrastive / n),
            Some(self.total / n),
        );
        *self = IntervalMean::default();
        out
    }
}

/// Unit-normalized mean-pooled thought representation.
#[derive(Clone, Debug)]
pub struct PooledThought(Tensor);

/// Unit-normalized representation of the handoff token.
#[derive(Clone, Debug)]
pub struct CoTAnchor(Tensor);

fn check_unit(t: &Tensor, what: &str) -> Result<()> {
    if (t.l2_norm() - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "{what} must be unit-norm, got {}",
            t.l2_norm()
        )));
    }
    Ok(())
}

impl PooledThought {
    pub fn new(t: Tensor) -> Result<Self> {
        check_unit(&t, "pooled thought")?;
        Ok(PooledThought(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

impl CoTAnchor {
    pub fn new(t: Tensor) -> Result<Self> {
        check_unit(&t, "anchor representation")?;
        Ok(CoTAnchor(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Symmetric in-batch contrastive loss over unit vectors; raw dot-product
/// similarities, stabilized softmax rows and columns, no temperature.
pub fn contrastive_loss(zs: &[PooledThought], rs: &[CoTAnchor]) -> Result<f64> {
    if zs.len() != rs.len() || zs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: vec![zs.len()],
            rhs: vec![rs.len()],
        });
    }
    let store = crate::numerics::ParamStore::new();
    let mut g = Graph::new();
    let zn: Vec<_> = zs.iter().map(|z| g.input(z.0.clone())).collect();
    let rn: Vec<_> = rs.iter().map(|r| g.input(r.0.clone())).collect();
    let node = g.contrastive(&store, &zn, &rn)?;
    Ok(g.value(node).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::{make_aux_instances, make_hcot_instance};
    use crate::model::{content_hash, init_model, ModelConfig};
    use crate::numerics::grad_check;
    use crate::rng::Rng as TestRng;
    use crate::taskgen::gen_chain_arithmetic;
    use crate::vocab::Vocab;

    fn tiny_model(seed: u64) -> Transformer {
        let cfg = ModelConfig {
            vocab_size: Vocab::builtin().size(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 160,
            cot_token_id: Vocab::builtin().cot(),
            dropout_rate: 0.0,
        };
        init_model(&cfg, seed).unwrap()
    }

    fn aux_data(count: usize) -> Vec<AuxInstance> {
        let vocab = Vocab::builtin();
        let mut out = Vec::new();
        for seed in 0..count as u64 {
            let s = gen_chain_arithmetic(seed, 1, 9);
            out.extend(make_aux_instances(&s, vocab, seed as usize).unwrap());
        }
        out
    }

    #[test]
    fn contrastive_loss_public_api_basics() {
        let mut rng = TestRng::new(1);
        let mk = |rng: &mut TestRng| {
            let raw: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            Tensor::from_vec(&[8], raw.iter().map(|v| v / norm).collect()).unwrap()
        };
        let zs: Vec<PooledThought> = (0..4)
            .map(|_| PooledThought::new(mk(&mut rng)).unwrap())
            .collect();
        let rs: Vec<CoTAnchor> = (0..4).map(|_| CoTAnchor::new(mk(&mut rng)).unwrap()).collect();
        let v = contrastive_loss(&zs, &rs).unwrap();
        assert!(v >= 0.0);
        let one = contrastive_loss(&zs[..1], &rs[..1]).unwrap();
        assert_eq!(one, 0.0);
    }

    #[test]
    fn unit_norm_enforced() {
        let t = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert!(PooledThought::new(t.clone()).is_err());
        assert!(CoTAnchor::new(t).is_err());
    }

    #[test]
    fn single_instance_steps_strictly_decrease_loss() {
        let mut model = tiny_model(1);
        let data = aux_data(1);
        let refs: Vec<&AuxInstance> = data.iter().collect();
        let mut opt = AdamW::new(model.params(), 0.9, 0.99, 1e-8, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (b, g) = aux_batch_grads(&model, &refs, 0.1, None).unwrap();
            assert!(b.total < last, "{} !< {last}", b.total);
            last = b.total;
            opt.step(&mut model, &g, 1e-3).unwrap();
        }
    }

    #[test]
    fn combined_loss_gradcheck_on_small_transformer() {
        // cross-entropy + contrastive through the whole model
        let model = tiny_model(2);
        let data = aux_data(2);
        let refs: Vec<&AuxInstance> = data.iter().take(2).collect();
        let (mut g, total, _) = aux_batch_graph(&model, &refs, 0.1).unwrap();
        let mut store = model.params().clone();
        let report = grad_check(&mut store, &mut g, total, 1e-3).unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "max rel err {} at {:?}",
            report.max_relative_error,
            report.worst().map(|w| w.name.clone())
        );
    }

    #[test]
    fn train_stage_is_deterministic_and_returns_best() {
        let data = aux_data(8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            train_stage(
                tiny_model(3),
                TrainData::Aux(&data),
                DevEval::AuxPerplexity(&data),
                &cfg,
                Stage::Aux,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.ce, y.ce);
            assert_eq!(x.dev_metric, y.dev_metric);
        }
        let vh = Vocab::builtin().hash();
        assert_eq!(content_hash(&a.model, &vh), content_hash(&b.model, &vh));
        // best checkpoint's metric is the log minimum (perplexity)
        let min = a
            .log
            .iter()
            .map(|r| r.dev_metric)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_metric, min);
        // log length: one step-0 record plus one per checkpoint interval
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs;
        assert_eq!(a.log.len(), total / steps_per_epoch + 1);
    }

    #[test]
    fn content_stage_leaves_compressor_hash_unchanged() {
        let vocab = Vocab::builtin();
        let mut aux = tiny_model(4);
        aux.freeze();
        let vh = vocab.hash();
        let hash_before = content_hash(&aux, &vh);
        let samples: Vec<_> = (0..6).map(|s| gen_chain_arithmetic(s, 1, 9)).collect();
        let insts: Vec<HCoTInstance> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| make_hcot_instance(s, vocab, i).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let outcome = train_stage(
            tiny_model(5),
            TrainData::Hcot {
                instances: &insts,
                frozen_aux: &aux,
            },
            DevEval::Metric(Box::new(move |_m| Ok(0.0))),
            &cfg,
            Stage::Hcot,
        )
        .unwrap();
        assert!(!outcome.aborted_nan);
        assert_eq!(content_hash(&aux, &vh), hash_before);
    }

    #[test]
    fn assemble_batches_separates_sources() {
        let sources = vec![0, 0, 1, 1, 2, 2];
        let order: Vec<usize> = (0..6).collect();
        let batches = assemble_batches(&order, &sources, 3);
        for b in &batches {
            let set: HashSet<_> = b.iter().map(|&i| sources[i]).collect();
            assert_eq!(set.len(), b.len(), "duplicate source in batch {b:?}");
        }
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, 6);
    }
}
