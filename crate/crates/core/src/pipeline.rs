//! Filesystem pipeline tying generation, training, inference and
//! benchmarking into reproducible run directories.
//!
//! Layout under the configured output directory:
//!   data/            train.jsonl dev.jsonl test.jsonl manifest.json
//!   train-<stage>/   checkpoint.ckpt log.jsonl instances.jsonl manifest.json
//!   infer-<mode>/    traces.jsonl manifest.json
//!   bench/           report.json report.txt manifest.json
//!
//! Every file a step writes is listed in that step's manifest. Manifests
//! carry no timestamps, so re-running a step with the same config produces
//! byte-identical artifacts.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    accuracy, agent_accuracy, compression_report, emit_report, extract_actions, BenchReport,
    Fingerprints, ReportFormat, RunEntry, RunSet, TaskBench,
};
use crate::bench::answers_match;
use crate::config::ExperimentConfig;
use crate::dataprep::{
    make_aux_instances_opts, make_fullcot_instance, make_hcot_instance, make_nocot_instance,
    AuxInstance, HCoTInstance, SeqInstance,
};
use crate::error::{Error, Result};
use crate::inference::{infer_full_cot, infer_hcot, infer_no_cot, InferenceConfig, InferenceTrace};
use crate::model::{
    init_model, load_checkpoint, save_checkpoint, Transformer,
};
use crate::taskgen::{generate_dataset, split_dataset, HCoTSample, TaskKind};
use crate::training::{train_stage, DevEval, Stage, TrainData, TrainOutcome};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Hcot,
    Fullcot,
    Nocot,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Hcot => "hcot",
            Mode::Fullcot => "fullcot",
            Mode::Nocot => "nocot",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcot" => Ok(Mode::Hcot),
            "fullcot" => Ok(Mode::Fullcot),
            "nocot" => Ok(Mode::Nocot),
            other => Err(Error::config(format!("unknown inference mode {other:?}"))),
        }
    }
}

pub struct Paths;

impl Paths {
    pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir.join("data")
    }

    pub fn train_dir(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
        cfg.output_dir.join(format!("train-{}", stage.as_str()))
    }

    pub fn checkpoint_path(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
        Self::train_dir(cfg, stage).join("checkpoint.ckpt")
    }

    pub fn infer_dir(cfg: &ExperimentConfig, mode: Mode) -> PathBuf {
        cfg.output_dir.join(format!("infer-{}", mode.as_str()))
    }

    pub fn bench_dir(cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir.join("bench")
    }
}

/// Step manifest: everything the step produced, keyed by file name.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub file_hashes: BTreeMap<String, String>,
    pub extra: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|_| Error::MissingDependency(format!("{} has no manifest", dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Create (or clear, with force) a step directory. A non-empty directory
/// without force is rejected.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::config(format!(
                    "{} already exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Order-sensitive digest of a split's questions.
pub fn split_fingerprint(samples: &[HCoTSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.question.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct GenSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

pub fn cmd_gen(cfg: &ExperimentConfig, force: bool) -> Result<GenSummary> {
    let dir = Paths::data_dir(cfg);
    prepare_dir(&dir, force)?;
    let gen_seed = cfg.derived_seed("gen");
    let split_seed = cfg.derived_seed("split");
    let samples = generate_dataset(&cfg.task, cfg.data.total(), gen_seed)?;
    let (train, dev, test) = split_dataset(samples, cfg.data.fractions(), split_seed)?;
    if train.len() != cfg.data.train || dev.len() != cfg.data.dev || test.len() != cfg.data.test {
        return Err(Error::config(format!(
            "split sizes {}/{}/{} do not match configured {}/{}/{}",
            train.len(),
            dev.len(),
            test.len(),
            cfg.data.train,
            cfg.data.dev,
            cfg.data.test
        )));
    }
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("dev.jsonl"), &dev)?;
    write_jsonl(&dir.join("test.jsonl"), &test)?;
    let mut counts = BTreeMap::new();
    counts.insert("train".into(), train.len());
    counts.insert("dev".into(), dev.len());
    counts.insert("test".into(), test.len());
    let mut file_hashes = BTreeMap::new();
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        file_hashes.insert(name.into(), sha256_file(&dir.join(name))?);
    }
    let mut extra = BTreeMap::new();
    extra.insert("train_fingerprint".into(), split_fingerprint(&train));
    extra.insert("dev_fingerprint".into(), split_fingerprint(&dev));
    extra.insert("test_fingerprint".into(), split_fingerprint(&test));
    write_manifest(
        &dir,
        &Manifest {
            kind: "dataset".into(),
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            counts,
            file_hashes,
            extra,
        },
    )?;
    Ok(GenSummary {
        train: train.len(),
        dev: dev.len(),
        test: test.len(),
    })
}

pub fn load_datasets(
    cfg: &ExperimentConfig,
) -> Result<(Vec<HCoTSample>, Vec<HCoTSample>, Vec<HCoTSample>)> {
    let dir = Paths::data_dir(cfg);
    if !dir.join("train.jsonl").exists() {
        return Err(Error::MissingDependency(format!(
            "dataset not found in {} (run gen first)",
            dir.display()
        )));
    }
    Ok((
        read_jsonl(&dir.join("train.jsonl"))?,
        read_jsonl(&dir.join("dev.jsonl"))?,
        read_jsonl(&dir.join("test.jsonl"))?,
    ))
}

// ---------------------------------------------------------------------------
// parallel accuracy evaluation (used for dev selection and test inference)
// ---------------------------------------------------------------------------

fn infer_one(
    mode: Mode,
    question: &str,
    model: &Transformer,
    aux: Option<&Transformer>,
    vocab: &Vocab,
    task: TaskKind,
    icfg: &InferenceConfig,
) -> Result<InferenceTrace> {
    match mode {
        Mode::Hcot => {
            let aux = aux.ok_or_else(|| {
                Error::MissingDependency("two-model inference needs the compressor".into())
            })?;
            infer_hcot(question, model, aux, vocab, task, icfg)
        }
        Mode::Fullcot => infer_full_cot(question, model, vocab, task, icfg),
        Mode::Nocot => infer_no_cot(question, model, vocab, task, icfg),
    }
}

/// Run inference over a whole split, in question order. `threads > 1`
/// parallelizes across questions (models are read-only); results come back
/// in order either way.
pub fn infer_split(
    mode: Mode,
    samples: &[HCoTSample],
    model: &Transformer,
    aux: Option<&Transformer>,
    vocab: &Vocab,
    task: TaskKind,
    icfg: &InferenceConfig,
    threads: usize,
) -> Result<Vec<InferenceTrace>> {
    let work: Vec<&HCoTSample> = samples.iter().collect();
    let run = |s: &HCoTSample| infer_one(mode, &s.question, model, aux, vocab, task, icfg);
    let results: Vec<Result<InferenceTrace>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| work.into_par_iter().map(run).collect())
    } else {
        work.into_iter().map(run).collect()
    };
    results.into_iter().collect()
}

/// Task accuracy of a model over a split.
pub fn eval_split_accuracy(
    mode: Mode,
    samples: &[HCoTSample],
    model: &Transformer,
    aux: Option<&Transformer>,
    vocab: &Vocab,
    task: TaskKind,
    icfg: &InferenceConfig,
    threads: usize,
) -> Result<f64> {
    let traces = infer_split(mode, samples, model, aux, vocab, task, icfg, threads)?;
    let correct = traces
        .iter()
        .zip(samples)
        .filter(|(t, s)| answers_match(task, t.answer.as_deref(), &s.gold_answer))
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainSummary {
    pub stage: Stage,
    pub best_metric: f64,
    pub best_step: usize,
    pub checkpoint_hash: String,
    pub aborted_nan: bool,
}

fn build_aux_instances(
    samples: &[HCoTSample],
    vocab: &Vocab,
    full_prior_thoughts: bool,
) -> Result<Vec<AuxInstance>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        out.extend(make_aux_instances_opts(s, vocab, i, full_prior_thoughts)?);
    }
    Ok(out)
}

fn build_hcot_instances(samples: &[HCoTSample], vocab: &Vocab) -> Result<Vec<HCoTInstance>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| make_hcot_instance(s, vocab, i))
        .collect()
}

fn build_seq_instances(
    samples: &[HCoTSample],
    vocab: &Vocab,
    stage: Stage,
) -> Result<Vec<SeqInstance>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| match stage {
            Stage::Fullcot => make_fullcot_instance(s, vocab, i),
            Stage::Nocot => make_nocot_instance(s, vocab, i),
            _ => unreachable!(),
        })
        .collect()
}

fn load_frozen_aux(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<(Transformer, String)> {
    let path = Paths::checkpoint_path(cfg, Stage::Aux);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "compressor checkpoint {} not found (train the aux stage first)",
            path.display()
        )));
    }
    let (aux, vocab_hash, hash) = load_checkpoint(&path)?;
    if vocab_hash != vocab.hash() {
        return Err(Error::config(format!(
            "vocabulary mismatch: checkpoint {} vs current {}",
            hex(&vocab_hash),
            hex(&vocab.hash())
        )));
    }
    if !aux.frozen() {
        return Err(Error::config(format!(
            "compressor checkpoint {} is not frozen",
            path.display()
        )));
    }
    Ok((aux, hash))
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    stage: Stage,
    force: bool,
    threads: usize,
) -> Result<TrainSummary> {
    let vocab = Vocab::builtin();
    let (train_samples, dev_samples, _) = load_datasets(cfg)?;
    let dir = Paths::train_dir(cfg, stage);
    prepare_dir(&dir, force)?;

    let tc = cfg.train_config(stage, threads);
    let mcfg = cfg.model.to_model_config(vocab);
    let init_seed = cfg.derived_seed(&format!("init-{}", stage.as_str()));
    let model = init_model(&mcfg, init_seed)?;
    let task = cfg.task.kind;
    let icfg = cfg.inference.clone();

    let mut extra = BTreeMap::new();
    let outcome: TrainOutcome = match stage {
        Stage::Aux => {
            let full = cfg.data.aux_full_prior_thoughts;
            let train_insts = build_aux_instances(&train_samples, vocab, full)?;
            let dev_insts = build_aux_instances(&dev_samples, vocab, full)?;
            write_jsonl(&dir.join("instances.jsonl"), &train_insts)?;
            train_stage(
                model,
                TrainData::Aux(&train_insts),
                DevEval::AuxPerplexity(&dev_insts),
                &tc,
                stage,
            )?
        }
        Stage::Hcot => {
            let (aux, aux_hash) = load_frozen_aux(cfg, vocab)?;
            extra.insert("aux_checkpoint_hash".into(), aux_hash);
            let train_insts = build_hcot_instances(&train_samples, vocab)?;
            write_jsonl(&dir.join("instances.jsonl"), &train_insts)?;
            let aux_ref = &aux;
            let dev_ref = &dev_samples;
            let icfg_ref = &icfg;
            let eval = move |m: &Transformer| {
                eval_split_accuracy(
                    Mode::Hcot,
                    dev_ref,
                    m,
                    Some(aux_ref),
                    vocab,
                    task,
                    icfg_ref,
                    threads,
                )
            };
            train_stage(
                model,
                TrainData::Hcot {
                    instances: &train_insts,
                    frozen_aux: &aux,
                },
                DevEval::Metric(Box::new(eval)),
                &tc,
                stage,
            )?
        }
        Stage::Fullcot | Stage::Nocot => {
            let train_insts = build_seq_instances(&train_samples, vocab, stage)?;
            write_jsonl(&dir.join("instances.jsonl"), &train_insts)?;
            let mode = if stage == Stage::Fullcot {
                Mode::Fullcot
            } else {
                Mode::Nocot
            };
            let dev_ref = &dev_samples;
            let icfg_ref = &icfg;
            let eval = move |m: &Transformer| {
                eval_split_accuracy(mode, dev_ref, m, None, vocab, task, icfg_ref, threads)
            };
            train_stage(
                model,
                TrainData::Seq(&train_insts),
                DevEval::Metric(Box::new(eval)),
                &tc,
                stage,
            )?
        }
    };

    // the compressor ships frozen: downstream stages may only read it
    let mut best = outcome.model;
    if stage == Stage::Aux {
        best.freeze();
    }
    let ckpt_path = dir.join("checkpoint.ckpt");
    let checkpoint_hash = save_checkpoint(&ckpt_path, &best, &vocab.hash())?;
    write_jsonl(&dir.join("log.jsonl"), &outcome.log)?;

    let mut counts = BTreeMap::new();
    counts.insert("train_samples".into(), train_samples.len());
    counts.insert("dev_samples".into(), dev_samples.len());
    counts.insert("log_records".into(), outcome.log.len());
    let mut file_hashes = BTreeMap::new();
    for name in ["checkpoint.ckpt", "log.jsonl", "instances.jsonl"] {
        file_hashes.insert(name.into(), sha256_file(&dir.join(name))?);
    }
    extra.insert("best_metric".into(), format!("{}", outcome.best_metric));
    extra.insert("best_step".into(), format!("{}", outcome.best_step));
    extra.insert("checkpoint_hash".into(), checkpoint_hash.clone());
    extra.insert("aborted_nan".into(), format!("{}", outcome.aborted_nan));
    write_manifest(
        &dir,
        &Manifest {
            kind: "train".into(),
            config_hash: cfg.config_hash(),
            seed: tc.seed,
            counts,
            file_hashes,
            extra,
        },
    )?;

    if outcome.aborted_nan {
        return Err(Error::NonFinite(format!(
            "{} training aborted on non-finite loss; last good checkpoint saved",
            stage.as_str()
        )));
    }
    Ok(TrainSummary {
        stage,
        best_metric: outcome.best_metric,
        best_step: outcome.best_step,
        checkpoint_hash,
        aborted_nan: false,
    })
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

/// One line of a trace dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: usize,
    pub gold_answer: String,
    pub correct: bool,
    pub trace: InferenceTrace,
}

#[derive(Debug)]
pub struct InferSummary {
    pub mode: Mode,
    pub n: usize,
    pub accuracy: f64,
    /// Answer and handoff count for single-question mode.
    pub single: Option<(Option<String>, usize)>,
}

fn load_stage_model(
    cfg: &ExperimentConfig,
    stage: Stage,
    vocab: &Vocab,
) -> Result<(Transformer, String)> {
    let path = Paths::checkpoint_path(cfg, stage);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let (model, vocab_hash, hash) = load_checkpoint(&path)?;
    if vocab_hash != vocab.hash() {
        return Err(Error::config(format!(
            "vocabulary mismatch: checkpoint {} vs current {}",
            hex(&vocab_hash),
            hex(&vocab.hash())
        )));
    }
    Ok((model, hash))
}

pub fn cmd_infer(
    cfg: &ExperimentConfig,
    mode: Mode,
    question: Option<&str>,
    recover: bool,
    force: bool,
    threads: usize,
) -> Result<InferSummary> {
    let vocab = Vocab::builtin();
    let task = cfg.task.kind;
    let mut icfg = cfg.inference.clone();
    icfg.recover_thoughts = recover;

    let (model, model_hash, aux, aux_hash) = match mode {
        Mode::Hcot => {
            let (m, mh) = load_stage_model(cfg, Stage::Hcot, vocab)?;
            let (a, ah) = load_frozen_aux(cfg, vocab)?;
            (m, mh, Some(a), Some(ah))
        }
        Mode::Fullcot => {
            let (m, mh) = load_stage_model(cfg, Stage::Fullcot, vocab)?;
            (m, mh, None, None)
        }
        Mode::Nocot => {
            let (m, mh) = load_stage_model(cfg, Stage::Nocot, vocab)?;
            (m, mh, None, None)
        }
    };

    if let Some(q) = question {
        let trace = infer_one(mode, q, &model, aux.as_ref(), vocab, task, &icfg)?;
        return Ok(InferSummary {
            mode,
            n: 1,
            accuracy: 0.0,
            single: Some((trace.answer.clone(), trace.stats.handoff_count)),
        });
    }

    let (_, _, test) = load_datasets(cfg)?;
    let dir = Paths::infer_dir(cfg, mode);
    prepare_dir(&dir, force)?;
    let traces = infer_split(
        mode,
        &test,
        &model,
        aux.as_ref(),
        vocab,
        task,
        &icfg,
        threads,
    )?;
    let records: Vec<TraceRecord> = traces
        .into_iter()
        .zip(&test)
        .enumerate()
        .map(|(i, (trace, sample))| TraceRecord {
            question_id: i,
            gold_answer: sample.gold_answer.clone(),
            correct: answers_match(task, trace.answer.as_deref(), &sample.gold_answer),
            trace,
        })
        .collect();
    let n_correct = records.iter().filter(|r| r.correct).count();
    write_jsonl(&dir.join("traces.jsonl"), &records)?;

    let mut counts = BTreeMap::new();
    counts.insert("traces".into(), records.len());
    let mut file_hashes = BTreeMap::new();
    file_hashes.insert("traces.jsonl".into(), sha256_file(&dir.join("traces.jsonl"))?);
    let mut extra = BTreeMap::new();
    extra.insert("mode".into(), mode.as_str().into());
    extra.insert("model_hash".into(), model_hash);
    if let Some(ah) = aux_hash {
        extra.insert("aux_model_hash".into(), ah);
    }
    extra.insert("test_fingerprint".into(), split_fingerprint(&test));
    extra.insert("recover".into(), format!("{recover}"));
    write_manifest(
        &dir,
        &Manifest {
            kind: "infer".into(),
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            counts,
            file_hashes,
            extra,
        },
    )?;

    Ok(InferSummary {
        mode,
        n: records.len(),
        accuracy: n_correct as f64 / records.len() as f64,
        single: None,
    })
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn load_run_set(dir: &Path, expect_fingerprint: Option<&str>) -> Result<(RunSet, Manifest)> {
    let manifest = read_manifest(dir)?;
    if let (Some(expect), Some(actual)) =
        (expect_fingerprint, manifest.extra.get("test_fingerprint"))
    {
        if expect != actual {
            return Err(Error::config(format!(
                "split fingerprint mismatch: {expect} vs {actual}"
            )));
        }
    }
    let records: Vec<TraceRecord> = read_jsonl(&dir.join("traces.jsonl"))?;
    let mode = manifest
        .extra
        .get("mode")
        .cloned()
        .unwrap_or_else(|| "unknown".into());
    let entries: Vec<RunEntry> = records
        .into_iter()
        .map(|r| RunEntry {
            question_id: r.question_id,
            correct: r.correct,
            trace: r.trace,
        })
        .collect();
    Ok((RunSet::new(mode, entries)?, manifest))
}

/// Compute and write the benchmark report. `hcot_dir`/`baseline_dir`
/// default to this run's own inference outputs.
pub fn cmd_bench(
    cfg: &ExperimentConfig,
    format: ReportFormat,
    hcot_dir: Option<&Path>,
    baseline_dir: Option<&Path>,
) -> Result<String> {
    let vocab = Vocab::builtin();
    let _ = vocab;
    let task = cfg.task.kind;
    let default_h = Paths::infer_dir(cfg, Mode::Hcot);
    let default_b = Paths::infer_dir(cfg, Mode::Fullcot);
    let hdir = hcot_dir.unwrap_or(&default_h);
    let bdir = baseline_dir.unwrap_or(&default_b);

    let (hcot_runs, hmani) = load_run_set(hdir, None)?;
    let hfp = hmani.extra.get("test_fingerprint").cloned();
    let (base_runs, bmani) = load_run_set(bdir, hfp.as_deref())?;

    let (_, _, test) = load_datasets(cfg)?;
    let gold: HashMap<usize, String> = test
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.gold_answer.clone()))
        .collect();

    let include_recovery = hmani.extra.get("recover").map(String::as_str) == Some("true");
    let comp = compression_report(&hcot_runs, &base_runs, include_recovery)?;

    let mut acc_rows: Vec<(String, f64)> = Vec::new();
    // accuracy rows in fixed display order over whatever runs exist
    let nocot_dir = Paths::infer_dir(cfg, Mode::Nocot);
    if nocot_dir.join("traces.jsonl").exists() {
        let (nocot_runs, _) = load_run_set(&nocot_dir, hfp.as_deref())?;
        acc_rows.push(("nocot".into(), accuracy(&nocot_runs, &gold, task)?));
    }
    acc_rows.push(("fullcot".into(), accuracy(&base_runs, &gold, task)?));
    let hcot_label = if cfg.train.aux.lambda == 0.0 {
        "hcot_base".to_string()
    } else {
        "hcot_contrast".to_string()
    };
    acc_rows.push((hcot_label, accuracy(&hcot_runs, &gold, task)?));

    let agent = if task == TaskKind::KbLookup {
        let gold_actions: HashMap<usize, Vec<String>> = test
            .iter()
            .enumerate()
            .map(|(i, s)| (i, extract_actions(&s.contents().join(" "))))
            .collect();
        Some(agent_accuracy(&base_runs, &gold_actions, task)?)
    } else {
        None
    };

    let mut model_hashes = BTreeMap::new();
    for (label, mani) in [("hcot", &hmani), ("baseline", &bmani)] {
        if let Some(h) = mani.extra.get("model_hash") {
            model_hashes.insert(label.to_string(), h.clone());
        }
        if let Some(h) = mani.extra.get("aux_model_hash") {
            model_hashes.insert(format!("{label}_aux"), h.clone());
        }
    }
    let report = BenchReport {
        tasks: vec![TaskBench {
            task: task.as_str().into(),
            compression: Some(comp),
            accuracy: acc_rows,
            agent_accuracy: agent,
        }],
        fingerprints: Fingerprints {
            dataset_seed: cfg.seed,
            lambda: cfg.train.aux.lambda,
            model_hashes,
        },
    };

    let dir = Paths::bench_dir(cfg);
    prepare_dir(&dir, true)?;
    let json = emit_report(&report, ReportFormat::Json)?;
    let table = emit_report(&report, ReportFormat::Table)?;
    std::fs::write(dir.join("report.json"), &json)?;
    std::fs::write(dir.join("report.txt"), &table)?;
    let mut file_hashes = BTreeMap::new();
    for name in ["report.json", "report.txt"] {
        file_hashes.insert(name.to_string(), sha256_file(&dir.join(name))?);
    }
    write_manifest(
        &dir,
        &Manifest {
            kind: "bench".into(),
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            counts: BTreeMap::new(),
            file_hashes,
            extra: BTreeMap::new(),
        },
    )?;

    Ok(match format {
        ReportFormat::Json => json,
        ReportFormat::Table => table,
    })
}

/// Parse a bench report back (used by tests and the check command).
pub fn load_bench_report(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let text = std::fs::read_to_string(Paths::bench_dir(cfg).join("report.json"))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// check: fast invariant suite
// ---------------------------------------------------------------------------

pub fn run_check() -> Result<Vec<String>> {
    use crate::model::{EmbeddingOverride, ModelConfig};
    use crate::numerics::{grad_check, Graph, ParamStore, Tensor};
    use crate::rng::Rng;

    let mut passed = Vec::new();
    let mut ok = |name: &str, cond: bool| -> Result<()> {
        if cond {
            passed.push(name.to_string());
            Ok(())
        } else {
            Err(Error::invalid(format!("check failed: {name}")))
        }
    };

    // numerics: matmul against a triple loop
    {
        let mut rng = Rng::new(1);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let na = g.input(Tensor::from_vec(&[3, 4], a.clone())?);
        let nb = g.input(Tensor::from_vec(&[4, 2], b.clone())?);
        let out = g.matmul(&store, na, nb)?;
        let mut max_diff = 0.0f64;
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                max_diff = max_diff.max((g.value(out).data()[i * 2 + j] - s).abs());
            }
        }
        ok("matmul vs triple-loop oracle", max_diff < 1e-12)?;
    }

    // numerics: uniform cross entropy and unit normalization
    {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[1, 8]));
        let ce = g.softmax_cross_entropy(&store, logits, &[0], &[1.0])?;
        ok(
            "uniform-logits cross entropy",
            (g.value(ce).item() - (8.0f64).ln()).abs() < 1e-12,
        )?;
        let v = g.input(Tensor::from_vec(&[2], vec![3.0, 4.0])?);
        let n = g.l2_normalize(&store, v)?;
        ok(
            "l2 normalization",
            (g.value(n).data()[0] - 0.6).abs() < 1e-12 && (g.value(n).l2_norm() - 1.0).abs() < 1e-12,
        )?;
    }

    // numerics: gradient check of a linear + cross-entropy layer
    {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let w = store.insert(
            "w",
            Tensor::from_vec(&[6, 10], (0..60).map(|_| 0.3 * rng.normal()).collect())?,
        );
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            &[4, 6],
            (0..24).map(|_| rng.normal()).collect(),
        )?);
        let wn = g.param(w);
        let logits = g.matmul(&store, x, wn)?;
        let loss = g.softmax_cross_entropy(&store, logits, &[1, 7, 0, 9], &[1.0; 4])?;
        let report = grad_check(&mut store, &mut g, loss, 1e-4)?;
        ok(
            "finite-difference gradient check",
            report.max_relative_error < 1e-6,
        )?;
    }

    // model: identity override, causality, determinism
    {
        let mcfg = ModelConfig {
            vocab_size: Vocab::builtin().size(),
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 32,
            cot_token_id: Vocab::builtin().cot(),
            dropout_rate: 0.0,
        };
        let m = init_model(&mcfg, 5)?;
        ok(
            "parameter count formula",
            m.params().total_values() == mcfg.param_count(),
        )?;
        let tokens = [6u32, 3, 9, 10];
        let plain = m.forward(&tokens, &[])?;
        let (emb_id, _) = m
            .params()
            .iter()
            .find(|(_, p)| p.name == "embed.token")
            .expect("embedding table");
        let emb_row = m.params().get(emb_id).row(3).to_vec();
        let ov = EmbeddingOverride {
            position: 1,
            vector: Tensor::from_vec(&[mcfg.hidden_dim], emb_row)?,
        };
        let with = m.forward(&tokens, &[ov])?;
        let max_diff = plain
            .logits
            .data()
            .iter()
            .zip(with.logits.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        ok("identity-override invariance", max_diff <= 1e-12)?;
        let changed = m.forward(&[6, 3, 9, 11], &[])?;
        ok(
            "causal masking",
            plain.logits.row(2) == changed.logits.row(2)
                && plain.logits.row(3) != changed.logits.row(3),
        )?;
    }

    // taskgen: oracles over fresh samples
    {
        use crate::taskgen::{evaluate_question, gen_chain_arithmetic, gen_kb_lookup, resolve_question};
        let mut all_ok = true;
        for seed in 0..100u64 {
            let s = gen_chain_arithmetic(seed, 1 + (seed as usize % 3), 9);
            all_ok &= evaluate_question(&s.question).map(|v| v.to_string()).as_deref()
                == Some(s.gold_answer.as_str());
            all_ok &= s.validate().is_ok();
            let k = gen_kb_lookup(seed, 1 + (seed as usize % 3), 6);
            all_ok &= resolve_question(&k.question).as_deref() == Some(k.gold_answer.as_str());
            all_ok &= !k.question.contains(&k.gold_answer);
            all_ok &= k.validate().is_ok();
        }
        ok("task generator oracles", all_ok)?;
    }

    // training: lambda-zero reduction and loss identity
    {
        use crate::dataprep::make_aux_instances;
        use crate::taskgen::gen_chain_arithmetic;
        use crate::training::aux_batch_grads;
        let mcfg = ModelConfig {
            vocab_size: Vocab::builtin().size(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 160,
            cot_token_id: Vocab::builtin().cot(),
            dropout_rate: 0.0,
        };
        let m = init_model(&mcfg, 6)?;
        let vocab = Vocab::builtin();
        let s0 = gen_chain_arithmetic(1, 1, 9);
        let s1 = gen_chain_arithmetic(2, 1, 9);
        let i0 = make_aux_instances(&s0, vocab, 0)?;
        let i1 = make_aux_instances(&s1, vocab, 1)?;
        let batch = [&i0[0], &i1[0]];
        let (b0, _) = aux_batch_grads(&m, &batch, 0.0, None)?;
        ok("lambda-zero reduction", b0.total == b0.ce)?;
        let (b1, _) = aux_batch_grads(&m, &batch, 0.25, None)?;
        ok(
            "loss breakdown identity",
            (b1.total - (b1.ce + 0.25 * b1.contrastive)).abs() < 1e-12,
        )?;
    }

    Ok(passed)
}
