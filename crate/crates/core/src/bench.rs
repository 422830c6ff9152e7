//! Accuracy and compression/speedup metrics over paired inference runs.
//!
//! Sequence-level compression (S-CR) is the ratio of mean completion tokens
//! between the two-model path and the explicit-reasoning baseline; S-S is
//! its reciprocal. The wall-clock pair (W-CR/W-S) uses measured decode time
//! plus compressor encode time, which is why sequence-level speedup
//! normally exceeds the wall-clock one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceTrace;
use crate::taskgen::TaskKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunEntry {
    pub question_id: usize,
    pub trace: InferenceTrace,
    pub correct: bool,
}

/// All traces of one inference mode over one evaluation split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSet {
    pub mode: String,
    pub entries: Vec<RunEntry>,
}

impl RunSet {
    pub fn new(mode: impl Into<String>, entries: Vec<RunEntry>) -> Result<Self> {
        let mode = mode.into();
        let mut ids = HashSet::new();
        for e in &entries {
            if !ids.insert(e.question_id) {
                return Err(Error::invalid(format!(
                    "duplicate trace for question {}",
                    e.question_id
                )));
            }
            if e.trace.mode != mode {
                return Err(Error::invalid(format!(
                    "trace mode {} in a {} run set",
                    e.trace.mode, mode
                )));
            }
        }
        Ok(RunSet { mode, entries })
    }
}

/// Canonicalized answer comparison: integer equality for arithmetic,
/// trimmed case-insensitive match for lookups. Absent answers are wrong.
pub fn answers_match(task: TaskKind, extracted: Option<&str>, gold: &str) -> bool {
    let Some(a) = extracted else { return false };
    match task {
        TaskKind::ChainArithmetic => match (a.trim().parse::<i64>(), gold.trim().parse::<i64>()) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        },
        TaskKind::KbLookup => a.trim().eq_ignore_ascii_case(gold.trim()),
    }
}

/// Fraction of questions answered correctly.
pub fn accuracy(runs: &RunSet, gold: &HashMap<usize, String>, task: TaskKind) -> Result<f64> {
    if runs.entries.is_empty() {
        return Err(Error::invalid("empty run set"));
    }
    let mut correct = 0usize;
    for e in &runs.entries {
        let g = gold.get(&e.question_id).ok_or_else(|| {
            Error::invalid(format!("missing gold answer for question {}", e.question_id))
        })?;
        if answers_match(task, e.trace.answer.as_deref(), g) {
            correct += 1;
        }
    }
    Ok(correct as f64 / runs.entries.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompressionReport {
    /// mean completion tokens, two-model path / baseline
    pub s_cr: f64,
    /// reciprocal of s_cr
    pub s_s: f64,
    /// mean wall ms, two-model path / baseline
    pub w_cr: f64,
    /// reciprocal of w_cr
    pub w_s: f64,
    pub mean_completion_tokens_hcot: f64,
    pub mean_completion_tokens_baseline: f64,
    pub mean_wall_ms_hcot: f64,
    pub mean_wall_ms_baseline: f64,
    pub mean_aux_encode_ms: f64,
    pub n_samples: usize,
    /// whether recovery time is folded into the wall-clock figures
    pub recovery_included: bool,
    /// sequence-level speedup at least the wall-clock one on this run
    pub ss_ge_ws: bool,
    /// timing is machine-relative; this records where it came from
    pub hardware_note: String,
}

fn hardware_note() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!(
        "single-threaded CPU decode timing on a {cores}-core host; wall-clock figures are machine-relative"
    )
}

/// Paired compression metrics. Both run sets must cover the same question
/// ids and the baseline must be explicit-reasoning decoding.
pub fn compression_report(
    hcot: &RunSet,
    baseline: &RunSet,
    include_recovery: bool,
) -> Result<CompressionReport> {
    if baseline.mode != "fullcot" {
        return Err(Error::invalid(format!(
            "baseline run set has mode {}, expected fullcot",
            baseline.mode
        )));
    }
    let ids_h: HashSet<usize> = hcot.entries.iter().map(|e| e.question_id).collect();
    let ids_b: HashSet<usize> = baseline.entries.iter().map(|e| e.question_id).collect();
    if ids_h != ids_b {
        return Err(Error::invalid(format!(
            "run sets cover different question ids ({} vs {})",
            ids_h.len(),
            ids_b.len()
        )));
    }
    if hcot.entries.is_empty() {
        return Err(Error::invalid("empty run sets"));
    }
    let n = hcot.entries.len() as f64;
    let mean_tok_h = hcot
        .entries
        .iter()
        .map(|e| e.trace.stats.completion_tokens as f64)
        .sum::<f64>()
        / n;
    let mean_tok_b = baseline
        .entries
        .iter()
        .map(|e| e.trace.stats.completion_tokens as f64)
        .sum::<f64>()
        / n;
    let wall_h = |e: &RunEntry| {
        let s = &e.trace.stats;
        s.decode_ms + s.aux_encode_ms + if include_recovery { s.recovery_ms } else { 0.0 }
    };
    let mean_wall_h = hcot.entries.iter().map(wall_h).sum::<f64>() / n;
    let mean_wall_b = baseline
        .entries
        .iter()
        .map(|e| e.trace.stats.decode_ms)
        .sum::<f64>()
        / n;
    let mean_aux = hcot
        .entries
        .iter()
        .map(|e| e.trace.stats.aux_encode_ms)
        .sum::<f64>()
        / n;
    if mean_tok_b <= 0.0 || mean_wall_b <= 0.0 || mean_tok_h <= 0.0 || mean_wall_h <= 0.0 {
        return Err(Error::invalid("degenerate run set (zero tokens or time)"));
    }
    let s_cr = mean_tok_h / mean_tok_b;
    let w_cr = mean_wall_h / mean_wall_b;
    let s_s = 1.0 / s_cr;
    let w_s = 1.0 / w_cr;
    Ok(CompressionReport {
        s_cr,
        s_s,
        w_cr,
        w_s,
        mean_completion_tokens_hcot: mean_tok_h,
        mean_completion_tokens_baseline: mean_tok_b,
        mean_wall_ms_hcot: mean_wall_h,
        mean_wall_ms_baseline: mean_wall_b,
        mean_aux_encode_ms: mean_aux,
        n_samples: hcot.entries.len(),
        recovery_included: include_recovery,
        ss_ge_ws: s_s >= w_s,
        hardware_note: hardware_note(),
    })
}

fn action_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Action \d+: (lookup\[[^\]\s]*\]|finish\[[^\]\s]*\])").unwrap())
}

/// Ordered action strings in an agent transcript.
pub fn extract_actions(text: &str) -> Vec<String> {
    action_regex()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Fraction of correctly invoked actions: per trace, emitted actions are
/// matched position-by-position against the gold path; the pooled ratio is
/// total matches over total gold actions.
pub fn agent_accuracy(
    runs: &RunSet,
    gold_actions: &HashMap<usize, Vec<String>>,
    task: TaskKind,
) -> Result<f64> {
    if task != TaskKind::KbLookup {
        return Err(Error::invalid(
            "agent accuracy is only defined for the lookup task",
        ));
    }
    if runs.entries.is_empty() {
        return Err(Error::invalid("empty run set"));
    }
    let mut matched = 0usize;
    let mut total = 0usize;
    for e in &runs.entries {
        let gold = gold_actions.get(&e.question_id).ok_or_else(|| {
            Error::invalid(format!("missing gold actions for question {}", e.question_id))
        })?;
        let emitted = extract_actions(&e.trace.output_text);
        matched += emitted
            .iter()
            .zip(gold)
            .filter(|(a, b)| a.as_str() == b.as_str())
            .count();
        total += gold.len();
    }
    if total == 0 {
        return Err(Error::invalid("gold action paths are empty"));
    }
    Ok(matched as f64 / total as f64)
}

/// Everything the report renderer needs for one task column.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskBench {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression: Option<CompressionReport>,
    /// (mode row, accuracy) pairs in display order
    pub accuracy: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_accuracy: Option<f64>,
}

/// Config provenance embedded in every report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Fingerprints {
    pub dataset_seed: u64,
    pub lambda: f64,
    pub model_hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub tasks: Vec<TaskBench>,
    pub fingerprints: Fingerprints,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config(format!("unknown format {other:?}"))),
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn speedup(v: f64) -> String {
    format!("{v:.2}x")
}

/// Render the metric table and accuracy grid.
pub fn emit_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Table => {
            let mut out = String::new();
            let tasks: Vec<&str> = report.tasks.iter().map(|t| t.task.as_str()).collect();
            let width = 16usize;
            out.push_str(&format!("{:<12}", "metric"));
            for t in &tasks {
                out.push_str(&format!("{t:>width$}"));
            }
            out.push('\n');
            let rows: [(&str, fn(&CompressionReport) -> String); 4] = [
                ("S-CR", |c| pct(c.s_cr)),
                ("S-S", |c| speedup(c.s_s)),
                ("W-CR", |c| pct(c.w_cr)),
                ("W-S", |c| speedup(c.w_s)),
            ];
            for (name, f) in rows {
                out.push_str(&format!("{name:<12}"));
                for tb in &report.tasks {
                    let cell = tb.compression.as_ref().map(f).unwrap_or_else(|| "-".into());
                    out.push_str(&format!("{cell:>width$}"));
                }
                out.push('\n');
            }
            out.push('\n');
            // accuracy grid: union of mode rows in first-seen order
            let mut modes: Vec<String> = Vec::new();
            for tb in &report.tasks {
                for (m, _) in &tb.accuracy {
                    if !modes.contains(m) {
                        modes.push(m.clone());
                    }
                }
            }
            out.push_str(&format!("{:<12}", "accuracy"));
            for t in &tasks {
                out.push_str(&format!("{t:>width$}"));
            }
            out.push('\n');
            for m in &modes {
                out.push_str(&format!("{m:<12}"));
                for tb in &report.tasks {
                    let cell = tb
                        .accuracy
                        .iter()
                        .find(|(name, _)| name == m)
                        .map(|(_, v)| pct(*v))
                        .unwrap_or_else(|| "-".into());
                    out.push_str(&format!("{cell:>width$}"));
                }
                out.push('\n');
            }
            if report.tasks.iter().any(|t| t.agent_accuracy.is_some()) {
                out.push_str(&format!("{:<12}", "agent-acc"));
                for tb in &report.tasks {
                    let cell = tb
                        .agent_accuracy
                        .map(pct)
                        .unwrap_or_else(|| "-".into());
                    out.push_str(&format!("{cell:>width$}"));
                }
                out.push('\n');
            }
            out.push('\n');
            for (name, hash) in &report.fingerprints.model_hashes {
                out.push_str(&format!("model {name}: {hash}\n"));
            }
            out.push_str(&format!(
                "dataset seed: {}  lambda: {}\n",
                report.fingerprints.dataset_seed, report.fingerprints.lambda
            ));
            if let Some(c) = report.tasks.iter().find_map(|t| t.compression.as_ref()) {
                out.push_str(&format!("note: {}\n", c.hardware_note));
            }
            Ok(out)
        }
    }
}
