//! Deterministic generators for synthetic reasoning tasks.
//!
//! Every sample is a question plus a strictly alternating list of content
//! and thought segments (content first and last). Thoughts are deliberately
//! verbose relative to the content they precede, so replacing them with a
//! single token yields a measurable sequence compression.

mod arithmetic;
mod kb;

pub use arithmetic::{evaluate_question, gen_chain_arithmetic, ArithmeticOp};
pub use kb::{gen_kb_lookup, resolve_question};

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ChainArithmetic,
    KbLookup,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::ChainArithmetic => "chain_arithmetic",
            TaskKind::KbLookup => "kb_lookup",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain_arithmetic" => Ok(TaskKind::ChainArithmetic),
            "kb_lookup" => Ok(TaskKind::KbLookup),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Content,
    Thought,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

impl Segment {
    pub fn content(text: impl Into<String>) -> Self {
        Segment {
            kind: SegmentKind::Content,
            text: text.into(),
        }
    }

    pub fn thought(text: impl Into<String>) -> Self {
        Segment {
            kind: SegmentKind::Thought,
            text: text.into(),
        }
    }
}

/// One training sample: question, alternating segments, gold answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HCoTSample {
    pub task: TaskKind,
    pub question: String,
    pub segments: Vec<Segment>,
    pub gold_answer: String,
    pub seed: u64,
}

impl HCoTSample {
    pub fn thoughts(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Thought)
            .map(|s| s.text.as_str())
            .collect()
    }

    pub fn contents(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Content)
            .map(|s| s.text.as_str())
            .collect()
    }

    pub fn num_thoughts(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Thought)
            .count()
    }

    /// Strict alternation c0, z0, c1, ..., z_{n-1}, c_n with n >= 1,
    /// nonempty thoughts, and a regex-extractable answer in the final
    /// content segment.
    pub fn validate(&self) -> Result<()> {
        if self.segments.len() < 3 || self.segments.len() % 2 == 0 {
            return Err(Error::invalid(format!(
                "expected odd segment count >= 3, got {}",
                self.segments.len()
            )));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let expect = if i % 2 == 0 {
                SegmentKind::Content
            } else {
                SegmentKind::Thought
            };
            if seg.kind != expect {
                return Err(Error::invalid(format!(
                    "segment {i} breaks content/thought alternation"
                )));
            }
            if seg.kind == SegmentKind::Thought && seg.text.trim().is_empty() {
                return Err(Error::invalid(format!("thought segment {i} is empty")));
            }
        }
        let last = &self.segments.last().unwrap().text;
        match extract_answer_text(self.task, last) {
            Some(ans) if ans == self.gold_answer => Ok(()),
            Some(ans) => Err(Error::invalid(format!(
                "final content answer {ans:?} does not match gold {:?}",
                self.gold_answer
            ))),
            None => Err(Error::invalid(
                "final content segment has no extractable answer",
            )),
        }
    }
}

pub fn answer_regex(task: TaskKind) -> &'static Regex {
    static ARITH: OnceLock<Regex> = OnceLock::new();
    static KB: OnceLock<Regex> = OnceLock::new();
    match task {
        TaskKind::ChainArithmetic => {
            ARITH.get_or_init(|| Regex::new(r"Answer:\s*(-?\d+)").unwrap())
        }
        TaskKind::KbLookup => KB.get_or_init(|| Regex::new(r"finish\[([^\]]*)\]").unwrap()),
    }
}

/// Last regex match wins.
pub fn extract_answer_text(task: TaskKind, text: &str) -> Option<String> {
    answer_regex(task)
        .captures_iter(text)
        .last()
        .map(|c| c[1].to_string())
}

/// Generator parameters for a task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Inclusive range of reasoning steps (arithmetic ops, or lookup hops).
    pub min_steps: usize,
    pub max_steps: usize,
    /// Largest operand in arithmetic questions.
    #[serde(default = "default_operand_max")]
    pub operand_max: i64,
    /// Number of table entries in lookup questions.
    #[serde(default = "default_kb_size")]
    pub kb_size: usize,
}

fn default_operand_max() -> i64 {
    9
}

fn default_kb_size() -> usize {
    6
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return Err(Error::config(format!(
                "invalid step range {}..={}",
                self.min_steps, self.max_steps
            )));
        }
        match self.kind {
            TaskKind::ChainArithmetic => {
                if self.max_steps > 4 {
                    return Err(Error::config("chain_arithmetic supports at most 4 steps"));
                }
                if !(2..=9).contains(&self.operand_max) {
                    return Err(Error::config(format!(
                        "operand_max {} outside 2..=9",
                        self.operand_max
                    )));
                }
            }
            TaskKind::KbLookup => {
                if self.max_steps > 4 {
                    return Err(Error::config("kb_lookup supports at most 4 hops"));
                }
                if self.kb_size < self.max_steps + 2 || self.kb_size > crate::vocab::KEYS.len() {
                    return Err(Error::config(format!(
                        "kb_size {} outside {}..={}",
                        self.kb_size,
                        self.max_steps + 2,
                        crate::vocab::KEYS.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn generate_one(&self, seed: u64, steps: usize) -> HCoTSample {
        match self.kind {
            TaskKind::ChainArithmetic => gen_chain_arithmetic(seed, steps, self.operand_max),
            TaskKind::KbLookup => gen_kb_lookup(seed, steps, self.kb_size),
        }
    }
}

/// Deterministic dataset generation with unique questions.
pub fn generate_dataset(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<HCoTSample>> {
    spec.validate()?;
    let mut master = Rng::derive(seed, "taskgen");
    let mut seen: HashSet<String> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 200 {
            return Err(Error::invalid(format!(
                "could not generate {count} unique questions (task space too small)"
            )));
        }
        let steps = master.range(spec.min_steps, spec.max_steps);
        let sample_seed = master.next_u64();
        let sample = spec.generate_one(sample_seed, steps);
        if seen.insert(sample.question.clone()) {
            debug_assert!(sample.validate().is_ok());
            out.push(sample);
        }
    }
    Ok(out)
}

/// Deterministic shuffle followed by an exact-fraction split. Fractions
/// must sum to 1; no question may appear in more than one split.
pub fn split_dataset(
    samples: Vec<HCoTSample>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<HCoTSample>, Vec<HCoTSample>, Vec<HCoTSample>)> {
    let (ft, fd, fe) = fractions;
    if (ft + fd + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fd < 0.0 || fe < 0.0 {
        return Err(Error::config(format!(
            "split fractions {fractions:?} do not sum to 1"
        )));
    }
    let mut unique = HashSet::new();
    for s in &samples {
        if !unique.insert(s.question.as_str()) {
            return Err(Error::invalid(format!(
                "duplicate question across splits: {:?}",
                s.question
            )));
        }
    }
    let n = samples.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_dev = (fd * n as f64).round() as usize;
    if n_train + n_dev > n {
        return Err(Error::config("split fractions leave no test samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive(seed, "split");
    rng.shuffle(&mut order);
    let mut shuffled: Vec<HCoTSample> = Vec::with_capacity(n);
    let mut samples = samples;
    // drain in shuffled order without cloning
    let mut slots: Vec<Option<HCoTSample>> = samples.drain(..).map(Some).collect();
    for i in order {
        shuffled.push(slots[i].take().unwrap());
    }
    let test = shuffled.split_off(n_train + n_dev);
    let dev = shuffled.split_off(n_train);
    Ok((shuffled, dev, test))
}
