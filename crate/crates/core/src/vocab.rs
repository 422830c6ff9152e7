//! Closed word-level vocabulary shared by both synthetic tasks.
//!
//! Tokens are whitespace-delimited words; text round-trips exactly through
//! encode/decode as tokens joined by single spaces. The vocabulary is fixed
//! at build time (numbers, template words, per-key action words, specials)
//! so every checkpoint and dataset agrees on ids.

use std::collections::HashMap;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest integer literal in the vocabulary; chained arithmetic keeps its
/// running value within [0, MAX_NUMBER].
pub const MAX_NUMBER: i64 = 15;

/// Lookup-table key names.
pub const KEYS: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];

/// Value namespace for the lookup task. Values are deliberately disjoint
/// from everything that can appear in a question.
pub const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "orange", "purple", "black", "white", "pink", "brown",
    "cyan", "silver",
];

/// Fixed key -> color assignment (a global mapping the models learn during
/// training; it is never spelled out in any question).
const COLOR_PERM: [usize; 12] = [7, 2, 9, 0, 5, 11, 4, 8, 1, 10, 3, 6];

pub fn key_color(key_index: usize) -> &'static str {
    COLORS[COLOR_PERM[key_index]]
}

#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn template_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let push = |words: &mut Vec<String>, w: &str| {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    };
    for n in 0..=MAX_NUMBER {
        push(&mut words, &n.to_string());
    }
    // arithmetic question/analysis/thought/content words
    for w in [
        "Start",
        "with",
        ".",
        "Add",
        "Subtract",
        "Multiply",
        "by",
        "Analysis",
        ":",
        "track",
        "the",
        "running",
        "value",
        "step",
        "The",
        "is",
        "and",
        "instruction",
        "so",
        "we",
        "compute",
        "get",
        "as",
        "next",
        "add",
        "subtract",
        "multiply",
        "+",
        "-",
        "*",
        "=",
        "Answer:",
    ] {
        push(&mut words, w);
    }
    // lookup-task question/thought words
    for w in [
        "KB",
        "->",
        ";",
        "at",
        "follow",
        "hops",
        "What",
        "color",
        "final",
        "key",
        "?",
        "We",
        "begin",
        "remain",
        "right",
        "move",
        "now",
        "to",
        "look",
        "up",
        "in",
        "table",
        "lookup",
        "returned",
        "maps",
        "zero",
        "of",
        "finish",
        "Action",
        "Observation",
    ] {
        push(&mut words, w);
    }
    for i in 1..=6 {
        push(&mut words, &format!("{i}:"));
    }
    for k in KEYS {
        push(&mut words, k);
    }
    for c in COLORS {
        push(&mut words, c);
    }
    for k in KEYS {
        push(&mut words, &format!("lookup[{k}]"));
    }
    for c in COLORS {
        push(&mut words, &format!("finish[{c}]"));
    }
    words
}

impl Vocab {
    fn build() -> Self {
        let mut tokens: Vec<String> = vec![
            "<bos>".into(),
            "<eos>".into(),
            "<pad>".into(),
            "[CoT]".into(),
            "<eot>".into(),
        ];
        tokens.extend(template_words());
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// The one shared vocabulary instance.
    pub fn builtin() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn eos(&self) -> u32 {
        1
    }

    pub fn pad(&self) -> u32 {
        2
    }

    /// Reserved handoff token.
    pub fn cot(&self) -> u32 {
        3
    }

    /// End-of-thought marker terminating compressor targets.
    pub fn eot(&self) -> u32 {
        4
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Whitespace tokenization against the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::UnknownToken {
                        token: w.to_string(),
                        text: text.to_string(),
                    })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// SHA-256 over the ordered token list; embedded in checkpoints so that
    /// mismatched vocabularies are rejected at load time.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().into()
    }
}
