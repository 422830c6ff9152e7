//! Two-model decode orchestration.
//!
//! The content model decodes until it emits the handoff token; the frozen
//! compressor then encodes the emitted prefix (one matrix-form pass, no
//! decoding), its hidden state at the terminal marker is injected as the
//! marker's input embedding, and content decoding resumes. Thought text is
//! never decoded on this path; it can be recovered afterwards by letting
//! the compressor decode from any recorded handoff prefix.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{decode, sample_token, DecodeState, Transformer};
use crate::numerics::Graph;
use crate::rng::Rng;
use crate::taskgen::{extract_answer_text, TaskKind};
use crate::vocab::Vocab;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default = "d_temp")]
    pub temperature: f64,
    #[serde(default = "d_top_p")]
    pub top_p: f64,
    #[serde(default = "d_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "d_max_handoffs")]
    pub max_handoffs: usize,
    #[serde(default)]
    pub recover_thoughts: bool,
    /// Sampling stream seed (unused at greedy temperatures).
    #[serde(default)]
    pub sample_seed: u64,
    /// Store full representation vectors in handoff records (hashes are
    /// always stored).
    #[serde(default)]
    pub store_vectors: bool,
}

fn d_temp() -> f64 {
    0.01
}
fn d_top_p() -> f64 {
    1.0
}
fn d_max_new() -> usize {
    160
}
fn d_max_handoffs() -> usize {
    8
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            temperature: d_temp(),
            top_p: d_top_p(),
            max_new_tokens: d_max_new(),
            max_handoffs: d_max_handoffs(),
            recover_thoughts: false,
            sample_seed: 0,
            store_vectors: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_handoffs == 0 {
            return Err(Error::config("max_handoffs must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.top_p) || self.top_p == 0.0 {
            return Err(Error::config("top_p must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HandoffRecord {
    /// The emitted prefix (with leading bos) that the compressor encoded;
    /// ends at the terminal marker.
    pub aux_input: Vec<u32>,
    /// Index of the terminal marker within `aux_input`.
    pub cot_position: usize,
    /// SHA-256 of the injected representation's little-endian bytes.
    pub r_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_vector: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovered_thought: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunStats {
    /// Tokens decoded by the responding model(s); compressor encoding does
    /// not count (it is prefill, not decoding).
    pub completion_tokens: usize,
    /// Prefix tokens encoded by the compressor across all handoffs.
    pub aux_encode_tokens: usize,
    pub handoff_count: usize,
    pub decode_ms: f64,
    pub aux_encode_ms: f64,
    pub recovery_ms: f64,
    pub total_ms: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub question: String,
    pub mode: String,
    pub emitted_tokens: Vec<u32>,
    pub output_text: String,
    /// Token-index ranges of content runs between markers/terminals.
    pub content_spans: Vec<(usize, usize)>,
    pub handoffs: Vec<HandoffRecord>,
    pub answer: Option<String>,
    pub stats: RunStats,
}

fn hash_f64s(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn content_spans(emitted: &[u32], vocab: &Vocab) -> Vec<(usize, usize)> {
    let specials = [
        vocab.cot(),
        vocab.eos(),
        vocab.eot(),
        vocab.bos(),
        vocab.pad(),
    ];
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &t) in emitted.iter().enumerate() {
        if specials.contains(&t) {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, emitted.len()));
    }
    spans
}

fn check_compatible(hcot: &Transformer, aux: &Transformer) -> Result<()> {
    if !aux.frozen() {
        return Err(Error::invalid(
            "compressor model must be frozen for inference",
        ));
    }
    let (a, b) = (hcot.config(), aux.config());
    if a.hidden_dim != b.hidden_dim
        || a.vocab_size != b.vocab_size
        || a.cot_token_id != b.cot_token_id
    {
        return Err(Error::invalid(format!(
            "incompatible model pair: hidden {} vs {}, vocab {} vs {}",
            a.hidden_dim, b.hidden_dim, a.vocab_size, b.vocab_size
        )));
    }
    Ok(())
}

/// Encode a prefix with the compressor and return the hidden state at its
/// final position (which must hold the marker token).
fn encode_representation(aux: &Transformer, prefix: &[u32]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let fwd = aux.forward_graph(&mut g, prefix, &[], false, None)?;
    let fh = g.value(fwd.final_hidden);
    Ok(fh.row(prefix.len() - 1).to_vec())
}

/// Two-model inference: decode content, hand off at every marker.
pub fn infer_hcot(
    question: &str,
    hcot_model: &Transformer,
    aux_model: &Transformer,
    vocab: &Vocab,
    task: TaskKind,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace> {
    cfg.validate()?;
    check_compatible(hcot_model, aux_model)?;
    let mut rng = Rng::derive(cfg.sample_seed, "sample");
    let mut prefix = vec![vocab.bos()];
    prefix.extend(vocab.encode(question)?);

    let total_start = Instant::now();
    let mut decode_ms = 0.0f64;
    let mut aux_ms = 0.0f64;
    let mut seq = prefix.clone();
    let mut emitted: Vec<u32> = Vec::new();
    let mut handoffs: Vec<HandoffRecord> = Vec::new();
    let mut truncated = false;
    let mut aux_encode_tokens = 0usize;

    let t0 = Instant::now();
    let mut state = DecodeState::prefill(hcot_model, &prefix, &[])?;
    decode_ms += t0.elapsed().as_secs_f64() * 1e3;

    loop {
        if emitted.len() >= cfg.max_new_tokens {
            truncated = true;
            break;
        }
        if state.len() >= hcot_model.config().max_seq_len {
            truncated = true;
            break;
        }
        let t0 = Instant::now();
        let tok = sample_token(state.last_logits(), cfg.temperature, cfg.top_p, &mut rng);
        decode_ms += t0.elapsed().as_secs_f64() * 1e3;
        emitted.push(tok);
        seq.push(tok);
        if tok == vocab.eos() {
            break;
        }
        if tok == vocab.cot() {
            if handoffs.len() >= cfg.max_handoffs {
                truncated = true;
                break;
            }
            let t1 = Instant::now();
            let r = encode_representation(aux_model, &seq)?;
            aux_ms += t1.elapsed().as_secs_f64() * 1e3;
            aux_encode_tokens += seq.len();
            handoffs.push(HandoffRecord {
                aux_input: seq.clone(),
                cot_position: seq.len() - 1,
                r_hash: hash_f64s(&r),
                r_vector: cfg.store_vectors.then(|| r.clone()),
                recovered_thought: None,
            });
            let t2 = Instant::now();
            state.feed(tok, Some(&r))?;
            decode_ms += t2.elapsed().as_secs_f64() * 1e3;
        } else {
            let t2 = Instant::now();
            state.feed(tok, None)?;
            decode_ms += t2.elapsed().as_secs_f64() * 1e3;
        }
    }

    let output_text = vocab.decode(&emitted);
    let answer = extract_answer_text(task, &output_text);
    let mut trace = InferenceTrace {
        question: question.to_string(),
        mode: "hcot".into(),
        content_spans: content_spans(&emitted, vocab),
        handoffs,
        answer,
        stats: RunStats {
            completion_tokens: emitted.len(),
            aux_encode_tokens,
            handoff_count: 0,
            decode_ms,
            aux_encode_ms: aux_ms,
            recovery_ms: 0.0,
            total_ms: 0.0,
            truncated,
        },
        emitted_tokens: emitted,
        output_text,
    };
    trace.stats.handoff_count = trace.handoffs.len();

    if cfg.recover_thoughts && !trace.handoffs.is_empty() {
        let t3 = Instant::now();
        let thoughts = recover_thoughts(&trace, aux_model, vocab, cfg)?;
        trace.stats.recovery_ms = t3.elapsed().as_secs_f64() * 1e3;
        for (h, text) in trace.handoffs.iter_mut().zip(thoughts) {
            h.recovered_thought = Some(text);
        }
    }
    trace.stats.total_ms = total_start.elapsed().as_secs_f64() * 1e3;
    Ok(trace)
}

/// Decode the full thought for every recorded handoff by letting the
/// compressor continue from the recorded prefix until the end-of-thought
/// marker. Never mutates the trace's answer.
pub fn recover_thoughts(
    trace: &InferenceTrace,
    aux_model: &Transformer,
    vocab: &Vocab,
    cfg: &InferenceConfig,
) -> Result<Vec<String>> {
    if trace.handoffs.is_empty() {
        return Err(Error::invalid("trace has no handoff records to recover"));
    }
    let stop: HashSet<u32> = [vocab.eot(), vocab.eos()].into_iter().collect();
    let mut out = Vec::with_capacity(trace.handoffs.len());
    for h in &trace.handoffs {
        if h.aux_input.is_empty() {
            return Err(Error::invalid("handoff record is missing its prefix"));
        }
        let mut rng = Rng::derive(cfg.sample_seed, "recovery");
        let toks = decode(
            aux_model,
            &h.aux_input,
            &[],
            &stop,
            cfg.max_new_tokens,
            0.0, // recovery is always greedy
            1.0,
            &mut rng,
        )?;
        let body: Vec<u32> = toks
            .into_iter()
            .filter(|&t| t != vocab.eot() && t != vocab.eos())
            .collect();
        out.push(vocab.decode(&body));
    }
    Ok(out)
}

/// Single-model decode to end-of-sequence (the explicit-reasoning and
/// content-only baselines share this path).
fn infer_single(
    question: &str,
    model: &Transformer,
    vocab: &Vocab,
    task: TaskKind,
    cfg: &InferenceConfig,
    mode: &str,
) -> Result<InferenceTrace> {
    cfg.validate()?;
    let mut rng = Rng::derive(cfg.sample_seed, "sample");
    let mut prefix = vec![vocab.bos()];
    prefix.extend(vocab.encode(question)?);
    let stop: HashSet<u32> = [vocab.eos()].into_iter().collect();
    let t0 = Instant::now();
    let emitted = decode(
        model,
        &prefix,
        &[],
        &stop,
        cfg.max_new_tokens,
        cfg.temperature,
        cfg.top_p,
        &mut rng,
    )?;
    let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
    let truncated = emitted.last() != Some(&vocab.eos());
    let output_text = vocab.decode(&emitted);
    let answer = extract_answer_text(task, &output_text);
    Ok(InferenceTrace {
        question: question.to_string(),
        mode: mode.into(),
        content_spans: content_spans(&emitted, vocab),
        handoffs: Vec::new(),
        answer,
        stats: RunStats {
            completion_tokens: emitted.len(),
            aux_encode_tokens: 0,
            handoff_count: 0,
            decode_ms,
            aux_encode_ms: 0.0,
            recovery_ms: 0.0,
            total_ms: decode_ms,
            truncated,
        },
        emitted_tokens: emitted,
        output_text,
    })
}

/// Baseline decode with explicit reasoning text in the output.
pub fn infer_full_cot(
    question: &str,
    model: &Transformer,
    vocab: &Vocab,
    task: TaskKind,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace> {
    infer_single(question, model, vocab, task, cfg, "fullcot")
}

/// Baseline decode of the content-only model.
pub fn infer_no_cot(
    question: &str,
    model: &Transformer,
    vocab: &Vocab,
    task: TaskKind,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace> {
    infer_single(question, model, vocab, task, cfg, "nocot")
}

/// Answer extraction from a finished (or truncated) trace.
pub fn extract_answer(trace: &InferenceTrace, task: TaskKind) -> Option<String> {
    extract_answer_text(task, &trace.output_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn models() -> (Transformer, Transformer) {
        let cfg = ModelConfig {
            vocab_size: Vocab::builtin().size(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 128,
            cot_token_id: Vocab::builtin().cot(),
            dropout_rate: 0.0,
        };
        let hcot = init_model(&cfg, 100).unwrap();
        let mut aux = init_model(&cfg, 101).unwrap();
        aux.freeze();
        (hcot, aux)
    }

    fn small_cfg() -> InferenceConfig {
        InferenceConfig {
            max_new_tokens: 24,
            max_handoffs: 4,
            ..InferenceConfig::default()
        }
    }

    #[test]
    fn handoff_count_matches_emitted_markers() {
        let (hcot, aux) = models();
        let vocab = Vocab::builtin();
        let trace = infer_hcot(
            "Start with 3 . Add 4 .",
            &hcot,
            &aux,
            vocab,
            TaskKind::ChainArithmetic,
            &small_cfg(),
        )
        .unwrap();
        let markers = trace
            .emitted_tokens
            .iter()
            .filter(|&&t| t == vocab.cot())
            .count();
        // a truncation triggered by the handoff budget leaves one final
        // marker without a record
        let unrecorded = usize::from(trace.stats.truncated && markers > trace.handoffs.len());
        assert_eq!(markers, trace.handoffs.len() + unrecorded);
        assert_eq!(trace.stats.handoff_count, trace.handoffs.len());
        assert_eq!(trace.stats.completion_tokens, trace.emitted_tokens.len());
    }

    #[test]
    fn unfrozen_compressor_rejected() {
        let (hcot, _) = models();
        let cfg = hcot.config().clone();
        let aux = init_model(&cfg, 102).unwrap();
        let err = infer_hcot(
            "Start with 3 .",
            &hcot,
            &aux,
            Vocab::builtin(),
            TaskKind::ChainArithmetic,
            &small_cfg(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("frozen"));
    }

    #[test]
    fn greedy_inference_is_deterministic() {
        let (hcot, aux) = models();
        let vocab = Vocab::builtin();
        let run = || {
            infer_hcot(
                "Start with 5 . Subtract 2 .",
                &hcot,
                &aux,
                vocab,
                TaskKind::ChainArithmetic,
                &small_cfg(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.emitted_tokens, b.emitted_tokens);
        assert_eq!(a.answer, b.answer);
        for (ha, hb) in a.handoffs.iter().zip(&b.handoffs) {
            assert_eq!(ha.r_hash, hb.r_hash);
        }
    }

    #[test]
    fn single_model_trace_matches_plain_decode() {
        let (hcot, _) = models();
        let vocab = Vocab::builtin();
        let cfg = small_cfg();
        let trace = infer_no_cot(
            "Start with 3 . Add 4 .",
            &hcot,
            vocab,
            TaskKind::ChainArithmetic,
            &cfg,
        )
        .unwrap();
        let mut prefix = vec![vocab.bos()];
        prefix.extend(vocab.encode("Start with 3 . Add 4 .").unwrap());
        let stop: HashSet<u32> = [vocab.eos()].into_iter().collect();
        let mut rng = Rng::derive(0, "sample");
        let direct = decode(&hcot, &prefix, &[], &stop, 24, 0.01, 1.0, &mut rng).unwrap();
        assert_eq!(trace.emitted_tokens, direct);
        assert!(trace.handoffs.is_empty());
        assert_eq!(trace.stats.handoff_count, 0);
    }

    #[test]
    fn recovery_requires_handoffs() {
        let (_, aux) = models();
        let vocab = Vocab::builtin();
        let trace = InferenceTrace {
            question: "q".into(),
            mode: "hcot".into(),
            emitted_tokens: vec![],
            output_text: String::new(),
            content_spans: vec![],
            handoffs: vec![],
            answer: None,
            stats: RunStats::default(),
        };
        assert!(recover_thoughts(&trace, &aux, vocab, &small_cfg()).is_err());
    }

    #[test]
    fn recovery_is_deterministic_and_aligned() {
        let (hcot, aux) = models();
        let vocab = Vocab::builtin();
        let mut cfg = small_cfg();
        cfg.recover_thoughts = true;
        let trace = infer_hcot(
            "Start with 2 . Add 1 .",
            &hcot,
            &aux,
            vocab,
            TaskKind::ChainArithmetic,
            &cfg,
        )
        .unwrap();
        if trace.handoffs.is_empty() {
            return; // untrained model happened not to emit a marker
        }
        for h in &trace.handoffs {
            assert!(h.recovered_thought.is_some());
        }
        let again = recover_thoughts(&trace, &aux, vocab, &cfg).unwrap();
        assert_eq!(again.len(), trace.handoffs.len());
        for (h, t) in trace.handoffs.iter().zip(&again) {
            assert_eq!(h.recovered_thought.as_ref().unwrap(), t);
        }
    }

    #[test]
    fn answer_extraction_last_match_semantics() {
        let mut trace = InferenceTrace {
            question: "q".into(),
            mode: "fullcot".into(),
            emitted_tokens: vec![],
            output_text: "3 + 4 = 7 Answer: 7 junk Answer: 14".into(),
            content_spans: vec![],
            handoffs: vec![],
            answer: None,
            stats: RunStats::default(),
        };
        assert_eq!(
            extract_answer(&trace, TaskKind::ChainArithmetic).as_deref(),
            Some("14")
        );
        trace.output_text = "Action 2: finish[blue]".into();
        assert_eq!(
            extract_answer(&trace, TaskKind::KbLookup).as_deref(),
            Some("blue")
        );
    }

    #[test]
    fn wall_clock_decomposition_within_overhead() {
        let (hcot, aux) = models();
        let vocab = Vocab::builtin();
        let cfg = InferenceConfig {
            max_new_tokens: 60,
            max_handoffs: 6,
            ..InferenceConfig::default()
        };
        let trace = infer_hcot(
            "Start with 3 . Add 4 . Multiply by 2 .",
            &hcot,
            &aux,
            vocab,
            TaskKind::ChainArithmetic,
            &cfg,
        )
        .unwrap();
        let s = &trace.stats;
        let parts = s.decode_ms + s.aux_encode_ms + s.recovery_ms;
        assert!(
            (s.total_ms - parts).abs() <= 0.05 * s.total_ms + 0.5,
            "total {} vs parts {parts}",
            s.total_ms
        );
    }
}
