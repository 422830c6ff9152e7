//! Tokenized training-instance construction for every training stage.
//!
//! The compressor stage sees one instance per thought: the question and the
//! content prefix with a handoff marker after each earlier content segment,
//! ending at the terminal marker whose hidden state will represent the
//! thought. The content stage sees one instance per sample with every
//! thought replaced by a single marker token. Earlier thoughts appear only
//! as markers in compressor inputs, matching what exists at inference time
//! (decoded output never contains thought text).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::taskgen::HCoTSample;
use crate::vocab::Vocab;

/// One compressor training instance (one per thought in the source sample).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxInstance {
    /// bos, question, c0, [CoT], ..., c_i, [CoT]
    pub input: Vec<u32>,
    /// thought tokens followed by the end-of-thought marker
    pub target: Vec<u32>,
    /// index of the terminal marker within `input`
    pub cot_position: usize,
    /// number of thought tokens at the start of `target` (the pooling span;
    /// excludes the end marker)
    pub thought_len: usize,
    /// position of the source sample in its dataset (for batch grouping)
    pub source_sample: usize,
    pub thought_index: usize,
}

/// One content-stage training instance (one per sample).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HCoTInstance {
    /// bos, question
    pub input: Vec<u32>,
    /// c0, [CoT], c1, [CoT], ..., c_n, eos — no thought text
    pub target: Vec<u32>,
    /// indices within `target` holding the marker token, in thought order
    pub cot_target_positions: Vec<usize>,
    /// per-marker compressor input (the prefix the frozen model encodes)
    pub aux_inputs: Vec<Vec<u32>>,
    pub source_sample: usize,
}

/// Plain input/target instance for the one-model baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqInstance {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub source_sample: usize,
}

fn question_prefix(sample: &HCoTSample, vocab: &Vocab) -> Result<Vec<u32>> {
    let mut input = vec![vocab.bos()];
    input.extend(vocab.encode(&sample.question)?);
    Ok(input)
}

/// One instance per thought: input is the question plus all contents up to
/// and including c_i, each followed by the marker token; target is the
/// thought plus the end marker.
///
/// Earlier thoughts appear only as their markers, which is exactly what
/// exists at inference time. The variant that spells out prior thought text
/// after each marker is available behind [`make_aux_instances_opts`] and is
/// not the default.
pub fn make_aux_instances(
    sample: &HCoTSample,
    vocab: &Vocab,
    source_sample: usize,
) -> Result<Vec<AuxInstance>> {
    make_aux_instances_opts(sample, vocab, source_sample, false)
}

pub fn make_aux_instances_opts(
    sample: &HCoTSample,
    vocab: &Vocab,
    source_sample: usize,
    full_prior_thoughts: bool,
) -> Result<Vec<AuxInstance>> {
    sample.validate()?;
    let contents = sample.contents();
    let thoughts = sample.thoughts();
    let mut out = Vec::with_capacity(thoughts.len());
    let mut input = question_prefix(sample, vocab)?;
    for (i, thought) in thoughts.iter().enumerate() {
        input.extend(vocab.encode(contents[i])?);
        input.push(vocab.cot());
        let thought_tokens = vocab.encode(thought)?;
        let mut target = thought_tokens.clone();
        target.push(vocab.eot());
        out.push(AuxInstance {
            input: input.clone(),
            target,
            cot_position: input.len() - 1,
            thought_len: thought_tokens.len(),
            source_sample,
            thought_index: i,
        });
        if full_prior_thoughts {
            input.extend_from_slice(&thought_tokens);
        }
    }
    Ok(out)
}

/// One instance per sample: thoughts replaced by marker tokens in the
/// target, with the compressor input recorded for every marker.
pub fn make_hcot_instance(
    sample: &HCoTSample,
    vocab: &Vocab,
    source_sample: usize,
) -> Result<HCoTInstance> {
    sample.validate()?;
    let input = question_prefix(sample, vocab)?;
    let contents = sample.contents();
    let n_thoughts = sample.num_thoughts();
    let mut target = Vec::new();
    let mut cot_target_positions = Vec::with_capacity(n_thoughts);
    let mut aux_inputs = Vec::with_capacity(n_thoughts);
    for (i, content) in contents.iter().enumerate() {
        target.extend(vocab.encode(content)?);
        if i < n_thoughts {
            cot_target_positions.push(target.len());
            target.push(vocab.cot());
        }
    }
    target.push(vocab.eos());
    // the compressor sees exactly these prefixes at inference time
    for &pos in &cot_target_positions {
        let mut ai = input.clone();
        ai.extend_from_slice(&target[..=pos]);
        aux_inputs.push(ai);
    }
    Ok(HCoTInstance {
        input,
        target,
        cot_target_positions,
        aux_inputs,
        source_sample,
    })
}

/// Full interleaved target (contents and thoughts verbatim, no markers).
pub fn make_fullcot_instance(
    sample: &HCoTSample,
    vocab: &Vocab,
    source_sample: usize,
) -> Result<SeqInstance> {
    sample.validate()?;
    let input = question_prefix(sample, vocab)?;
    let mut target = Vec::new();
    for seg in &sample.segments {
        target.extend(vocab.encode(&seg.text)?);
    }
    target.push(vocab.eos());
    Ok(SeqInstance {
        input,
        target,
        source_sample,
    })
}

/// Content-only target (thoughts dropped entirely).
pub fn make_nocot_instance(
    sample: &HCoTSample,
    vocab: &Vocab,
    source_sample: usize,
) -> Result<SeqInstance> {
    sample.validate()?;
    let input = question_prefix(sample, vocab)?;
    let mut target = Vec::new();
    for content in sample.contents() {
        target.extend(vocab.encode(content)?);
    }
    target.push(vocab.eos());
    Ok(SeqInstance {
        input,
        target,
        source_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_chain_arithmetic, gen_kb_lookup};

    fn samples() -> Vec<HCoTSample> {
        let mut v = Vec::new();
        for seed in 0..20 {
            v.push(gen_chain_arithmetic(seed, 1 + (seed as usize % 3), 9));
            v.push(gen_kb_lookup(seed, 1 + (seed as usize % 3), 6));
        }
        v
    }

    #[test]
    fn one_aux_instance_per_thought() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let aux = make_aux_instances(s, vocab, i).unwrap();
            assert_eq!(aux.len(), s.num_thoughts());
            for inst in &aux {
                assert_eq!(*inst.input.last().unwrap(), vocab.cot());
                assert_eq!(inst.cot_position, inst.input.len() - 1);
                assert_eq!(*inst.target.last().unwrap(), vocab.eot());
                assert_eq!(inst.thought_len + 1, inst.target.len());
                assert!(inst.thought_len > 0);
            }
        }
    }

    #[test]
    fn full_prior_thought_inputs_carry_thought_text() {
        let vocab = Vocab::builtin();
        let s = gen_chain_arithmetic(5, 3, 9);
        let marker_form = make_aux_instances(&s, vocab, 0).unwrap();
        let full_form = make_aux_instances_opts(&s, vocab, 0, true).unwrap();
        assert_eq!(marker_form.len(), full_form.len());
        // first instance has no prior thought, so the two forms agree
        assert_eq!(marker_form[0].input, full_form[0].input);
        // later instances additionally spell out each earlier thought
        let thoughts = s.thoughts();
        for i in 1..full_form.len() {
            let extra: usize = thoughts[..i]
                .iter()
                .map(|z| vocab.encode(z).unwrap().len())
                .sum();
            assert_eq!(full_form[i].input.len(), marker_form[i].input.len() + extra);
            assert_eq!(*full_form[i].input.last().unwrap(), vocab.cot());
            assert_eq!(full_form[i].cot_position, full_form[i].input.len() - 1);
        }
    }

    #[test]
    fn single_thought_sample_minimal_case() {
        let vocab = Vocab::builtin();
        let s = gen_chain_arithmetic(7, 1, 9);
        let aux = make_aux_instances(&s, vocab, 0).unwrap();
        assert_eq!(aux.len(), 1);
        assert_eq!(*aux[0].input.last().unwrap(), vocab.cot());
    }

    #[test]
    fn aux_input_resplits_into_original_contents() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let qlen = 1 + vocab.encode(&s.question).unwrap().len();
            for inst in make_aux_instances(s, vocab, i).unwrap() {
                // split the post-question tokens on the marker token
                let tail = &inst.input[qlen..];
                let mut pieces: Vec<Vec<u32>> = vec![Vec::new()];
                for &t in tail {
                    if t == vocab.cot() {
                        pieces.push(Vec::new());
                    } else {
                        pieces.last_mut().unwrap().push(t);
                    }
                }
                assert!(pieces.last().unwrap().is_empty());
                pieces.pop();
                let contents = s.contents();
                assert_eq!(pieces.len(), inst.thought_index + 1);
                for (j, piece) in pieces.iter().enumerate() {
                    assert_eq!(vocab.decode(piece), contents[j], "sample {i} piece {j}");
                }
            }
        }
    }

    #[test]
    fn hcot_marker_count_matches_thoughts() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let inst = make_hcot_instance(s, vocab, i).unwrap();
            let markers = inst.target.iter().filter(|&&t| t == vocab.cot()).count();
            assert_eq!(markers, s.num_thoughts());
            assert_eq!(inst.cot_target_positions.len(), s.num_thoughts());
            assert_eq!(inst.aux_inputs.len(), s.num_thoughts());
            for &p in &inst.cot_target_positions {
                assert_eq!(inst.target[p], vocab.cot());
            }
        }
    }

    #[test]
    fn hcot_target_contains_no_thought_tokens() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let inst = make_hcot_instance(s, vocab, i).unwrap();
            // reconstruct content tokens; target must be exactly contents
            // plus markers plus eos
            let mut expect = Vec::new();
            let contents = s.contents();
            for (j, c) in contents.iter().enumerate() {
                expect.extend(vocab.encode(c).unwrap());
                if j < s.num_thoughts() {
                    expect.push(vocab.cot());
                }
            }
            expect.push(vocab.eos());
            assert_eq!(inst.target, expect);
        }
    }

    #[test]
    fn aux_input_is_hcot_prefix_through_each_marker() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let hcot = make_hcot_instance(s, vocab, i).unwrap();
            let aux = make_aux_instances(s, vocab, i).unwrap();
            for (k, inst) in aux.iter().enumerate() {
                let mut prefix = hcot.input.clone();
                prefix.extend_from_slice(&hcot.target[..=hcot.cot_target_positions[k]]);
                assert_eq!(inst.input, prefix, "sample {i} thought {k}");
                assert_eq!(inst.input, hcot.aux_inputs[k]);
            }
        }
    }

    #[test]
    fn fullcot_length_identity() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let hcot = make_hcot_instance(s, vocab, i).unwrap();
            let full = make_fullcot_instance(s, vocab, i).unwrap();
            let thought_tokens: usize = s
                .thoughts()
                .iter()
                .map(|z| vocab.encode(z).unwrap().len())
                .sum();
            assert_eq!(
                full.target.len(),
                hcot.target.len() + thought_tokens - s.num_thoughts()
            );
            assert!(!full.target.contains(&vocab.cot()));
            assert!(full.target.len() > hcot.target.len());
        }
    }

    #[test]
    fn fullcot_roundtrips_to_segment_text() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let full = make_fullcot_instance(s, vocab, i).unwrap();
            let body = &full.target[..full.target.len() - 1];
            let text = vocab.decode(body);
            let expect = s
                .segments
                .iter()
                .map(|seg| seg.text.as_str())
                .filter(|t| !t.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            assert_eq!(text, expect);
        }
    }

    #[test]
    fn nocot_is_contents_only() {
        let vocab = Vocab::builtin();
        for (i, s) in samples().iter().enumerate() {
            let inst = make_nocot_instance(s, vocab, i).unwrap();
            assert!(!inst.target.contains(&vocab.cot()));
            let text = vocab.decode(&inst.target[..inst.target.len() - 1]);
            for z in s.thoughts() {
                assert!(!text.contains(z));
            }
        }
    }
}
