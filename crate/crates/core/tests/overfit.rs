//! Overfit-and-replay oracles: memorize a handful of samples with tiny
//! models, then check that two-model inference reproduces the gold
//! contents, that recovery reproduces the gold thoughts, and that the
//! paired token counts always favor the compressed path.

use hcot::dataprep::{make_aux_instances, make_fullcot_instance, make_hcot_instance, SeqInstance};
use hcot::inference::{infer_full_cot, infer_hcot, recover_thoughts, InferenceConfig};
use hcot::model::{decode, init_model, ModelConfig, Transformer};
use hcot::rng::Rng;
use hcot::taskgen::{gen_chain_arithmetic, HCoTSample};
use hcot::training::{train_stage, DevEval, Stage, TrainConfig, TrainData};
use hcot::vocab::Vocab;

fn model_config(hidden: usize, layers: usize) -> ModelConfig {
    let vocab = Vocab::builtin();
    ModelConfig {
        vocab_size: vocab.size(),
        hidden_dim: hidden,
        num_layers: layers,
        num_heads: 2,
        max_seq_len: 192,
        cot_token_id: vocab.cot(),
        dropout_rate: 0.0,
    }
}

fn memorize_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda: 0.1,
        learning_rate: 3e-3,
        batch_size: 8,
        epochs,
        warmup_frac: 0.02,
        ..TrainConfig::default()
    }
}

struct Overfit {
    samples: Vec<HCoTSample>,
    aux: Transformer,
    hcot: Transformer,
    fullcot: Transformer,
}

/// Train compressor, content and baseline models to memorization on a
/// small fixed sample set.
fn overfit_models() -> Overfit {
    let vocab = Vocab::builtin();
    let samples: Vec<HCoTSample> = (0..12)
        .map(|s| gen_chain_arithmetic(s, 1 + (s as usize % 2), 9))
        .collect();
    let aux_insts: Vec<_> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| make_aux_instances(s, vocab, i).unwrap())
        .collect();
    let hcot_insts: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| make_hcot_instance(s, vocab, i).unwrap())
        .collect();
    let full_insts: Vec<SeqInstance> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| make_fullcot_instance(s, vocab, i).unwrap())
        .collect();

    let mcfg = model_config(32, 2);
    let aux_out = train_stage(
        init_model(&mcfg, 11).unwrap(),
        TrainData::Aux(&aux_insts),
        DevEval::AuxPerplexity(&aux_insts),
        &memorize_config(250),
        Stage::Aux,
    )
    .unwrap();
    assert!(!aux_out.aborted_nan);
    let mut aux = aux_out.model;
    aux.freeze();

    let hcot_out = train_stage(
        init_model(&mcfg, 12).unwrap(),
        TrainData::Hcot {
            instances: &hcot_insts,
            frozen_aux: &aux,
        },
        DevEval::Metric(Box::new(|_| Ok(0.0))),
        &memorize_config(250),
        Stage::Hcot,
    )
    .unwrap();
    assert!(!hcot_out.aborted_nan);

    let full_out = train_stage(
        init_model(&mcfg, 13).unwrap(),
        TrainData::Seq(&full_insts),
        DevEval::Metric(Box::new(|_| Ok(0.0))),
        &memorize_config(250),
        Stage::Fullcot,
    )
    .unwrap();
    assert!(!full_out.aborted_nan);

    Overfit {
        samples,
        aux,
        hcot: hcot_out.model,
        fullcot: full_out.model,
    }
}

#[test]
fn overfit_replay_suite() {
    let vocab = Vocab::builtin();
    let fit = overfit_models();
    let icfg = InferenceConfig {
        max_new_tokens: 160,
        max_handoffs: 8,
        recover_thoughts: true,
        ..InferenceConfig::default()
    };

    let mut replayed = 0usize;
    let mut recovered_ok = 0usize;
    let mut recovered_total = 0usize;
    for sample in &fit.samples {
        let trace = infer_hcot(
            &sample.question,
            &fit.hcot,
            &fit.aux,
            vocab,
            sample.task,
            &icfg,
        )
        .unwrap();

        // handoff bookkeeping invariant
        let markers = trace
            .emitted_tokens
            .iter()
            .filter(|&&t| t == vocab.cot())
            .count();
        assert_eq!(markers, trace.handoffs.len());
        assert_eq!(trace.stats.handoff_count, trace.handoffs.len());

        // memorized samples replay their gold structure
        let gold_thoughts = sample.thoughts();
        if trace.answer.as_deref() == Some(sample.gold_answer.as_str())
            && trace.handoffs.len() == gold_thoughts.len()
        {
            replayed += 1;
        }

        // recovered thoughts against gold text
        for (h, gold) in trace.handoffs.iter().zip(&gold_thoughts) {
            recovered_total += 1;
            if h.recovered_thought.as_deref() == Some(*gold) {
                recovered_ok += 1;
            }
        }

        // the compressed path never decodes thought tokens: paired decode
        let full = infer_full_cot(&sample.question, &fit.fullcot, vocab, sample.task, &icfg)
            .unwrap();
        assert!(
            full.stats.completion_tokens >= trace.stats.completion_tokens,
            "full {} < compressed {}",
            full.stats.completion_tokens,
            trace.stats.completion_tokens
        );
        assert!(!full.emitted_tokens.contains(&vocab.cot()));
    }
    assert!(
        replayed >= 11,
        "only {replayed}/12 samples replayed their gold structure"
    );
    assert!(recovered_total > 0);
    let recall = recovered_ok as f64 / recovered_total as f64;
    assert!(recall >= 0.9, "thought recovery {recall:.2} below 0.9");

    // recovery is idempotent and aligned
    let sample = &fit.samples[0];
    let trace = infer_hcot(
        &sample.question,
        &fit.hcot,
        &fit.aux,
        vocab,
        sample.task,
        &icfg,
    )
    .unwrap();
    if !trace.handoffs.is_empty() {
        let again = recover_thoughts(&trace, &fit.aux, vocab, &icfg).unwrap();
        assert_eq!(again.len(), trace.handoffs.len());
    }
}

#[test]
fn cyclic_toy_language_replay() {
    // a 1-layer model memorizes a 3-token cycle and decode reproduces it
    let vocab = Vocab::builtin();
    let mcfg = model_config(16, 1);
    let (x, y, z) = (
        vocab.id("alpha").unwrap(),
        vocab.id("bravo").unwrap(),
        vocab.id("charlie").unwrap(),
    );
    let mut target = Vec::new();
    for _ in 0..4 {
        target.extend_from_slice(&[x, y, z]);
    }
    let inst = SeqInstance {
        input: vec![vocab.bos()],
        target: target.clone(),
        source_sample: 0,
    };
    let insts = vec![inst];
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 1,
        epochs: 300,
        checkpoint_every: 50,
        warmup_frac: 0.01,
        ..TrainConfig::default()
    };
    let out = train_stage(
        init_model(&mcfg, 21).unwrap(),
        TrainData::Seq(&insts),
        DevEval::Metric(Box::new(|_| Ok(0.0))),
        &cfg,
        Stage::Fullcot,
    )
    .unwrap();
    let mut rng = Rng::new(0);
    let toks = decode(
        &out.model,
        &[vocab.bos()],
        &[],
        &std::collections::HashSet::new(),
        12,
        0.01,
        1.0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(toks, target, "decode did not reproduce the memorized cycle");
}
