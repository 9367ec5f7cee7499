use plugmem::dpm::{build_memory, memory_bytes};
use plugmem::model::{top_layers, LayerKind, Model, ModelConfig, ParamSet};
use plugmem::numerics::Tensor;
use plugmem::text::KnowledgeEntry;
use plugmem::train::{
    adam_step, classification_metrics, clip_global_norm, evaluate_classifier, finetune, global_norm, pretrain_mlm,
    AdamConfig, AdamState, BatchSampler, LabeledSeq, Precision, TrainConfig, DEFAULT_REFRESH_EVERY,
};
use plugmem::util::{rng, sha256_hex};
use plugmem::Error;
use proptest::prelude::*;
use rand::Rng;

fn tiny(kinds: Vec<LayerKind>) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model: 8,
        n_layers: kinds.len(),
        n_heads: 2,
        d_ffn: 16,
        max_seq_len: 12,
        max_knowledge_len: 6,
        layer_kinds: kinds,
        top_n: 3,
        dropout: 0.0,
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut row = vec![2u32];
            row.extend((0..r.gen_range(3..10)).map(|_| r.gen_range(6..30u32)));
            row
        })
        .collect()
}

fn knowledge(n: usize) -> Vec<KnowledgeEntry> {
    corpus(n, 99)
        .into_iter()
        .enumerate()
        .map(|(i, t)| KnowledgeEntry {
            id: i as u64,
            tokens: t[1..t.len().min(7)].to_vec(),
        })
        .collect()
}

/// Class 0 rows contain token 10, class 1 rows token 11, among filler.
fn separable(n: usize, seed: u64) -> Vec<LabeledSeq> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut tokens = vec![2u32];
            tokens.extend((0..r.gen_range(3..9)).map(|_| r.gen_range(12..30u32)));
            let at = r.gen_range(1..tokens.len());
            tokens.insert(at, 10 + label as u32);
            LabeledSeq { tokens, label }
        })
        .collect()
}

#[test]
fn defaults_follow_the_pretraining_recipe() {
    let c = TrainConfig::default();
    assert_eq!(DEFAULT_REFRESH_EVERY, 200);
    assert_eq!(c.refresh_every, 200);
    assert_eq!(c.mask_rate, 0.15);
    assert_eq!(c.grad_clip, 1.0);
    let a = AdamConfig::default();
    assert_eq!((a.beta1, a.beta2, a.eps), (0.9, 0.999, 1e-8));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut m = Model::new(tiny(top_layers(2, 1, LayerKind::Dpm)), 0).unwrap();
    let mut store = build_memory(&m, knowledge(20)).unwrap();
    let before = m.params.hash();
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 4,
        lr: 0.0,
        refresh_every: 3,
        ..TrainConfig::default()
    };
    let rep = pretrain_mlm(&mut m, Some(&mut store), &corpus(12, 1), &cfg).unwrap();
    assert_eq!(m.params.hash(), before);
    assert_eq!(rep.refresh_steps, vec![3, 6]);
    assert_eq!(rep.loss.len(), 6);
}

#[test]
fn pretraining_is_reproducible_and_reduces_loss() {
    let run = || {
        let mut m = Model::new(tiny(top_layers(2, 1, LayerKind::Dpm)), 3).unwrap();
        let mut store = build_memory(&m, knowledge(30)).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 8,
            lr: 1e-2,
            refresh_every: 20,
            ..TrainConfig::default()
        };
        let rep = pretrain_mlm(&mut m, Some(&mut store), &corpus(40, 2), &cfg).unwrap();
        (rep, memory_bytes(&store))
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.param_hash, b.param_hash);
    assert_eq!(sa, sb);
    let head: f64 = a.loss[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = a.loss[55..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn memory_layers_need_a_memory() {
    let mut m = Model::new(tiny(top_layers(2, 1, LayerKind::Dpm)), 0).unwrap();
    let err = pretrain_mlm(&mut m, None, &corpus(4, 0), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let bad = TrainConfig {
        refresh_every: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn f32_precision_rounds_parameters() {
    let mut m = Model::new(tiny(vec![LayerKind::Standard]), 0).unwrap();
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 2,
        precision: Precision::F32,
        ..TrainConfig::default()
    };
    pretrain_mlm(&mut m, None, &corpus(4, 0), &cfg).unwrap();
    assert!(m.params.iter().all(|(_, t)| t.data.iter().all(|&v| v as f32 as f64 == v)));
}

#[test]
fn zero_steps_leave_the_untrained_head() {
    let mut m = Model::new(tiny(vec![LayerKind::Standard]), 0).unwrap();
    m.add_cls_head(2, 4).unwrap();
    let data = separable(40, 5);
    let before = evaluate_classifier(&m, None, &data).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let rep = finetune(&mut m, None, &data, &cfg).unwrap();
    assert!(rep.loss.is_empty());
    let after = evaluate_classifier(&m, None, &data).unwrap();
    assert_eq!(after.predictions, before.predictions);
    assert!((0.25..=0.75).contains(&after.metrics.accuracy));
}

/// Bag-of-words logistic regression, to confirm the task is learnable.
fn logistic_accuracy(data: &[LabeledSeq]) -> f64 {
    let mut w = vec![0.0; 30];
    for _ in 0..200 {
        for e in data {
            let s: f64 = e.tokens.iter().map(|&t| w[t as usize]).sum();
            let p = 1.0 / (1.0 + (-s).exp());
            let g = p - e.label as f64;
            for &t in &e.tokens {
                w[t as usize] -= 0.1 * g;
            }
        }
    }
    let correct = data
        .iter()
        .filter(|e| (e.tokens.iter().map(|&t| w[t as usize]).sum::<f64>() > 0.0) == (e.label == 1))
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn separable_task_is_learned() {
    let train = separable(200, 6);
    let test = separable(100, 7);
    assert!(logistic_accuracy(&test) > 0.99);
    let mut m = Model::new(tiny(top_layers(2, 1, LayerKind::Dpm)), 8).unwrap();
    let mut store = build_memory(&m, knowledge(20)).unwrap();
    store.frozen = true;
    let hash = sha256_hex(&memory_bytes(&store));
    m.add_cls_head(2, 9).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let rep = finetune(&mut m, Some(&store), &train, &cfg).unwrap();
    assert_eq!(rep.memory_hash.as_deref(), Some(hash.as_str()));
    assert_eq!(sha256_hex(&memory_bytes(&store)), hash);
    let eval = evaluate_classifier(&m, Some(&store), &test).unwrap();
    assert!(eval.metrics.accuracy > 0.9, "{:?}", eval.metrics);
}

#[test]
fn finetune_requires_a_frozen_memory_and_valid_labels() {
    let mut m = Model::new(tiny(top_layers(2, 1, LayerKind::Dpm)), 0).unwrap();
    let store = build_memory(&m, knowledge(5)).unwrap();
    m.add_cls_head(2, 0).unwrap();
    let data = separable(4, 0);
    let cfg = TrainConfig::default();
    assert!(matches!(finetune(&mut m, Some(&store), &data, &cfg), Err(Error::Contract(_))));
    let mut frozen = store.clone();
    frozen.frozen = true;
    let bad = vec![LabeledSeq {
        tokens: vec![2, 9],
        label: 5,
    }];
    assert!(matches!(finetune(&mut m, Some(&frozen), &bad, &cfg), Err(Error::Contract(_))));
}

fn params_of(values: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_grad());
    p
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = params_of(&[1.0, -2.0, 0.5]);
    let id = p.id("w").unwrap();
    let cfg = AdamConfig {
        lr: 0.1,
        clip: 0.0,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&p);
    let g = [0.3, -4.0, 0.0];
    adam_step(&mut p, &mut [(id, g.to_vec())], &mut state, &cfg);
    // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
    let want: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(g)
        .map(|(w, g)| w - 0.1 * g / (g.abs() + 1e-8))
        .collect();
    for (a, b) in p.get(id).data.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(p.get(id).data[2], 0.5);
}

#[test]
fn zero_gradient_changes_nothing() {
    let mut p = params_of(&[1.0, 2.0]);
    let id = p.id("w").unwrap();
    let mut state = AdamState::new(&p);
    for _ in 0..3 {
        adam_step(&mut p, &mut [(id, vec![0.0, 0.0])], &mut state, &AdamConfig::default());
    }
    assert_eq!(p.get(id).data, vec![1.0, 2.0]);
}

proptest! {
    #[test]
    fn clipping_bounds_the_global_norm(
        g in prop::collection::vec(-100.0f64..100.0, 1..40),
        clip in 0.01f64..5.0,
    ) {
        let p = params_of(&vec![0.0; g.len()]);
        let id = p.id("w").unwrap();
        let mut grads = vec![(id, g.clone())];
        let before = clip_global_norm(&mut grads, clip);
        let after = global_norm(&grads);
        if before > clip {
            prop_assert!((after - clip).abs() < 1e-9);
        } else {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn sampler_visits_every_example_once_per_epoch(n in 1usize..50, b in 1usize..8, seed in any::<u64>()) {
        let mut s = BatchSampler::new(n, seed);
        let mut seen: Vec<usize> = (0..n.div_ceil(b) * b).step_by(b).flat_map(|k| s.batch(k / b, b)).collect();
        seen.truncate(n);
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn metric_examples() {
    let m = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    let m = classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    let m = classification_metrics(&[1], &[0], 2).unwrap();
    assert_eq!(m.accuracy, 0.0);
    assert!(classification_metrics(&[], &[], 2).is_err());
}
