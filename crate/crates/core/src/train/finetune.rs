use serde::{Deserialize, Serialize};

use super::config::{Precision, TrainConfig};
use super::metrics::{argmax, classification_metrics, ClassMetrics};
use super::mlm::BatchSampler;
use super::optim::{adam_step, first_nonfinite, AdamState};
use crate::dpm::{memory_bytes, DpmStore};
use crate::error::{Error, Result};
use crate::model::{MemoryMode, Model, Session};
use crate::numerics::Tensor;
use crate::util::{seed_mix, sha256_hex};

const EVAL_CHUNK: usize = 32;

/// A tokenized classification example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSeq {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub loss: Vec<f64>,
    pub memory_hash: Option<String>,
    pub param_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: ClassMetrics,
    pub predictions: Vec<usize>,
    /// Entry ids retrieved for each example, over all memory layers.
    pub retrieved: Vec<Vec<u64>>,
}

fn memory_hash(store: Option<&DpmStore>) -> Option<String> {
    store.map(|s| sha256_hex(&memory_bytes(s)))
}

fn check_memory(model: &Model, store: Option<&DpmStore>) -> Result<()> {
    if !model.config.uses_memory() {
        return Ok(());
    }
    match store {
        None => Err(Error::Config("memory layers need an attached memory".into())),
        Some(s) if !s.frozen => Err(Error::Contract("fine-tuning requires a frozen memory".into())),
        Some(_) => Ok(()),
    }
}

/// Trains the encoder and classification head with cross-entropy while the
/// memory stays fixed. Parameters matching `cfg.freeze` keep their values.
pub fn finetune(model: &mut Model, store: Option<&DpmStore>, data: &[LabeledSeq], cfg: &TrainConfig) -> Result<FinetuneReport> {
    finetune_impl(model, store, data, cfg, true)
}

fn head_only(model: &Model, cfg: &TrainConfig) -> bool {
    model.config.dropout == 0.0
        && model
            .params
            .iter()
            .all(|(name, _)| name.starts_with("cls.") || cfg.is_frozen(name))
}

/// Final `[CLS]` rows of every example, `[n×d_model]`.
fn cls_features(model: &Model, store: Option<&DpmStore>, data: &[LabeledSeq]) -> Result<Tensor> {
    let d = model.config.d_model;
    let mut rows = Vec::with_capacity(data.len() * d);
    for chunk in data.chunks(EVAL_CHUNK) {
        let s = model.session();
        let inputs: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let out = model.forward(&s, &inputs, store, MemoryMode::Cached)?;
        let hidden = s.tape.data(out.hidden);
        for &start in &out.offsets[..out.offsets.len() - 1] {
            rows.extend_from_slice(&hidden[start * d..(start + 1) * d]);
        }
    }
    Tensor::new(vec![data.len(), d], rows)
}

fn finetune_impl(
    model: &mut Model,
    store: Option<&DpmStore>,
    data: &[LabeledSeq],
    cfg: &TrainConfig,
    reuse_features: bool,
) -> Result<FinetuneReport> {
    check_memory(model, store)?;
    cfg.validate()?;
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    if data.is_empty() {
        return Err(Error::Contract("empty training data".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= classes) {
        return Err(Error::Contract(format!("label {} outside 0..{classes}", bad.label)));
    }
    let before = memory_hash(store);
    // With everything below the head frozen and no dropout, encoder outputs
    // are the same at every step.
    let features = if reuse_features && head_only(model, cfg) {
        Some(cls_features(model, store, data)?)
    } else {
        None
    };
    let mut sampler = BatchSampler::new(data.len(), seed_mix(cfg.seed, 0xF1E7));
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = cfg.adam();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.batch(step, cfg.batch_size);
        let labels: Vec<i64> = idx.iter().map(|&i| data[i].label as i64).collect();
        let mut grads = {
            let s = Session::training(&model.params, model.config.dropout, seed_mix(cfg.seed, step as u64 + 1));
            let (hidden, offsets) = match &features {
                Some(f) => {
                    let d = model.config.d_model;
                    let mut rows = Vec::with_capacity(idx.len() * d);
                    for &i in &idx {
                        rows.extend_from_slice(f.row(i));
                    }
                    let h = s.tape.leaf(&Tensor::new(vec![idx.len(), d], rows)?);
                    (h, (0..=idx.len()).collect::<Vec<_>>())
                }
                None => {
                    let inputs: Vec<Vec<u32>> = idx.iter().map(|&i| data[i].tokens.clone()).collect();
                    let out = model.forward(&s, &inputs, store, MemoryMode::Cached)?;
                    (out.hidden, out.offsets)
                }
            };
            let logits = model.cls_logits(&s, hidden, &offsets)?;
            let loss = s.tape.cross_entropy(logits, &labels)?;
            let value = s.tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerics {
                    step,
                    batch: step,
                    msg: format!("loss is {value} on examples {idx:?}"),
                });
            }
            losses.push(value);
            s.param_grads(&s.tape.backward(loss)?)
        };
        grads.retain(|(id, _)| !cfg.is_frozen(model.params.name(*id)));
        adam_step(&mut model.params, &mut grads, &mut adam, &adam_cfg);
        if let Some(name) = first_nonfinite(&model.params, &grads) {
            return Err(Error::Numerics {
                step,
                batch: step,
                msg: format!("parameter {name} is not finite after the update"),
            });
        }
        if cfg.precision == Precision::F32 {
            model.params.round_to_f32();
        }
    }
    let after = memory_hash(store);
    if before != after {
        return Err(Error::Freeze("memory content changed during fine-tuning".into()));
    }
    Ok(FinetuneReport {
        loss: losses,
        memory_hash: after,
        param_hash: model.params.hash(),
    })
}

/// Predicted class of every example, without dropout.
pub fn evaluate_classifier(model: &Model, store: Option<&DpmStore>, data: &[LabeledSeq]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on empty data".into()));
    }
    if model.config.uses_memory() && store.is_none() {
        return Err(Error::Config("memory layers need an attached memory".into()));
    }
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    let mut predictions = Vec::with_capacity(data.len());
    let mut retrieved = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let s = model.session();
        let inputs: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let out = model.forward(&s, &inputs, store, MemoryMode::Cached)?;
        let logits = model.cls_logits(&s, out.hidden, &out.offsets)?;
        let data = s.tape.data(logits);
        for (i, row) in data.chunks_exact(classes).enumerate() {
            predictions.push(argmax(row));
            retrieved.push(
                out.retrievals
                    .iter()
                    .flat_map(|(_, per_seq)| per_seq[i].entry_ids.iter().copied())
                    .collect(),
            );
        }
    }
    let gold: Vec<usize> = data.iter().map(|e| e.label).collect();
    let metrics = classification_metrics(&predictions, &gold, classes)?;
    Ok(Evaluation {
        metrics,
        predictions,
        retrieved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpm::build_memory;
    use crate::model::ModelConfig;
    use crate::text::KnowledgeEntry;

    fn setup() -> (Model, DpmStore, Vec<LabeledSeq>) {
        let mut cfg = ModelConfig::desk(40);
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ffn = 32;
        cfg.n_layers = 2;
        cfg.layer_kinds = crate::model::top_layers(2, 1, crate::model::LayerKind::Dpm);
        let mut model = Model::new(cfg, 3).unwrap();
        model.add_cls_head(3, 4).unwrap();
        let entries = (0..12)
            .map(|i| KnowledgeEntry {
                id: i,
                tokens: vec![6 + (i as u32 % 30), 7 + (i as u32 * 3 % 30)],
            })
            .collect();
        let mut store = build_memory(&model, entries).unwrap();
        store.frozen = true;
        let data = (0..10)
            .map(|i| LabeledSeq {
                tokens: vec![2, 6 + i as u32, 9 + (i as u32 * 7 % 20), 3],
                label: i % 3,
            })
            .collect();
        (model, store, data)
    }

    #[test]
    fn cached_head_features_match_full_forward() {
        let (model, store, data) = setup();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 4,
            lr: 1e-2,
            freeze: vec!["emb.".into(), "knowledge.".into(), "layer.".into()],
            ..TrainConfig::default()
        };
        assert!(head_only(&model, &cfg));
        let mut a = model.clone();
        let mut b = model.clone();
        let ra = finetune_impl(&mut a, Some(&store), &data, &cfg, true).unwrap();
        let rb = finetune_impl(&mut b, Some(&store), &data, &cfg, false).unwrap();
        assert_eq!(ra.loss, rb.loss);
        assert_eq!(ra.param_hash, rb.param_hash);
    }

    #[test]
    fn frozen_prefixes_keep_values() {
        let (mut model, store, data) = setup();
        let before: Vec<(String, Vec<f64>)> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("emb."))
            .map(|(n, t)| (n.to_string(), t.data.clone()))
            .collect();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            lr: 1e-2,
            freeze: vec!["emb.".into()],
            ..TrainConfig::default()
        };
        assert!(!head_only(&model, &cfg));
        finetune(&mut model, Some(&store), &data, &cfg).unwrap();
        for (n, v) in before {
            let now = model.params.iter().find(|(m, _)| *m == n).unwrap().1;
            assert_eq!(now.data, v, "{n}");
        }
    }
}
