use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::synthetic::{generate_domains, SyntheticData, SyntheticDomainSpec};
use crate::dpm::{build_memory, refresh_index, DpmStore};
use crate::error::{Error, Result};
use crate::model::{top_layers, LayerKind, Model, ModelConfig};
use crate::text::{chunk_knowledge, offset_ids, KnowledgeEntry, TaskSample, Vocab};
use crate::train::{
    evaluate_classifier, finetune, pretrain_mlm, Evaluation, FinetuneReport, LabeledSeq, TrainConfig, TrainReport,
};
use crate::util::seed_mix;

/// Entry ids of domain `i` start at `DOMAIN_ID_BASE * (i + 1)`.
pub const DOMAIN_ID_BASE: u64 = 1_000_000;
/// Entry ids of injected task samples start here.
pub const IN_TASK_ID_BASE: u64 = 10_000_000;

/// Where a memory entry came from, read off its id range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    General,
    Domain,
    InTask,
}

impl Source {
    pub fn of(id: u64) -> Source {
        if id >= IN_TASK_ID_BASE {
            Source::InTask
        } else if id >= DOMAIN_ID_BASE {
            Source::Domain
        } else {
            Source::General
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::General => "general",
            Source::Domain => "domain",
            Source::InTask => "in-task",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: SyntheticDomainSpec,
    /// Model shape; `vocab_size` is replaced by the size of the built vocabulary.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seeds: Vec<u64>,
    pub vocab_limit: usize,
    /// Depth of the models in the architecture sweep.
    pub sweep_layers: usize,
}

/// Model used by the experiments: 2 layers of width 128, top layer on memory.
pub fn experiment_model() -> ModelConfig {
    let mut m = ModelConfig::desk(0);
    m.d_model = 128;
    m.d_ffn = 512;
    m.n_layers = 2;
    m.layer_kinds = top_layers(2, 1, LayerKind::Dpm);
    m
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spec: SyntheticDomainSpec::default(),
            model: experiment_model(),
            pretrain: TrainConfig {
                steps: 100,
                lr: 1e-4,
                refresh_every: 50,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 300,
                lr: 1e-2,
                freeze: vec!["emb.".into(), "knowledge.".into(), "layer.".into()],
                ..TrainConfig::default()
            },
            seeds: (0..5).collect(),
            vocab_limit: 4000,
            sweep_layers: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiments need at least one seed".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}

/// One row of results: a condition over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub condition: String,
    pub seeds: Vec<u64>,
    /// Test accuracy per seed, averaged over domains.
    pub metrics: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub sd: f64,
    /// Share of retrieved entries per source, pooled over seeds and domains.
    pub retrieval_sources: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, serde_json::Value>,
}

/// Mean and sample standard deviation; `sd` is zero below two values.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Counts retrieved ids per source.
#[derive(Clone, Debug, Default)]
pub(crate) struct SourceTally {
    counts: BTreeMap<Source, usize>,
}

impl SourceTally {
    pub(crate) fn add(&mut self, retrieved: &[Vec<u64>]) {
        for id in retrieved.iter().flatten() {
            *self.counts.entry(Source::of(*id)).or_default() += 1;
        }
    }

    pub(crate) fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub(crate) fn fraction(&self, s: Source) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.counts.get(&s).copied().unwrap_or(0) as f64 / total as f64
        }
    }

    pub(crate) fn fractions(&self) -> BTreeMap<String, f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|(s, &c)| (s.as_str().to_string(), c as f64 / total as f64))
            .collect()
    }
}

pub(crate) fn report(
    condition: impl Into<String>,
    seeds: &[u64],
    metrics: Vec<f64>,
    tally: &SourceTally,
) -> ExperimentReport {
    let (mean, sd) = mean_sd(&metrics);
    ExperimentReport {
        condition: condition.into(),
        seeds: seeds.to_vec(),
        metrics,
        mean,
        sd,
        retrieval_sources: tally.fractions(),
        extras: BTreeMap::new(),
    }
}

/// Generated data, its vocabulary, and a model pretrained on the general
/// corpus with the general memory.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub data: SyntheticData,
    /// Seed the data was generated from.
    pub data_seed: u64,
    pub vocab: Vocab,
    pub model: Model,
    /// General memory encoded with the final parameters, frozen. Absent when
    /// the model has no memory layer.
    pub general: Option<DpmStore>,
    pub report: TrainReport,
}

/// Runs generation and pretraining for `model_cfg`.
pub fn pretrain_general(cfg: &ExperimentConfig, model_cfg: &ModelConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let data = generate_domains(&cfg.spec)?;
    let vocab = Vocab::build(&data.all_text(), cfg.vocab_limit)?;
    let mut mc = model_cfg.clone();
    mc.vocab_size = vocab.len();
    let mut model = Model::new(mc, cfg.pretrain.seed)?;
    let mut general = if model.config.uses_memory() {
        Some(build_memory(
            &model,
            chunk_knowledge(&vocab, &data.general, model.config.max_knowledge_len),
        )?)
    } else {
        None
    };
    let corpus: Vec<Vec<u32>> = data
        .general
        .iter()
        .map(|l| vocab.tokenize(l, model.config.max_seq_len))
        .collect();
    let report = pretrain_mlm(&mut model, general.as_mut(), &corpus, &cfg.pretrain)?;
    if let Some(g) = general.as_mut() {
        refresh_index(g, &model)?;
        g.frozen = true;
    }
    Ok(Pretrained {
        data,
        data_seed: cfg.spec.seed,
        vocab,
        model,
        general,
        report,
    })
}

impl Pretrained {
    pub fn general(&self) -> Result<&DpmStore> {
        self.general
            .as_ref()
            .ok_or_else(|| Error::Config("experiment needs a model with a memory layer".into()))
    }

    pub fn num_classes(&self) -> usize {
        self.data.domains[0].class_words.len()
    }

    /// Knowledge entries of domain `i` with ids in its own range.
    pub fn domain_entries(&self, i: usize) -> Vec<KnowledgeEntry> {
        let mut e = chunk_knowledge(&self.vocab, &self.data.domains[i].knowledge, self.model.config.max_knowledge_len);
        offset_ids(&mut e, DOMAIN_ID_BASE * (i as u64 + 1));
        e
    }

    pub fn encode(&self, samples: &[TaskSample]) -> Vec<LabeledSeq> {
        samples
            .iter()
            .map(|s| LabeledSeq {
                tokens: self
                    .vocab
                    .tokenize_pair(&s.text_a, s.text_b.as_deref(), self.model.config.max_seq_len),
                label: s.label,
            })
            .collect()
    }

    /// A frozen store holding `entries`, encoded with the pretrained parameters.
    pub fn store_of(&self, entries: Vec<KnowledgeEntry>) -> Result<DpmStore> {
        let mut s = build_memory(&self.model, entries)?;
        s.frozen = true;
        Ok(s)
    }
}

/// Fresh head on a copy of `model`, fine-tuned on `train` and evaluated on `test`.
pub fn fit_and_evaluate(
    model: &Model,
    num_classes: usize,
    store: Option<&DpmStore>,
    train: &[LabeledSeq],
    test: &[LabeledSeq],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Evaluation, FinetuneReport)> {
    let mut m = model.clone();
    m.add_cls_head(num_classes, seed_mix(seed, 0xC1A5))?;
    let store = if m.config.uses_memory() { store } else { None };
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let fit = finetune(&mut m, store, train, &cfg)?;
    let eval = evaluate_classifier(&m, store, test)?;
    Ok((eval, fit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_by_id_range() {
        assert_eq!(Source::of(0), Source::General);
        assert_eq!(Source::of(999_999), Source::General);
        assert_eq!(Source::of(DOMAIN_ID_BASE * 2 + 5), Source::Domain);
        assert_eq!(Source::of(IN_TASK_ID_BASE), Source::InTask);
    }

    #[test]
    fn sample_sd() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn tally_fractions() {
        let mut t = SourceTally::default();
        t.add(&[vec![1, 2, DOMAIN_ID_BASE], vec![IN_TASK_ID_BASE + 3]]);
        let f = t.fractions();
        assert_eq!(f["general"], 0.5);
        assert_eq!(f["domain"], 0.25);
        assert_eq!(f["in-task"], 0.25);
    }
}
