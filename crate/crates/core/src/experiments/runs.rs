use std::time::Instant;

use rand::seq::SliceRandom;
use serde_json::json;

use super::harness::{
    fit_and_evaluate, pretrain_general, report, ExperimentConfig, ExperimentReport, Pretrained, Source, SourceTally,
    IN_TASK_ID_BASE,
};
use crate::dpm::{daa_append, grow_fraction, DpmStore};
use crate::error::{Error, Result};
use crate::model::{top_layers, LayerKind};
use crate::text::{chunk_knowledge, concat_sample, knowledge_prompt, offset_ids, tag_input, tag_sample, TaskSample};
use crate::util::{rng, seed_mix};

/// Memory conditions of the domain-adaptation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptCondition {
    /// General memory as pretrained.
    Original,
    /// General memory plus the task's domain.
    Daa,
    /// Domain memory only.
    Dar,
    /// Memory of an unrelated domain only.
    NotDaa,
}

impl AdaptCondition {
    pub const ALL: [AdaptCondition; 4] = [
        AdaptCondition::Original,
        AdaptCondition::Daa,
        AdaptCondition::Dar,
        AdaptCondition::NotDaa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptCondition::Original => "original",
            AdaptCondition::Daa => "daa",
            AdaptCondition::Dar => "dar",
            AdaptCondition::NotDaa => "not-daa",
        }
    }
}

/// The memory each condition plugs in for domain `i`.
pub fn condition_memory(pre: &Pretrained, cond: AdaptCondition, i: usize) -> Result<DpmStore> {
    let general = pre.general()?;
    match cond {
        AdaptCondition::Original => Ok(general.clone()),
        AdaptCondition::Daa => {
            let mut s = general.clone();
            daa_append(&mut s, pre.domain_entries(i), &pre.model)?;
            Ok(s)
        }
        AdaptCondition::Dar => pre.store_of(pre.domain_entries(i)),
        AdaptCondition::NotDaa => pre.store_of(pre.domain_entries(pre.data.domains[i].irrelevant)),
    }
}

/// Fine-tunes and evaluates every domain task under `memory(i)` for each
/// seed; the metric is test accuracy averaged over domains.
fn run_condition(
    pre: &Pretrained,
    cfg: &ExperimentConfig,
    name: &str,
    memory: impl Fn(usize) -> Result<Option<DpmStore>>,
) -> Result<ExperimentReport> {
    let domains = &pre.data.domains;
    let mut per_seed = vec![0.0; cfg.seeds.len()];
    let mut tally = SourceTally::default();
    let mut sizes = Vec::with_capacity(domains.len());
    for (i, d) in domains.iter().enumerate() {
        let store = memory(i)?;
        sizes.push(store.as_ref().map_or(0, |s| s.len()));
        let train = pre.encode(&d.train);
        let test = pre.encode(&d.test);
        for (k, &seed) in cfg.seeds.iter().enumerate() {
            let (eval, _) = fit_and_evaluate(
                &pre.model,
                pre.num_classes(),
                store.as_ref(),
                &train,
                &test,
                &cfg.finetune,
                seed,
            )?;
            per_seed[k] += eval.metrics.accuracy / domains.len() as f64;
            tally.add(&eval.retrieved);
        }
    }
    let mut r = report(name, &cfg.seeds, per_seed, &tally);
    r.extras.insert("memory_size".into(), json!(sizes));
    r.extras.insert("pretrained_param_hash".into(), json!(pre.model.params.hash()));
    Ok(r)
}

/// Original, DAA, DAR and ¬DAA from one pretrained model, in that order.
pub fn run_domain_adaptation(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let pre = pretrain_general(cfg, &cfg.model)?;
    domain_adaptation_from(&pre, cfg)
}

pub fn domain_adaptation_from(pre: &Pretrained, cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    check_domains(pre)?;
    AdaptCondition::ALL
        .iter()
        .map(|&c| run_condition(pre, cfg, c.name(), |i| condition_memory(pre, c, i).map(Some)))
        .collect()
}

fn check_domains(pre: &Pretrained) -> Result<()> {
    if pre.data.domains.len() < 2 {
        return Err(Error::Spec("domain adaptation needs at least two domains".into()));
    }
    Ok(())
}

/// DAR memory grown to each fraction of the domain knowledge.
pub fn run_knowledge_update(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<ExperimentReport>> {
    let pre = pretrain_general(cfg, &cfg.model)?;
    knowledge_update_from(&pre, cfg, fractions)
}

pub fn knowledge_update_from(pre: &Pretrained, cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<ExperimentReport>> {
    if fractions.is_empty() || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("fractions must be non-empty and strictly ascending".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Contract(format!("fraction {f} outside (0, 1]")));
    }
    let full: Vec<DpmStore> = (0..pre.data.domains.len())
        .map(|i| condition_memory(pre, AdaptCondition::Dar, i))
        .collect::<Result<_>>()?;
    fractions
        .iter()
        .map(|&f| {
            let mut r = run_condition(pre, cfg, &format!("fraction-{f}"), |i| grow_fraction(&full[i], f).map(Some))?;
            r.extras.insert("fraction".into(), json!(f));
            Ok(r)
        })
        .collect()
}

/// How labeled training samples are written into memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InTaskVariant {
    Concate,
    Tagged,
    Prompting,
}

impl InTaskVariant {
    pub const ALL: [InTaskVariant; 3] = [InTaskVariant::Concate, InTaskVariant::Tagged, InTaskVariant::Prompting];

    pub fn name(self) -> &'static str {
        match self {
            InTaskVariant::Concate => "concate",
            InTaskVariant::Tagged => "tagged",
            InTaskVariant::Prompting => "prompting",
        }
    }

    pub fn parse(s: &str) -> Result<InTaskVariant> {
        InTaskVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown in-task variant {s}")))
    }
}

/// Share of a domain's training samples written into memory; the rest are
/// held out for evaluation.
pub const IN_TASK_MEMORY_SHARE: f64 = 0.7;

/// Splits the training samples of domain `i` into a memory part and a
/// held-out part. Entities recur across the two.
pub fn in_task_split(pre: &Pretrained, i: usize) -> (Vec<TaskSample>, Vec<TaskSample>) {
    let mut samples = pre.data.domains[i].train.clone();
    samples.shuffle(&mut rng(seed_mix(pre.data_seed, 0x1A5C + i as u64)));
    let cut = (samples.len() as f64 * IN_TASK_MEMORY_SHARE).round() as usize;
    let held = samples.split_off(cut);
    (samples, held)
}

/// Memory text of each sample under `variant`.
pub fn in_task_texts(pre: &Pretrained, i: usize, variant: InTaskVariant, samples: &[TaskSample]) -> Result<Vec<String>> {
    match variant {
        InTaskVariant::Concate => Ok(samples.iter().map(concat_sample).collect()),
        InTaskVariant::Tagged => Ok(samples.iter().map(tag_sample).collect()),
        InTaskVariant::Prompting => {
            let templates: Vec<String> = pre.data.domains[i]
                .class_words
                .iter()
                .map(|w| format!("{{A}} is a kind of {w} ."))
                .collect();
            samples.iter().map(|s| knowledge_prompt(s, &templates)).collect()
        }
    }
}

/// General memory plus the transformed training samples, fine-tuned on the
/// same samples and evaluated on held-out samples of the same task.
pub fn run_in_task(cfg: &ExperimentConfig, variant: InTaskVariant) -> Result<ExperimentReport> {
    let pre = pretrain_general(cfg, &cfg.model)?;
    in_task_from(&pre, cfg, variant)
}

pub fn in_task_from(pre: &Pretrained, cfg: &ExperimentConfig, variant: InTaskVariant) -> Result<ExperimentReport> {
    let domains = pre.data.domains.len();
    let mut per_seed = vec![0.0; cfg.seeds.len()];
    let mut tally = SourceTally::default();
    let mut growth = Vec::with_capacity(domains);
    for i in 0..domains {
        let (mem_part, held) = in_task_split(pre, i);
        let texts = in_task_texts(pre, i, variant, &mem_part)?;
        let mut entries = chunk_knowledge(&pre.vocab, &texts, pre.model.config.max_knowledge_len);
        offset_ids(&mut entries, IN_TASK_ID_BASE);
        let mut store = pre.general()?.clone();
        let before = store.len();
        daa_append(&mut store, entries, &pre.model)?;
        growth.push(store.len() - before);
        let inputs = |s: &[TaskSample]| -> Vec<TaskSample> {
            match variant {
                InTaskVariant::Tagged => s.iter().map(tag_input).collect(),
                _ => s.to_vec(),
            }
        };
        let train = pre.encode(&inputs(&mem_part));
        let test = pre.encode(&inputs(&held));
        for (k, &seed) in cfg.seeds.iter().enumerate() {
            let (eval, _) =
                fit_and_evaluate(&pre.model, pre.num_classes(), Some(&store), &train, &test, &cfg.finetune, seed)?;
            per_seed[k] += eval.metrics.accuracy / domains as f64;
            tally.add(&eval.retrieved);
        }
    }
    let mut r = report(variant.name(), &cfg.seeds, per_seed, &tally);
    r.extras.insert("in_task_hit_rate".into(), json!(tally.fraction(Source::InTask)));
    r.extras.insert("memory_growth".into(), json!(growth));
    Ok(r)
}

/// Layer layouts of the architecture sweep.
pub fn sweep_layouts(n_layers: usize) -> Vec<(String, Vec<LayerKind>)> {
    vec![
        ("dpm-last1".into(), top_layers(n_layers, 1, LayerKind::Dpm)),
        ("dpm-last2".into(), top_layers(n_layers, 2.min(n_layers), LayerKind::Dpm)),
        ("dpm-all".into(), vec![LayerKind::Dpm; n_layers]),
        ("fuse-last1".into(), top_layers(n_layers, 1, LayerKind::Fuse)),
        ("standard".into(), vec![LayerKind::Standard; n_layers]),
    ]
}

pub const SWEEP_TOP_N: [usize; 4] = [1, 3, 5, 10];

/// Every layout in [`sweep_layouts`] crossed with [`SWEEP_TOP_N`], each
/// pretrained once and evaluated with the domain memory. Layouts without
/// memory are run once. Latency fields are wall-clock measurements.
pub fn run_variant_sweep(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let mut out = Vec::new();
    for (layout, kinds) in sweep_layouts(cfg.sweep_layers) {
        let model_cfg = cfg.model.clone().with_layer_kinds(kinds.clone());
        let pre = pretrain_general(cfg, &model_cfg)?;
        let memory_layers = kinds.iter().filter(|k| k.uses_memory()).count();
        let top_ns: &[usize] = if memory_layers == 0 { &[0] } else { &SWEEP_TOP_N };
        for &n in top_ns {
            let mut variant = pre.clone();
            if n > 0 {
                variant.model.config.top_n = n;
            }
            let name = if n > 0 { format!("{layout}-top{n}") } else { layout.clone() };
            let started = Instant::now();
            let mut r = run_condition(&variant, cfg, &name, |i| {
                if memory_layers == 0 {
                    Ok(None)
                } else {
                    condition_memory(&variant, AdaptCondition::Dar, i).map(Some)
                }
            })?;
            r.extras.insert("layout".into(), json!(layout));
            r.extras.insert("top_n".into(), json!(n));
            r.extras.insert("memory_layers".into(), json!(memory_layers));
            r.extras
                .insert("seconds".into(), json!(started.elapsed().as_secs_f64()));
            r.extras.insert(
                "latency_ms_per_example".into(),
                json!(retrieval_latency_ms(&variant, memory_layers)?),
            );
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean wall time of an inference forward pass over the first domain's test
/// inputs, per example.
fn retrieval_latency_ms(pre: &Pretrained, memory_layers: usize) -> Result<f64> {
    let d = &pre.data.domains[0];
    let inputs: Vec<Vec<u32>> = pre.encode(&d.test).into_iter().map(|e| e.tokens).collect();
    let store = if memory_layers > 0 {
        Some(condition_memory(pre, AdaptCondition::Dar, 0)?)
    } else {
        None
    };
    let started = Instant::now();
    for chunk in inputs.chunks(32) {
        let s = pre.model.session();
        pre.model.forward(&s, chunk, store.as_ref(), crate::model::MemoryMode::Cached)?;
    }
    Ok(started.elapsed().as_secs_f64() * 1e3 / inputs.len() as f64)
}
