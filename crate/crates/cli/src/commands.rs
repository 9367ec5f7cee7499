use std::path::{Path, PathBuf};

use plugmem::dpm::{append_store, build_memory, load_memory, replace_with_store, save_memory, DpmStore};
use plugmem::experiments::{
    condition_memory, export_retrieval_heatmap, mean_sd, pretrain_general, run_domain_adaptation, run_in_task,
    run_knowledge_update, run_variant_sweep, AdaptCondition, ExperimentConfig, ExperimentReport, InTaskVariant,
};
use plugmem::model::{load_checkpoint, save_checkpoint, MemoryMode, Model, ModelConfig};
use plugmem::text::io::{read_lines, read_tasks};
use plugmem::text::{chunk_knowledge, offset_ids, Vocab};
use plugmem::train::{evaluate_classifier, finetune, pretrain_mlm, LabeledSeq, TrainConfig};
use plugmem::util::seed_mix;
use plugmem::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::manifest::{io, sibling, RunManifest};

/// Per-invocation context shared by all commands.
pub struct Ctx {
    pub argv: Vec<String>,
    pub manifest: Option<PathBuf>,
    pub threads: usize,
}

impl Ctx {
    fn start(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.argv, self.threads)
    }

    /// Writes the manifest to the `--manifest` path or to `default`.
    fn commit(&self, m: &RunManifest, default: Option<PathBuf>) -> Result<()> {
        match self.manifest.clone().or(default) {
            Some(p) => m.write(&p),
            None => Ok(()),
        }
    }
}

/// Vocabulary metadata written next to every memory file.
#[derive(Serialize, Deserialize)]
struct MemoryMeta {
    vocab_digest: String,
    entries: usize,
    d_model: usize,
}

fn meta_path(memory: &Path) -> PathBuf {
    sibling(memory, "meta.json")
}

fn write_memory(store: &DpmStore, digest: &str, path: &Path) -> Result<()> {
    save_memory(store, path)?;
    let meta = MemoryMeta {
        vocab_digest: digest.to_string(),
        entries: store.len(),
        d_model: store.d_model(),
    };
    let p = meta_path(path);
    std::fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| io(&p, e))
}

/// Loads a memory file and checks its recorded vocabulary digest.
fn read_memory(path: &Path, digest: &str) -> Result<DpmStore> {
    let store = load_memory(path)?;
    let p = meta_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| io(&p, e))?;
    let meta: MemoryMeta = serde_json::from_str(&text)?;
    if meta.vocab_digest != digest {
        return Err(Error::Contract(format!(
            "vocabulary digest mismatch: memory {} has {}, expected {digest}",
            path.display(),
            meta.vocab_digest
        )));
    }
    Ok(store)
}

fn read_checkpoint(path: &Path) -> Result<(Model, Vocab)> {
    let (model, vocab) = load_checkpoint(path)?;
    let vocab = vocab.ok_or_else(|| Error::Contract(format!("checkpoint {} carries no vocabulary", path.display())))?;
    Ok((model, vocab))
}

fn preset_config(preset: Preset, vocab_size: usize) -> ModelConfig {
    match preset {
        Preset::Desk => ModelConfig::desk(vocab_size),
        Preset::Paper => ModelConfig::paper(vocab_size),
    }
}

fn preset_train(preset: Preset) -> TrainConfig {
    match preset {
        Preset::Desk => TrainConfig::default(),
        Preset::Paper => TrainConfig {
            refresh_every: 200,
            mask_rate: 0.15,
            ..TrainConfig::default()
        },
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// Drops wall-clock fields so reports are reproducible.
fn without_timing<T: Serialize>(value: &T) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("seconds");
    }
    Ok(v)
}

fn load_tasks(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<LabeledSeq>> {
    let samples = read_tasks(path)?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("task file {} has no samples", path.display())));
    }
    Ok(samples
        .iter()
        .map(|s| LabeledSeq {
            tokens: vocab.tokenize_pair(&s.text_a, s.text_b.as_deref(), max_len),
            label: s.label,
        })
        .collect())
}

fn optional_memory(model: &Model, path: Option<&Path>, digest: &str) -> Result<Option<DpmStore>> {
    match (model.config.uses_memory(), path) {
        (true, None) => Err(Error::Config("the checkpoint has memory layers; pass --memory".into())),
        (_, Some(p)) => {
            let mut s = read_memory(p, digest)?;
            s.frozen = true;
            Ok(Some(s))
        }
        (false, None) => Ok(None),
    }
}

pub fn init(ctx: &Ctx, a: &InitArgs) -> Result<()> {
    let mut m = ctx.start("init");
    m.input(&a.corpus)?;
    let lines = read_lines(&a.corpus)?;
    let vocab = Vocab::build(&lines, a.vocab_size)?;
    let config = preset_config(a.preset, vocab.len());
    m.config = json!({ "model": config, "vocab_size_limit": a.vocab_size });
    m.seed = Some(a.seed);
    m.output(&a.out);
    ctx.commit(&m, Some(sibling(&a.out, "manifest.json")))?;
    let model = Model::new(config, a.seed)?;
    save_checkpoint(&model, Some(&vocab), &a.out)?;
    println!("vocab {} params {} digest {}", vocab.len(), model.params.count(), vocab.digest());
    Ok(())
}

pub fn build_memory_cmd(ctx: &Ctx, a: &BuildMemoryArgs) -> Result<()> {
    let mut m = ctx.start("build-memory");
    m.input(&a.corpus)?;
    m.input(&a.checkpoint)?;
    let (model, vocab) = read_checkpoint(&a.checkpoint)?;
    let max_len = a.max_knowledge_len.unwrap_or(model.config.max_knowledge_len);
    if max_len == 0 {
        return Err(Error::Config("--max-knowledge-len must be at least 1".into()));
    }
    m.config = json!({ "max_knowledge_len": max_len, "id_offset": a.id_offset });
    m.output(&a.out);
    m.output(&meta_path(&a.out));
    ctx.commit(&m, Some(sibling(&a.out, "manifest.json")))?;
    let lines = read_lines(&a.corpus)?;
    let mut entries = chunk_knowledge(&vocab, &lines, max_len);
    if entries.is_empty() {
        return Err(Error::Contract(format!("corpus {} yields no knowledge entries", a.corpus.display())));
    }
    offset_ids(&mut entries, a.id_offset);
    let store = build_memory(&model, entries)?;
    write_memory(&store, &vocab.digest(), &a.out)?;
    println!("entries {} d_model {}", store.len(), store.d_model());
    Ok(())
}

pub fn pretrain(ctx: &Ctx, a: &PretrainArgs) -> Result<()> {
    let mut m = ctx.start("pretrain");
    m.input(&a.corpus)?;
    m.input(&a.memory)?;
    let lines = read_lines(&a.corpus)?;
    let (mut model, vocab) = match &a.checkpoint {
        Some(p) => {
            m.input(p)?;
            read_checkpoint(p)?
        }
        None => {
            let vocab = Vocab::build(&lines, a.vocab_size)?;
            (Model::new(preset_config(a.preset, vocab.len()), a.seed)?, vocab)
        }
    };
    let mut store = read_memory(&a.memory, &vocab.digest())?;
    let base = preset_train(a.preset);
    let cfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        refresh_every: a.refresh_every.unwrap_or(base.refresh_every),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        lr: a.lr.unwrap_or(base.lr),
        ..base
    };
    cfg.validate()?;
    let report_path = sibling(&a.out, "report.json");
    m.config = json!({ "model": model.config, "train": cfg });
    m.seed = Some(a.seed);
    m.output(&a.out);
    m.output(&report_path);
    if let Some(p) = &a.memory_out {
        m.output(p);
        m.output(&meta_path(p));
    }
    ctx.commit(&m, Some(sibling(&a.out, "manifest.json")))?;
    let corpus: Vec<Vec<u32>> = lines.iter().map(|l| vocab.tokenize(l, model.config.max_seq_len)).collect();
    let uses_memory = model.config.uses_memory();
    let report = pretrain_mlm(&mut model, uses_memory.then_some(&mut store), &corpus, &cfg)?;
    save_checkpoint(&model, Some(&vocab), &a.out)?;
    write_json(&without_timing(&report)?, &report_path)?;
    if let Some(p) = &a.memory_out {
        write_memory(&store, &vocab.digest(), p)?;
    }
    match (report.loss.first(), report.loss.last()) {
        (Some(first), Some(last)) => println!("steps {} loss {first:.4} -> {last:.4}", report.loss.len()),
        _ => println!("steps 0"),
    }
    eprintln!("pretraining took {:.1}s", report.seconds);
    Ok(())
}

pub fn swap_memory(ctx: &Ctx, a: &SwapMemoryArgs) -> Result<()> {
    let mut m = ctx.start("swap-memory");
    m.input(&a.checkpoint)?;
    m.input(&a.memory)?;
    if let Some(b) = &a.base {
        m.input(b)?;
    }
    let (model, vocab) = read_checkpoint(&a.checkpoint)?;
    let digest = vocab.digest();
    let new = read_memory(&a.memory, &digest)?;
    let mode = match a.mode {
        SwapMode::Daa => "daa",
        SwapMode::Dar => "dar",
    };
    m.config = json!({ "mode": mode });
    m.output(&a.out);
    m.output(&meta_path(&a.out));
    ctx.commit(&m, Some(sibling(&a.out, "manifest.json")))?;
    if new.d_model() != model.config.d_model {
        return Err(Error::Dimension(format!(
            "memory width {} differs from model width {}",
            new.d_model(),
            model.config.d_model
        )));
    }
    let store = match (a.mode, &a.base) {
        (SwapMode::Daa, None) => return Err(Error::Config("daa needs --base".into())),
        (SwapMode::Daa, Some(b)) => {
            let mut base = read_memory(b, &digest)?;
            append_store(&mut base, &new)?;
            base
        }
        (SwapMode::Dar, Some(b)) => {
            let mut base = read_memory(b, &digest)?;
            replace_with_store(&mut base, &new)?;
            base
        }
        (SwapMode::Dar, None) => new,
    };
    write_memory(&store, &digest, &a.out)?;
    println!("size {}", store.len());
    Ok(())
}

pub fn finetune_cmd(ctx: &Ctx, a: &FinetuneArgs) -> Result<()> {
    let mut m = ctx.start("finetune");
    m.input(&a.checkpoint)?;
    m.input(&a.train)?;
    if let Some(p) = &a.memory {
        m.input(p)?;
    }
    let (mut model, vocab) = read_checkpoint(&a.checkpoint)?;
    let store = optional_memory(&model, a.memory.as_deref(), &vocab.digest())?;
    let data = load_tasks(&a.train, &vocab, model.config.max_seq_len)?;
    let largest = data.iter().map(|e| e.label).max().unwrap_or(0);
    let classes = a.num_classes.unwrap_or(largest + 1);
    if largest >= classes {
        return Err(Error::Contract(format!("label {largest} does not fit {classes} classes")));
    }
    let cfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        lr: a.lr,
        batch_size: a.batch_size,
        freeze: a.freeze.clone(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let report_path = sibling(&a.out, "report.json");
    m.config = json!({ "train": cfg, "num_classes": classes });
    m.seed = Some(a.seed);
    m.output(&a.out);
    m.output(&report_path);
    ctx.commit(&m, Some(sibling(&a.out, "manifest.json")))?;
    match model.num_classes() {
        Some(c) if c == classes => {}
        Some(c) => {
            return Err(Error::Contract(format!("checkpoint head has {c} classes, data needs {classes}")));
        }
        None => model.add_cls_head(classes, seed_mix(a.seed, 0xC1A5))?,
    }
    let report = finetune(&mut model, store.as_ref(), &data, &cfg)?;
    save_checkpoint(&model, Some(&vocab), &a.out)?;
    write_json(&report, &report_path)?;
    println!("steps {} final loss {:.4}", report.loss.len(), report.loss.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let mut m = ctx.start("eval");
    m.input(&a.checkpoint)?;
    m.input(&a.tasks)?;
    if let Some(p) = &a.memory {
        m.input(p)?;
    }
    let (model, vocab) = read_checkpoint(&a.checkpoint)?;
    let store = optional_memory(&model, a.memory.as_deref(), &vocab.digest())?;
    let data = load_tasks(&a.tasks, &vocab, model.config.max_seq_len)?;
    m.output(&a.out);
    ctx.commit(&m, Some(sibling(&a.out, "manifest.json")))?;
    let e = evaluate_classifier(&model, store.as_ref(), &data)?;
    write_json(&json!({ "metrics": e.metrics, "predictions": e.predictions }), &a.out)?;
    println!("accuracy {:.4} macro_f1 {:.4}", e.metrics.accuracy, e.metrics.macro_f1);
    Ok(())
}

pub fn retrieve(ctx: &Ctx, a: &RetrieveArgs) -> Result<()> {
    let mut m = ctx.start("retrieve");
    m.input(&a.checkpoint)?;
    m.input(&a.memory)?;
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let (mut model, vocab) = read_checkpoint(&a.checkpoint)?;
    let store = read_memory(&a.memory, &vocab.digest())?;
    m.config = json!({ "n": a.n, "layer": a.layer });
    ctx.commit(&m, None)?;
    if !model.config.uses_memory() {
        return Err(Error::Config("the checkpoint has no memory layer".into()));
    }
    model.config.top_n = a.n;
    let tokens = vocab.tokenize(&a.query, model.config.max_seq_len);
    let s = model.session();
    let out = model.forward(&s, &[tokens], Some(&store), MemoryMode::Cached)?;
    let (layer, results) = match a.layer {
        Some(l) => out
            .retrievals
            .iter()
            .find(|(i, _)| *i == l)
            .ok_or_else(|| Error::Config(format!("layer {l} is not a memory layer")))?,
        None => &out.retrievals[0],
    };
    let r = &results[0];
    println!("layer {layer}");
    for (&idx, &score) in r.indices.iter().zip(&r.scores) {
        let tokens = &store.entries()[idx].tokens;
        let text = vocab.detokenize(&tokens[..tokens.len().min(12)]);
        println!("{idx}\t{score:.6}\t{text}");
    }
    Ok(())
}

fn experiment_config(c: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            let mut base = serde_json::to_value(ExperimentConfig::default())?;
            merge(&mut base, serde_json::from_str(&text)?);
            serde_json::from_value(base)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(n) = c.seeds {
        cfg.seeds = (0..n).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Overlays `patch` onto `base`, object by object.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Runs `run` once per seed on up to `threads` threads and pools the
/// per-seed reports by condition.
fn per_seed<F>(cfg: &ExperimentConfig, threads: usize, run: F) -> Result<Vec<ExperimentReport>>
where
    F: Fn(&ExperimentConfig) -> Result<Vec<ExperimentReport>> + Sync,
{
    let configs: Vec<ExperimentConfig> = cfg
        .seeds
        .iter()
        .map(|&s| ExperimentConfig {
            seeds: vec![s],
            ..cfg.clone()
        })
        .collect();
    let mut runs = Vec::with_capacity(configs.len());
    for group in configs.chunks(threads.max(1)) {
        let results: Vec<Result<Vec<ExperimentReport>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = group.iter().map(|c| scope.spawn(|| run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    let mut pooled = runs[0].clone();
    for (j, r) in pooled.iter_mut().enumerate() {
        let parts: Vec<&ExperimentReport> = runs.iter().map(|run| &run[j]).collect();
        r.seeds = parts.iter().flat_map(|p| p.seeds.clone()).collect();
        r.metrics = parts.iter().flat_map(|p| p.metrics.clone()).collect();
        (r.mean, r.sd) = mean_sd(&r.metrics);
        let k = parts.len() as f64;
        for (source, f) in r.retrieval_sources.iter_mut() {
            *f = parts.iter().map(|p| p.retrieval_sources.get(source).copied().unwrap_or(0.0)).sum::<f64>() / k;
        }
        for (key, v) in r.extras.iter_mut() {
            if v.is_f64() {
                let mean = parts.iter().filter_map(|p| p.extras.get(key).and_then(Value::as_f64)).sum::<f64>() / k;
                *v = json!(mean);
            }
        }
    }
    Ok(pooled)
}

pub fn experiment(ctx: &Ctx, e: &ExperimentCommand) -> Result<()> {
    let c = e.common();
    let mut m = ctx.start(&format!("experiment {}", e.name()));
    if let Some(p) = &c.config {
        m.input(p)?;
    }
    let cfg = experiment_config(c)?;
    let variants = match e {
        ExperimentCommand::InTask { variant: Some(v), .. } => vec![InTaskVariant::parse(v)?],
        _ => vec![InTaskVariant::Concate, InTaskVariant::Tagged, InTaskVariant::Prompting],
    };
    std::fs::create_dir_all(&c.out).map_err(|err| io(&c.out, err))?;
    let mut extra = json!({});
    match e {
        ExperimentCommand::KnowledgeUpdate { fractions, .. } => extra = json!({ "fractions": fractions }),
        ExperimentCommand::InTask { .. } => {
            extra = json!({ "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>() })
        }
        ExperimentCommand::Heatmap { domain, .. } => extra = json!({ "domain": domain }),
        _ => {}
    }
    m.config = json!({ "experiment": cfg, "options": extra, "parallel_seeds": c.parallel_seeds });
    m.seed = Some(cfg.pretrain.seed);
    let reports_path = c.out.join("reports.json");
    let heatmap_path = c.out.join("heatmap.csv");
    if let ExperimentCommand::Heatmap { .. } = e {
        m.output(&heatmap_path);
    } else {
        m.output(&reports_path);
    }
    ctx.commit(&m, Some(c.out.join("manifest.json")))?;

    let threads = if c.parallel_seeds { ctx.threads } else { 1 };
    let run = |f: &(dyn Fn(&ExperimentConfig) -> Result<Vec<ExperimentReport>> + Sync)| {
        if c.parallel_seeds {
            per_seed(&cfg, threads, f)
        } else {
            f(&cfg)
        }
    };
    let reports = match e {
        ExperimentCommand::DomainAdaptation(_) => run(&run_domain_adaptation)?,
        ExperimentCommand::KnowledgeUpdate { fractions, .. } => run(&|c| run_knowledge_update(c, fractions))?,
        ExperimentCommand::InTask { .. } => run(&|c| variants.iter().map(|&v| run_in_task(c, v)).collect())?,
        ExperimentCommand::Sweep(_) => run(&run_variant_sweep)?,
        ExperimentCommand::Heatmap { domain, .. } => {
            let pre = pretrain_general(&cfg, &cfg.model)?;
            let d = pre
                .data
                .domains
                .get(*domain)
                .ok_or_else(|| Error::Config(format!("no domain {domain}")))?;
            let store = condition_memory(&pre, AdaptCondition::Dar, *domain)?;
            let samples: Vec<Vec<u32>> = pre.encode(&d.test).into_iter().map(|s| s.tokens).collect();
            export_retrieval_heatmap(&pre.model, &store, &samples, &heatmap_path)?;
            println!("heatmap {}", heatmap_path.display());
            return Ok(());
        }
    };
    write_json(&reports, &reports_path)?;
    for r in &reports {
        println!("{}\tmean {:.4}\tsd {:.4}", r.condition, r.mean, r.sd);
    }
    Ok(())
}
