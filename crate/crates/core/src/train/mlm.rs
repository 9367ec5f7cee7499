use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Precision, TrainConfig};
use super::metrics::argmax;
use super::optim::{adam_step, first_nonfinite, AdamState};
use crate::dpm::{refresh_index, DpmStore};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, MemoryMode, Model, Session};
use crate::numerics::Var;
use crate::text::{mask_row, row_seed};
use crate::util::{rng, seed_mix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
    pub acc: Vec<f64>,
    pub refresh_steps: Vec<usize>,
    pub param_hash: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Fraction of labeled positions predicted correctly.
    pub acc: f64,
    /// Corpus indices of the batch rows.
    pub batch: Vec<usize>,
    /// Entry ids retrieved for each row, over all memory layers.
    pub retrieved: Vec<Vec<u64>>,
}

/// Example order: a fresh seeded shuffle per epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchSampler { n, seed, epoch: None }
    }

    /// Example indices of batch `step` with `batch_size` rows.
    pub fn batch(&mut self, step: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|j| {
                let global = step * batch_size + j;
                let epoch = global / self.n;
                if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.n).collect();
                    perm.shuffle(&mut rng(seed_mix(self.seed, epoch as u64)));
                    self.epoch = Some((epoch, perm));
                }
                self.epoch.as_ref().unwrap().1[global % self.n]
            })
            .collect()
    }
}

/// Graph handles of one masked-LM loss evaluation.
pub struct MlmLoss {
    pub loss: Var,
    /// Logits of the labeled rows only.
    pub logits: Var,
    pub labels: Vec<i64>,
    pub out: ForwardOutput,
}

/// Cross-entropy over the rows of `inputs` whose target is not negative,
/// with retrieval on the cached keys and recomputation of the selected
/// entries.
pub fn mlm_loss(model: &Model, s: &Session, inputs: &[Vec<u32>], targets: &[i64], store: Option<&DpmStore>) -> Result<MlmLoss> {
    let out = model.forward(s, inputs, store, MemoryMode::Recompute)?;
    let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r] >= 0).collect();
    if rows.is_empty() {
        return Err(Error::Contract("batch has no labeled positions".into()));
    }
    let labels: Vec<i64> = rows.iter().map(|&r| targets[r]).collect();
    let picked = s.tape.gather_rows(out.hidden, &rows)?;
    let logits = model.mlm_logits(s, picked)?;
    let loss = s.tape.cross_entropy(logits, &labels)?;
    Ok(MlmLoss {
        loss,
        logits,
        labels,
        out,
    })
}

/// Masked language model training with stale-index retrieval.
pub struct MlmTrainer {
    pub cfg: TrainConfig,
    sampler: BatchSampler,
    adam: AdamState,
    pub step: usize,
}

impl MlmTrainer {
    pub fn new(model: &Model, corpus_len: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus_len == 0 {
            return Err(Error::Contract("empty training corpus".into()));
        }
        Ok(MlmTrainer {
            sampler: BatchSampler::new(corpus_len, seed_mix(cfg.seed, 0x5A3D)),
            adam: AdamState::new(&model.params),
            step: 0,
            cfg,
        })
    }

    /// Masked inputs and labels of example `index`; the same on every epoch.
    pub fn masked_example(&self, corpus: &[Vec<u32>], index: usize, vocab_size: usize) -> Result<(Vec<u32>, Vec<i64>)> {
        mask_row(&corpus[index], self.cfg.mask_rate, vocab_size, row_seed(self.cfg.seed, index as u64))
    }

    /// One optimizer step. The memory is read through its cached keys and
    /// refreshed in full when the step count reaches a multiple of
    /// `refresh_every`; the return flag reports that.
    pub fn step(&mut self, model: &mut Model, mut store: Option<&mut DpmStore>, corpus: &[Vec<u32>]) -> Result<(StepStats, bool)> {
        let step = self.step;
        let idx = self.sampler.batch(step, self.cfg.batch_size);
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::new();
        for &i in &idx {
            let (inp, lab) = self.masked_example(corpus, i, model.config.vocab_size)?;
            inputs.push(inp);
            targets.extend(lab);
        }
        let (stats, mut grads) = {
            let s = Session::training(&model.params, model.config.dropout, seed_mix(self.cfg.seed, step as u64 + 1));
            let MlmLoss {
                loss,
                logits,
                labels,
                out,
            } = mlm_loss(model, &s, &inputs, &targets, store.as_deref())?;
            let value = s.tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerics {
                    step,
                    batch: step,
                    msg: format!("loss is {value} on examples {idx:?}"),
                });
            }
            let v = model.config.vocab_size;
            let data = s.tape.data(logits);
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(r, &l)| argmax(&data[r * v..(r + 1) * v]) == l as usize)
                .count();
            drop(data);
            let grads = s.param_grads(&s.tape.backward(loss)?);
            let acc = correct as f64 / labels.len() as f64;
            let retrieved = (0..idx.len())
                .map(|i| {
                    out.retrievals
                        .iter()
                        .flat_map(|(_, r)| r[i].entry_ids.iter().copied())
                        .collect()
                })
                .collect();
            (
                StepStats {
                    loss: value,
                    acc,
                    batch: idx.clone(),
                    retrieved,
                },
                grads,
            )
        };
        grads.retain(|(id, _)| !self.cfg.is_frozen(model.params.name(*id)));
        adam_step(&mut model.params, &mut grads, &mut self.adam, &self.cfg.adam());
        if let Some(name) = first_nonfinite(&model.params, &grads) {
            return Err(Error::Numerics {
                step,
                batch: step,
                msg: format!("parameter {name} is not finite after the update"),
            });
        }
        if self.cfg.precision == Precision::F32 {
            model.params.round_to_f32();
        }
        self.step += 1;
        let mut refreshed = false;
        if let Some(st) = store.as_deref_mut() {
            if self.step % self.cfg.refresh_every == 0 {
                refresh_index(st, model)?;
                refreshed = true;
            }
        }
        Ok((stats, refreshed))
    }
}

/// Runs `cfg.steps` masked-LM steps over tokenized `corpus`, updating
/// `model` in place and refreshing `store` on schedule.
pub fn pretrain_mlm(model: &mut Model, mut store: Option<&mut DpmStore>, corpus: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    if model.config.uses_memory() && store.is_none() {
        return Err(Error::Config("memory layers need an attached memory".into()));
    }
    let mut trainer = MlmTrainer::new(model, corpus.len(), cfg.clone())?;
    let mut report = TrainReport {
        loss: Vec::with_capacity(cfg.steps),
        acc: Vec::with_capacity(cfg.steps),
        refresh_steps: Vec::new(),
        param_hash: String::new(),
        seconds: 0.0,
    };
    for _ in 0..cfg.steps {
        let (stats, refreshed) = trainer.step(model, store.as_deref_mut(), corpus)?;
        report.loss.push(stats.loss);
        report.acc.push(stats.acc);
        if refreshed {
            report.refresh_steps.push(trainer.step);
        }
    }
    report.param_hash = model.params.hash();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
