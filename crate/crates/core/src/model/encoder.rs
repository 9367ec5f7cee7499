use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerKind, ModelConfig, LN_EPS};
use super::layers::{
    attentive_pooling, feed_forward, knowledge_attention, linear, self_attention, AttentionVars, FfnActivation,
    FfnVars,
};
use super::params::{filled, identity, uniform, ParamId, ParamSet};
use crate::dpm::{retrieve, DpmStore, RetrievalResult};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::util::rng;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct PoolingIds {
    query: ParamId,
    proj: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    attn: [ParamId; 8],
    ln1: NormIds,
    ffn: Option<FfnIds>,
    query_pool: Option<PoolingIds>,
    ln2: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct KnowledgeIds {
    pool: PoolingIds,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    vk: ParamId,
}

#[derive(Clone, Debug)]
struct ModelIds {
    tok: ParamId,
    pos: ParamId,
    emb_ln: NormIds,
    layers: Vec<LayerIds>,
    knowledge: Option<KnowledgeIds>,
    cls: Option<(ParamId, ParamId)>,
}

/// How Dpm and Fuse layers obtain the key and value rows they attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Select on cached keys, then re-encode the selected entries on the tape.
    Recompute,
    /// Select and attend on the cached rows; no gradient reaches the memory.
    Cached,
}

/// Encoder parameters plus the optional classification head.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ModelIds,
    ffn_activation: FfnActivation,
}

/// Parameters bound to one tape for a single forward/backward pass.
pub struct Session<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    vars: RefCell<Vec<Option<Var>>>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Session {
            tape: Tape::new(),
            params,
            vars: RefCell::new(vec![None; params.len()]),
            dropout: None,
        }
    }

    /// Session that applies dropout with probability `p`.
    pub fn training(params: &'a ParamSet, p: f64, seed: u64) -> Self {
        let mut s = Session::new(params);
        if p > 0.0 {
            s.dropout = Some((p, RefCell::new(rng(seed))));
        }
        s
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id));
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Parameter gradients from `grads`, in registration order. Parameters
    /// never touched in this session are omitted.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g.to_vec())))
            .collect()
    }

    fn dropout(&self, x: Var) -> Result<Var> {
        let Some((p, rng)) = &self.dropout else {
            return Ok(x);
        };
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mut r = rng.borrow_mut();
        let mask = (0..n).map(|_| if r.gen::<f64>() < *p { 0.0 } else { keep }).collect();
        let m = self.tape.constant(shape, mask)?;
        self.tape.mul(x, m)
    }
}

/// Hidden states of a batch laid out as stacked rows.
pub struct ForwardOutput {
    /// `[total_rows×d_model]`.
    pub hidden: Var,
    /// Start row of each sequence, plus the total row count at the end.
    pub offsets: Vec<usize>,
    /// Per memory layer: its index and one result per sequence.
    pub retrievals: Vec<(usize, Vec<RetrievalResult>)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut r = rng(seed);
        let d = config.d_model;
        let mut p = ParamSet::new();
        let tok = p.add("emb.token", uniform(&mut r, &[config.vocab_size, d], INIT_STD));
        let pos = p.add("emb.position", uniform(&mut r, &[position_rows(&config), d], INIT_STD));
        let emb_ln = add_norm(&mut p, "emb.ln", d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, kind) in config.layer_kinds.iter().enumerate() {
            let pre = format!("layer.{i}");
            let mut attn = Vec::with_capacity(8);
            for name in ["q", "k", "v", "o"] {
                attn.push(p.add(format!("{pre}.attn.w{name}"), uniform(&mut r, &[d, d], INIT_STD)));
                attn.push(p.add(format!("{pre}.attn.b{name}"), Tensor::zeros(&[d])));
            }
            let ln1 = add_norm(&mut p, &format!("{pre}.ln1"), d);
            let ffn = kind.has_ffn().then(|| FfnIds {
                w1: p.add(format!("{pre}.ffn.w1"), uniform(&mut r, &[config.d_ffn, d], INIT_STD)),
                b1: p.add(format!("{pre}.ffn.b1"), Tensor::zeros(&[config.d_ffn])),
                w2: p.add(format!("{pre}.ffn.w2"), uniform(&mut r, &[config.d_ffn, d], INIT_STD)),
                b2: p.add(format!("{pre}.ffn.b2"), Tensor::zeros(&[d])),
            });
            let query_pool = kind
                .uses_memory()
                .then(|| add_pooling(&mut p, &mut r, &format!("{pre}.query_pool"), d));
            let ln2 = add_norm(&mut p, &format!("{pre}.ln2"), d);
            layers.push(LayerIds {
                attn: attn.try_into().expect("eight attention tensors"),
                ln1,
                ffn,
                query_pool,
                ln2,
            });
        }
        let knowledge = config.uses_memory().then(|| KnowledgeIds {
            pool: add_pooling(&mut p, &mut r, "knowledge.pool", d),
            wk: p.add("knowledge.wk", identity(d, 1.0 / INIT_STD)),
            bk: p.add("knowledge.bk", Tensor::zeros(&[d])),
            wv: p.add("knowledge.wv", identity(d, 1.0 / INIT_STD)),
            vk: p.add("knowledge.vk", Tensor::zeros(&[d])),
        });
        Ok(Model {
            config,
            params: p,
            ids: ModelIds {
                tok,
                pos,
                emb_ln,
                layers,
                knowledge,
                cls: None,
            },
            ffn_activation: FfnActivation::Gelu,
        })
    }

    /// Rebuilds a model around loaded parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        let mut reference = Model::new(config, 0)?;
        let num_classes = params.id("cls.bias").map(|id| params.get(id).numel());
        if let Some(c) = num_classes {
            reference.add_cls_head(c, 0)?;
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in reference.params.iter().zip(params.iter()) {
            if name != got_name || want.shape != got.shape {
                return Err(Error::Config(format!(
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    got.shape, want.shape
                )));
            }
        }
        reference.params = params;
        Ok(reference)
    }

    /// Adds (or re-initializes) a linear head over the `[CLS]` row.
    pub fn add_cls_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("classification head needs at least one class".into()));
        }
        let d = self.config.d_model;
        let mut r = rng(seed);
        let w = uniform(&mut r, &[num_classes, d], INIT_STD);
        match self.ids.cls {
            Some((wid, bid)) if self.params.get(bid).numel() == num_classes => {
                *self.params.get_mut(wid) = w.with_grad();
                *self.params.get_mut(bid) = Tensor::zeros(&[num_classes]).with_grad();
            }
            Some(_) => return Err(Error::Config("model already has a head of another width".into())),
            None => {
                let wid = self.params.add("cls.weight", w);
                let bid = self.params.add("cls.bias", Tensor::zeros(&[num_classes]));
                self.ids.cls = Some((wid, bid));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.ids.cls.map(|(_, b)| self.params.get(b).numel())
    }

    /// Swaps the FFN activation; `SoftmaxRows` is meant for tests.
    pub fn set_ffn_activation(&mut self, act: FfnActivation) {
        self.ffn_activation = act;
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.params)
    }

    /// Number of scalars owned by layer `layer`.
    pub fn layer_param_count(&self, layer: usize) -> usize {
        let prefix = format!("layer.{layer}.");
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Names of the knowledge-encoder parameters, empty without memory layers.
    pub fn knowledge_param_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("knowledge."))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32], limit: usize, what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract(format!("empty {what}")));
        }
        if tokens.len() > limit {
            return Err(Error::Contract(format!("{what} of {} tokens exceeds {limit}", tokens.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn knowledge_ids(&self) -> Result<KnowledgeIds> {
        self.ids
            .knowledge
            .ok_or_else(|| Error::Config("model has no memory layers and no knowledge encoder".into()))
    }

    /// Pooled `E_tok + E_pos` rows of one knowledge entry, `[1×d_model]`.
    pub fn encode_knowledge(&self, s: &Session, tokens: &[u32]) -> Result<Var> {
        let k = self.knowledge_ids()?;
        self.check_tokens(tokens, self.config.max_knowledge_len, "knowledge entry")?;
        let t = &s.tape;
        let idx: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let tok = t.gather_rows(s.param(self.ids.tok), &idx)?;
        let pos = t.slice_rows(s.param(self.ids.pos), 0, idx.len())?;
        let h = t.add(tok, pos)?;
        attentive_pooling(t, h, s.param(k.pool.query), s.param(k.pool.proj))
    }

    /// `W_k·h + b_k` for each row of `h`.
    pub fn project_key(&self, s: &Session, h: Var) -> Result<Var> {
        let k = self.knowledge_ids()?;
        linear(&s.tape, h, s.param(k.wk), Some(s.param(k.bk)))
    }

    /// `W_v·h + v_k` for each row of `h`.
    pub fn project_value(&self, s: &Session, h: Var) -> Result<Var> {
        let k = self.knowledge_ids()?;
        linear(&s.tape, h, s.param(k.wv), Some(s.param(k.vk)))
    }

    /// Stacked keys and values of `entries`, `[n×d_model]` each.
    pub fn encode_entries(&self, s: &Session, entries: &[&[u32]]) -> Result<(Var, Var)> {
        let rows = entries
            .iter()
            .map(|e| self.encode_knowledge(s, e))
            .collect::<Result<Vec<_>>>()?;
        let h = if rows.len() == 1 { rows[0] } else { s.tape.concat_rows(&rows)? };
        Ok((self.project_key(s, h)?, self.project_value(s, h)?))
    }

    /// Keys and values of `entries` under the current parameters, as `f32`.
    pub fn knowledge_vectors(&self, entries: &[&[u32]]) -> Result<(Vec<f32>, Vec<f32>)> {
        const CHUNK: usize = 256;
        let d = self.config.d_model;
        let mut keys = Vec::with_capacity(entries.len() * d);
        let mut values = Vec::with_capacity(entries.len() * d);
        for chunk in entries.chunks(CHUNK) {
            let s = self.session();
            let (k, v) = self.encode_entries(&s, chunk)?;
            keys.extend(s.tape.data(k).iter().map(|&x| x as f32));
            values.extend(s.tape.data(v).iter().map(|&x| x as f32));
        }
        Ok((keys, values))
    }

    /// Re-encodes the selected entries of `store` on the session tape so the
    /// loss can reach the knowledge encoder. The store is not modified.
    pub fn recompute_selected(&self, s: &Session, store: &DpmStore, indices: &[usize]) -> Result<(Var, Var)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= store.len()) {
            return Err(Error::Contract(format!(
                "entry index {bad} out of range for memory of {}",
                store.len()
            )));
        }
        let tokens: Vec<&[u32]> = indices.iter().map(|&i| store.entries()[i].tokens.as_slice()).collect();
        self.encode_entries(s, &tokens)
    }

    fn norm(&self, s: &Session, x: Var, ids: NormIds) -> Result<Var> {
        s.tape.layer_norm(x, s.param(ids.gamma), s.param(ids.beta), LN_EPS)
    }

    /// Runs the encoder over a batch of token sequences.
    pub fn forward(
        &self,
        s: &Session,
        batch: &[Vec<u32>],
        store: Option<&DpmStore>,
        mode: MemoryMode,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if self.config.uses_memory() {
            match store {
                None => return Err(Error::Config("memory layers need an attached memory".into())),
                Some(m) if m.d_model() != self.config.d_model => {
                    return Err(Error::Dimension(format!(
                        "memory width {} differs from model width {}",
                        m.d_model(),
                        self.config.d_model
                    )))
                }
                Some(m) if m.is_empty() => return Err(Error::Retrieval("memory is empty".into())),
                _ => {}
            }
        }
        let t = &s.tape;
        let mut offsets = Vec::with_capacity(batch.len() + 1);
        let mut tok_idx = Vec::new();
        let mut pos_idx = Vec::new();
        for seq in batch {
            self.check_tokens(seq, self.config.max_seq_len, "sequence")?;
            offsets.push(tok_idx.len());
            tok_idx.extend(seq.iter().map(|&x| x as usize));
            pos_idx.extend(0..seq.len());
        }
        offsets.push(tok_idx.len());

        let tok = t.gather_rows(s.param(self.ids.tok), &tok_idx)?;
        let pos = t.gather_rows(s.param(self.ids.pos), &pos_idx)?;
        let mut h = self.norm(s, t.add(tok, pos)?, self.ids.emb_ln)?;
        h = s.dropout(h)?;

        let mut retrievals = Vec::new();
        let mut encoded: HashMap<usize, (Var, Var)> = HashMap::new();
        for (li, (kind, ids)) in self.config.layer_kinds.iter().zip(&self.ids.layers).enumerate() {
            let a = &ids.attn;
            let av = AttentionVars {
                wq: s.param(a[0]),
                bq: s.param(a[1]),
                wk: s.param(a[2]),
                bk: s.param(a[3]),
                wv: s.param(a[4]),
                bv: s.param(a[5]),
                wo: s.param(a[6]),
                bo: s.param(a[7]),
            };
            let mut parts = Vec::with_capacity(batch.len());
            for w in offsets.windows(2) {
                let seq = t.slice_rows(h, w[0], w[1] - w[0])?;
                parts.push(self_attention(t, seq, &av, self.config.n_heads, None)?);
            }
            let attn = concat(t, &parts)?;
            let h1 = self.norm(s, t.add(h, s.dropout(attn)?)?, ids.ln1)?;

            let mut update: Option<Var> = None;
            if let Some(f) = ids.ffn {
                let fv = FfnVars {
                    w1: s.param(f.w1),
                    b1: Some(s.param(f.b1)),
                    w2: s.param(f.w2),
                    b2: Some(s.param(f.b2)),
                };
                update = Some(s.dropout(feed_forward(t, h1, &fv, self.ffn_activation)?)?);
            }
            if kind.uses_memory() {
                let store = store.expect("checked above");
                let qp = ids.query_pool.expect("memory layer has a query pooling");
                let (know, results) = self.memory_sublayer(s, h1, &offsets, qp, store, mode, &mut encoded)?;
                retrievals.push((li, results));
                let know = s.dropout(know)?;
                update = Some(match update {
                    Some(u) => t.add(know, u)?,
                    None => know,
                });
            }
            let update = update.expect("every layer kind has a second sublayer");
            h = self.norm(s, t.add(h1, update)?, ids.ln2)?;
        }
        Ok(ForwardOutput {
            hidden: h,
            offsets,
            retrievals,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn memory_sublayer(
        &self,
        s: &Session,
        h1: Var,
        offsets: &[usize],
        qp: PoolingIds,
        store: &DpmStore,
        mode: MemoryMode,
        encoded: &mut HashMap<usize, (Var, Var)>,
    ) -> Result<(Var, Vec<RetrievalResult>)> {
        let t = &s.tape;
        let mut outs = Vec::with_capacity(offsets.len() - 1);
        let mut results = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            let seq = t.slice_rows(h1, w[0], w[1] - w[0])?;
            // The pooled query only selects entries; it is read by value.
            let z = attentive_pooling(t, seq, s.param(qp.query), s.param(qp.proj))?;
            let z: Vec<f64> = t.data(z).to_vec();
            let r = retrieve(&z, store, self.config.top_n)?;
            let (kz, vz) = match mode {
                MemoryMode::Cached => (t.leaf(&r.keys), t.leaf(&r.values)),
                MemoryMode::Recompute => {
                    let missing: Vec<usize> = r.indices.iter().copied().filter(|i| !encoded.contains_key(i)).collect();
                    if !missing.is_empty() {
                        let (k, v) = self.recompute_selected(s, store, &missing)?;
                        for (j, &i) in missing.iter().enumerate() {
                            encoded.insert(i, (t.slice_rows(k, j, 1)?, t.slice_rows(v, j, 1)?));
                        }
                    }
                    let ks: Vec<Var> = r.indices.iter().map(|i| encoded[i].0).collect();
                    let vs: Vec<Var> = r.indices.iter().map(|i| encoded[i].1).collect();
                    (concat(t, &ks)?, concat(t, &vs)?)
                }
            };
            outs.push(knowledge_attention(t, seq, kz, vz)?);
            results.push(r);
        }
        Ok((concat(t, &outs)?, results))
    }

    /// `hidden·E_tokᵀ` with the token embedding as output layer.
    pub fn mlm_logits(&self, s: &Session, hidden: Var) -> Result<Var> {
        s.tape.matmul_nt(hidden, s.param(self.ids.tok))
    }

    /// Head logits over the first row of each sequence, `[batch×classes]`.
    pub fn cls_logits(&self, s: &Session, hidden: Var, offsets: &[usize]) -> Result<Var> {
        let (w, b) = self
            .ids
            .cls
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let first = &offsets[..offsets.len() - 1];
        let rows = s.tape.gather_rows(hidden, first)?;
        linear(&s.tape, rows, s.param(w), Some(s.param(b)))
    }
}

fn concat(t: &Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        t.concat_rows(parts)
    }
}

fn position_rows(c: &ModelConfig) -> usize {
    c.max_seq_len.max(c.max_knowledge_len)
}

fn add_norm(p: &mut ParamSet, prefix: &str, d: usize) -> NormIds {
    NormIds {
        gamma: p.add(format!("{prefix}.gamma"), filled(&[d], 1.0)),
        beta: p.add(format!("{prefix}.beta"), Tensor::zeros(&[d])),
    }
}

fn add_pooling(p: &mut ParamSet, r: &mut impl Rng, prefix: &str, d: usize) -> PoolingIds {
    PoolingIds {
        query: p.add(format!("{prefix}.query"), uniform(r, &[d], INIT_STD)),
        proj: p.add(format!("{prefix}.proj"), uniform(r, &[d, d], INIT_STD)),
    }
}

/// Layer kinds actually instantiated, for reporting.
pub fn describe_layers(kinds: &[LayerKind]) -> String {
    kinds
        .iter()
        .map(|k| match k {
            LayerKind::Standard => "S",
            LayerKind::Dpm => "D",
            LayerKind::Fuse => "F",
        })
        .collect()
}
