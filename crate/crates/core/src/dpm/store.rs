use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::KnowledgeEntry;

/// Default retrieval width.
pub const DEFAULT_TOP_N: usize = 5;

/// Entries with their cached key and value rows.
///
/// Keys and values are kept as `f32`; every edit builds fresh arrays and
/// bumps `version`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpmStore {
    pub(crate) entries: Vec<KnowledgeEntry>,
    pub(crate) keys: Vec<f32>,
    pub(crate) values: Vec<f32>,
    pub(crate) d_model: usize,
    pub(crate) max_knowledge_len: usize,
    pub(crate) version: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// The query the search ran with.
    pub query: Vec<f64>,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// `[N×d_model]` cached key rows, in `indices` order.
    pub keys: Tensor,
    pub values: Tensor,
    pub entry_ids: Vec<u64>,
    pub store_version: u64,
}

impl DpmStore {
    /// Assembles a store from precomputed rows. Rejects empty or misaligned
    /// inputs and non-finite values.
    pub fn from_parts(
        entries: Vec<KnowledgeEntry>,
        keys: Vec<f32>,
        values: Vec<f32>,
        d_model: usize,
        max_knowledge_len: usize,
    ) -> Result<DpmStore> {
        if entries.is_empty() {
            return Err(Error::Contract("memory must contain at least one entry".into()));
        }
        let want = entries.len() * d_model;
        if keys.len() != want || values.len() != want {
            return Err(Error::Dimension(format!(
                "{} entries of width {d_model} need {want} key and value scalars, got {} and {}",
                entries.len(),
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::Contract("memory keys or values contain a non-finite value".into()));
        }
        Ok(DpmStore {
            entries,
            keys,
            values,
            d_model,
            max_knowledge_len,
            version: 0,
            frozen: false,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_knowledge_len(&self) -> usize {
        self.max_knowledge_len
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn key_row(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn value_row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d_model..(i + 1) * self.d_model]
    }

    /// True when `result` was produced before the latest edit or refresh.
    pub fn is_stale(&self, result: &RetrievalResult) -> bool {
        result.store_version != self.version
    }

    /// Swaps in new content in one step and bumps the version.
    pub(crate) fn replace_content(&mut self, entries: Vec<KnowledgeEntry>, keys: Vec<f32>, values: Vec<f32>) {
        debug_assert_eq!(keys.len(), entries.len() * self.d_model);
        self.entries = entries;
        self.keys = keys;
        self.values = values;
        self.version += 1;
    }

    /// Gathers cached rows for `indices` as `f64` tensors.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let d = self.d_model;
        let mut k = Vec::with_capacity(indices.len() * d);
        let mut v = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("entry index {i} out of range for memory of {}", self.len())));
            }
            k.extend(self.key_row(i).iter().map(|&x| x as f64));
            v.extend(self.value_row(i).iter().map(|&x| x as f64));
        }
        Ok((Tensor::new(vec![indices.len(), d], k)?, Tensor::new(vec![indices.len(), d], v)?))
    }
}

fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact top-`n` inner-product search over row-major `keys` of width `z.len()`.
/// Scores descend; equal scores keep ascending index order.
pub fn mips_topn(z: &[f64], keys: &[f32], n: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = z.len();
    if d == 0 || keys.is_empty() {
        return Err(Error::Retrieval("search over an empty memory".into()));
    }
    if keys.len() % d != 0 {
        return Err(Error::Dimension(format!("key matrix of {} scalars is not a multiple of width {d}", keys.len())));
    }
    if n == 0 {
        return Err(Error::Contract("top-n needs n >= 1".into()));
    }
    let count = keys.len() / d;
    let n = n.min(count);
    // Bounded selection: `best` stays sorted by rank.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(n + 1);
    for (i, row) in keys.chunks_exact(d).enumerate() {
        let mut s = 0.0;
        for (a, b) in z.iter().zip(row) {
            s += a * (*b as f64);
        }
        let cand = (s, i);
        if best.len() == n {
            if rank(&cand, &best[n - 1]) != Ordering::Less {
                continue;
            }
            best.pop();
        }
        let pos = best.partition_point(|x| rank(x, &cand) == Ordering::Less);
        best.insert(pos, cand);
    }
    Ok((best.iter().map(|x| x.1).collect(), best.iter().map(|x| x.0).collect()))
}

/// Top-`n` entries of `store` for query `z`, with their cached rows.
pub fn retrieve(z: &[f64], store: &DpmStore, n: usize) -> Result<RetrievalResult> {
    if store.is_empty() {
        return Err(Error::Retrieval("memory is empty".into()));
    }
    if z.len() != store.d_model {
        return Err(Error::Dimension(format!(
            "query width {} differs from memory width {}",
            z.len(),
            store.d_model
        )));
    }
    let (indices, scores) = mips_topn(z, &store.keys, n)?;
    let (keys, values) = store.gather(&indices)?;
    Ok(RetrievalResult {
        query: z.to_vec(),
        entry_ids: indices.iter().map(|&i| store.entries[i].id).collect(),
        indices,
        scores,
        keys,
        values,
        store_version: store.version,
    })
}

/// Prefix view holding the first `⌈fraction·len⌉` entries.
pub fn grow_fraction(store: &DpmStore, fraction: f64) -> Result<DpmStore> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let take = ((fraction * store.len() as f64).ceil() as usize).clamp(1, store.len());
    let d = store.d_model;
    let mut out = store.clone();
    out.entries.truncate(take);
    out.keys.truncate(take * d);
    out.values.truncate(take * d);
    Ok(out)
}
