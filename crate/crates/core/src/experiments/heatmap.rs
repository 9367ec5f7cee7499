use std::io::Write;
use std::path::Path;

use super::harness::Source;
use crate::dpm::DpmStore;
use crate::error::{Error, Result};
use crate::model::{MemoryMode, Model};

pub const HEATMAP_HEADER: &str = "sample_id,entry_index,score,source";

/// Writes one CSV row per retrieved (sample, entry) pair over every memory
/// layer, in sample order, then layer order, then rank.
pub fn export_retrieval_heatmap(model: &Model, store: &DpmStore, samples: &[Vec<u32>], path: &Path) -> Result<()> {
    if !model.config.uses_memory() {
        return Err(Error::Config("retrieval export needs a model with a memory layer".into()));
    }
    let mut out = String::from(HEATMAP_HEADER);
    out.push('\n');
    for (chunk_no, chunk) in samples.chunks(32).enumerate() {
        let s = model.session();
        let fwd = model.forward(&s, chunk, Some(store), MemoryMode::Cached)?;
        for j in 0..chunk.len() {
            let sample = chunk_no * 32 + j;
            for (_, per_seq) in &fwd.retrievals {
                let r = &per_seq[j];
                for ((&idx, &score), &id) in r.indices.iter().zip(&r.scores).zip(&r.entry_ids) {
                    out.push_str(&format!("{sample},{idx},{score},{}\n", Source::of(id).as_str()));
                }
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
