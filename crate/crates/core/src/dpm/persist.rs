use std::path::Path;

use super::store::DpmStore;
use crate::error::{Error, Result};
use crate::text::KnowledgeEntry;
use crate::util::ByteReader;

const MAGIC: &[u8; 4] = b"DPM1";
const VERSION: u32 = 1;

/// Encodes a store in the memory file format. The version counter and the
/// frozen flag are not part of the format.
pub fn memory_bytes(store: &DpmStore) -> Vec<u8> {
    let tokens: usize = store.entries.iter().map(|e| e.tokens.len()).sum();
    let mut out = Vec::with_capacity(28 + store.keys.len() * 8 + store.len() * 12 + tokens * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    out.extend_from_slice(&(store.d_model as u32).to_le_bytes());
    out.extend_from_slice(&(store.max_knowledge_len as u32).to_le_bytes());
    for v in store.keys.iter().chain(&store.values) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in &store.entries {
        out.extend_from_slice(&e.id.to_le_bytes());
        out.extend_from_slice(&(e.tokens.len() as u32).to_le_bytes());
        for t in &e.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

pub fn memory_from_bytes(buf: &[u8]) -> Result<DpmStore> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a memory file (bad magic)"));
    }
    let version = r.u32("format version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported memory version {version}")));
    }
    let count = r.u64("entry count")?;
    let d_model = r.u32("d_model")? as usize;
    let max_len = r.u32("max knowledge length")? as usize;
    let rows = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(d_model))
        .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::format(r.offset(), format!("{count} entries of width {d_model} exceed the file")))?;
    let keys = r.f32s(rows, "keys")?;
    let values = r.f32s(rows, "values")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.u64("entry id")?;
        let n = r.u32("token count")? as usize;
        let bytes = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "entry tokens")?;
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(KnowledgeEntry { id, tokens });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    DpmStore::from_parts(entries, keys, values, d_model, max_len).map_err(|e| Error::format(0, e.to_string()))
}

pub fn save_memory(store: &DpmStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, memory_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_memory(path: impl AsRef<Path>) -> Result<DpmStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    memory_from_bytes(&bytes)
}
