use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::encoder::Model;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::Vocab;
use crate::util::ByteReader;

const MAGIC: &[u8; 4] = b"PLUG";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
}

/// Encodes `model` (and the vocabulary it was trained with) in the
/// checkpoint format. Parameter values are stored as `f32`.
pub fn checkpoint_bytes(model: &Model, vocab: Option<&Vocab>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocab: vocab.cloned(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + model.params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (name, t) in model.params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("parameter name {name} too long")))?;
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| Error::Contract(format!("parameter {name} has too many dimensions")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("parameter {name} dimension too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a checkpoint; nothing is returned unless the whole buffer parses.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(Model, Option<Vocab>)> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("format version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let at = r.offset();
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::format(at, format!("bad header: {e}")))?;
    let mut params = ParamSet::new();
    while r.remaining() > 0 {
        let at = r.offset();
        let n = r.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "parameter name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("parameter dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(at, format!("parameter {name} is too large")))?;
        let data = r.f32s(count, "parameter data")?.into_iter().map(f64::from).collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    let model = Model::from_params(header.config, params).map_err(|e| Error::format(r.offset(), e.to_string()))?;
    Ok((model, header.vocab))
}

pub fn save_checkpoint(model: &Model, vocab: Option<&Vocab>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, vocab)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<Vocab>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
