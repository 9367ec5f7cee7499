use super::store::DpmStore;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::KnowledgeEntry;

fn encode(model: &Model, entries: &[KnowledgeEntry]) -> Result<(Vec<f32>, Vec<f32>)> {
    let tokens: Vec<&[u32]> = entries.iter().map(|e| e.tokens.as_slice()).collect();
    model.knowledge_vectors(&tokens)
}

/// Encodes every entry with the current parameters.
pub fn build_memory(model: &Model, entries: Vec<KnowledgeEntry>) -> Result<DpmStore> {
    if entries.is_empty() {
        return Err(Error::Contract("memory must contain at least one entry".into()));
    }
    let (keys, values) = encode(model, &entries)?;
    DpmStore::from_parts(
        entries,
        keys,
        values,
        model.config.d_model,
        model.config.max_knowledge_len,
    )
}

/// Recomputes all cached rows from the current parameters.
pub fn refresh_index(store: &mut DpmStore, model: &Model) -> Result<()> {
    if store.frozen {
        return Err(Error::Freeze("cannot refresh a frozen memory".into()));
    }
    let (keys, values) = encode(model, &store.entries)?;
    let entries = std::mem::take(&mut store.entries);
    store.replace_content(entries, keys, values);
    Ok(())
}

/// Appends `new_entries`, encoded with the current parameters. Existing rows
/// are left as they are.
pub fn daa_append(store: &mut DpmStore, new_entries: Vec<KnowledgeEntry>, model: &Model) -> Result<()> {
    if new_entries.is_empty() {
        return Ok(());
    }
    check_width(store, model)?;
    let (k, v) = encode(model, &new_entries)?;
    let mut entries = store.entries.clone();
    entries.extend(new_entries);
    let keys = [store.keys.as_slice(), &k].concat();
    let values = [store.values.as_slice(), &v].concat();
    store.replace_content(entries, keys, values);
    Ok(())
}

/// Replaces the whole content with `new_entries`.
pub fn dar_replace(store: &mut DpmStore, new_entries: Vec<KnowledgeEntry>, model: &Model) -> Result<()> {
    if new_entries.is_empty() {
        return Err(Error::Contract("replacement memory must contain at least one entry".into()));
    }
    check_width(store, model)?;
    let (keys, values) = encode(model, &new_entries)?;
    store.replace_content(new_entries, keys, values);
    Ok(())
}

/// Appends the rows of another store without re-encoding them.
pub fn append_store(store: &mut DpmStore, other: &DpmStore) -> Result<()> {
    if other.d_model != store.d_model {
        return Err(Error::Dimension(format!(
            "cannot append memory of width {} to width {}",
            other.d_model, store.d_model
        )));
    }
    let mut entries = store.entries.clone();
    entries.extend(other.entries.iter().cloned());
    let keys = [store.keys.as_slice(), &other.keys].concat();
    let values = [store.values.as_slice(), &other.values].concat();
    store.replace_content(entries, keys, values);
    Ok(())
}

/// Takes over the rows of another store without re-encoding them.
pub fn replace_with_store(store: &mut DpmStore, other: &DpmStore) -> Result<()> {
    if other.d_model != store.d_model {
        return Err(Error::Dimension(format!(
            "cannot swap in memory of width {} for width {}",
            other.d_model, store.d_model
        )));
    }
    store.replace_content(other.entries.clone(), other.keys.clone(), other.values.clone());
    Ok(())
}

fn check_width(store: &DpmStore, model: &Model) -> Result<()> {
    if store.d_model != model.config.d_model {
        return Err(Error::Dimension(format!(
            "memory width {} differs from model width {}",
            store.d_model, model.config.d_model
        )));
    }
    Ok(())
}
