//! The plug-in memory: cached key/value rows over knowledge entries, exact
//! inner-product search, editing and persistence.

mod edit;
mod persist;
mod store;

pub use edit::{append_store, build_memory, daa_append, dar_replace, refresh_index, replace_with_store};
pub use persist::{load_memory, memory_bytes, memory_from_bytes, save_memory};
pub use store::{grow_fraction, mips_topn, retrieve, DpmStore, RetrievalResult, DEFAULT_TOP_N};
