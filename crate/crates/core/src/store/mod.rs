//! Dataset manifests, the persistent embedding index and the generation cache.

pub mod cache;
pub mod index;
pub mod manifest;

pub use cache::{CacheKey, GenerationCache};
pub use index::{build_index, read_index, write_index, EmbeddingIndex};
pub use manifest::{load_manifest, parse_manifest, Dataset, ManifestRecord, Split};
