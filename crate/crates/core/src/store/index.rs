//! Persistent embedding index.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! "VICL"            4 bytes magic
//! version  u32      currently 1
//! dim      u32
//! count    u64
//! count × { id_len u32, id UTF-8 bytes, dim × f32 }
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::client::InferenceClient;
use crate::error::{Error, Result};
use crate::par::bounded_map;
use crate::types::{DemonstrationCandidate, EmbeddingVector};

pub const INDEX_MAGIC: [u8; 4] = *b"VICL";
pub const INDEX_VERSION: u32 = 1;

/// Exact-search embedding store. Entries keep insertion order, which is the
/// tie-break order for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
    positions: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("invalid index dim {dim}")));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
            positions: HashMap::new(),
        })
    }

    pub fn push(&mut self, id: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        let id = id.into();
        if vector.dim() != self.dim {
            return Err(Error::for_candidate(
                id,
                Error::DimensionMismatch {
                    expected: self.dim,
                    found: vector.dim(),
                },
            ));
        }
        if self.positions.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.positions.insert(id.clone(), self.entries.len());
        self.entries.push((id, vector));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.positions.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// A new index holding only the entries accepted by `keep`, in order.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut out = Self::new(self.dim).expect("dim already validated");
        for (id, v) in &self.entries {
            if keep(id) {
                out.push(id.clone(), v.clone())
                    .expect("source index is consistent");
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.entries.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(&INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v.values() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != INDEX_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::CorruptIndex("dim is zero".into()));
        }
        let count = r.u64("count")?;
        let mut index = Self::new(dim)?;
        for _ in 0..count {
            let id_len = r.u32("id length")? as usize;
            let id = std::str::from_utf8(r.take(id_len, "id")?)
                .map_err(|_| Error::CorruptIndex("id is not UTF-8".into()))?
                .to_string();
            let raw = r.take(dim * 4, "vector")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let vector = EmbeddingVector::new(values).map_err(|e| Error::for_candidate(&id, e))?;
            index.push(id, vector)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(index)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Writes the index atomically (temp file then rename).
pub fn write_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&index.to_bytes())
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<EmbeddingIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingIndex::from_bytes(&bytes)
}

/// Embeds every candidate image. The first returned dimension fixes the
/// index dimension; any later disagreement is an error naming the candidate.
pub fn build_index(
    candidates: &[DemonstrationCandidate],
    client: &dyn InferenceClient,
) -> Result<EmbeddingIndex> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build an index from zero candidates".into(),
        ));
    }
    let vectors = bounded_map(candidates, client.max_in_flight(), |_, c| {
        c.image
            .load()
            .and_then(|bytes| client.embed_image(&bytes))
            .map_err(|e| Error::for_candidate(&c.id, e))
    });
    let mut index: Option<EmbeddingIndex> = None;
    for (cand, vector) in candidates.iter().zip(vectors) {
        let vector = vector?;
        let idx = match index.as_mut() {
            Some(idx) => idx,
            None => index.insert(EmbeddingIndex::new(vector.dim())?),
        };
        idx.push(cand.id.clone(), vector)?;
    }
    Ok(index.expect("candidates non-empty"))
}
