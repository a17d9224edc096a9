//! Two-stage demonstration retrieval: exact cosine top-k over the embedding
//! index, then reranking of that pool by image-text similarity against a
//! generated caption of the query image.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::client::InferenceClient;
use crate::error::{Error, Result};
use crate::par::bounded_map;
use crate::store::{CacheKey, EmbeddingIndex, GenerationCache};
use crate::summarizer::captioning_prompt;
use crate::types::{DemonstrationCandidate, EmbeddingVector, ImageRef};

pub const DEFAULT_POOL_SIZE: usize = 20;
pub const DEFAULT_DEMO_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub id: String,
    pub retrieval_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
}

/// Cosine similarity, accumulated in f64.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// The `k` entries most similar to `query`, best first. Equal scores keep
/// index order.
pub fn retrieve_top_k(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<RankedCandidate>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.dim() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            found: query.dim(),
        });
    }
    let mut scored = index
        .entries()
        .iter()
        .map(|(id, v)| {
            cosine_similarity(query, v)
                .map(|s| (id, s))
                .map_err(|e| Error::for_candidate(id, e))
        })
        .collect::<Result<Vec<_>>>()?;
    // Stable sort: ties stay in insertion order.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(id, s)| RankedCandidate {
            id: id.clone(),
            retrieval_score: s,
            rerank_score: None,
        })
        .collect())
}

/// Scores each candidate image against `caption` and re-sorts by that
/// score, ties keeping the incoming order. Scoring runs concurrently up to
/// the scorer's in-flight bound.
pub fn rerank_candidates(
    cands: Vec<RankedCandidate>,
    caption: &str,
    scorer: &dyn InferenceClient,
    image_bytes: impl Fn(&str) -> Result<Vec<u8>> + Sync,
) -> Result<Vec<RankedCandidate>> {
    if caption.is_empty() {
        return Err(Error::InvalidArgument("rerank caption is empty".into()));
    }
    let scores = bounded_map(&cands, scorer.max_in_flight(), |_, c| {
        image_bytes(&c.id)
            .and_then(|bytes| scorer.score_image_text(&bytes, caption))
            .and_then(|s| {
                if s.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::Protocol("non-finite rerank score".into()))
                }
            })
            .map_err(|e| Error::for_candidate(&c.id, e))
    });
    let mut out = cands
        .into_iter()
        .zip(scores)
        .map(|(mut c, s)| {
            c.rerank_score = Some(s?);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.rerank_score
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.rerank_score.unwrap_or(f64::NEG_INFINITY))
    });
    Ok(out)
}

/// Demonstration candidates addressable by id.
#[derive(Debug, Clone, Default)]
pub struct CandidatePool {
    candidates: Vec<DemonstrationCandidate>,
    by_id: HashMap<String, usize>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<DemonstrationCandidate>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            if by_id.insert(c.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(c.id.clone()));
            }
        }
        Ok(Self { candidates, by_id })
    }

    pub fn get(&self, id: &str) -> Result<&DemonstrationCandidate> {
        self.by_id
            .get(id)
            .map(|&i| &self.candidates[i])
            .ok_or_else(|| Error::UnknownCandidate(id.to_string()))
    }

    pub fn image_bytes(&self, id: &str) -> Result<Vec<u8>> {
        self.get(id)?.image.load()
    }

    pub fn as_slice(&self) -> &[DemonstrationCandidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Which clients back each retrieval stage.
#[derive(Clone, Copy)]
pub struct RetrievalClients<'a> {
    pub embedder: &'a dyn InferenceClient,
    pub scorer: &'a dyn InferenceClient,
    pub generator: &'a dyn InferenceClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Pool size retrieved before reranking.
    pub pool_size: usize,
    /// Demonstrations kept after reranking.
    pub demo_count: usize,
    /// Skip the rerank stage (visual retrieval only).
    pub rerank: bool,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            pool_size: DEFAULT_POOL_SIZE,
            demo_count: DEFAULT_DEMO_COUNT,
            rerank: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub demos: Vec<DemonstrationCandidate>,
    /// The full pool in final order, with scores, for audit records.
    pub ranked: Vec<RankedCandidate>,
}

/// Captions `image` with the standard captioning prompt, through the cache.
pub fn caption_image(
    image: &[u8],
    generator: &dyn InferenceClient,
    cache: &GenerationCache,
) -> Result<String> {
    let prompt = captioning_prompt(ImageRef::Inline(image.to_vec()));
    let key = CacheKey::new(image, &prompt.flatten(""), generator.model_id());
    cache.get_or_generate(key, || generator.generate(&prompt))
}

/// Retrieves, reranks and truncates demonstrations for one query image.
/// `query_embedding` may be supplied when the caller already has it.
pub fn select_demonstrations(
    query_image: &[u8],
    query_embedding: Option<EmbeddingVector>,
    index: &EmbeddingIndex,
    pool: &CandidatePool,
    params: SelectionParams,
    clients: RetrievalClients<'_>,
    cache: &GenerationCache,
) -> Result<Selection> {
    if params.demo_count > params.pool_size {
        return Err(Error::InvalidArgument(format!(
            "demo count {} exceeds pool size {}",
            params.demo_count, params.pool_size
        )));
    }
    let query = match query_embedding {
        Some(v) => v,
        None => clients.embedder.embed_image(query_image)?,
    };
    let mut ranked = retrieve_top_k(index, &query, params.pool_size)?;
    if params.rerank {
        let caption = caption_image(query_image, clients.generator, cache)?;
        ranked = rerank_candidates(ranked, &caption, clients.scorer, |id| pool.image_bytes(id))?;
    }
    let demos = ranked
        .iter()
        .take(params.demo_count)
        .map(|r| pool.get(&r.id).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection { demos, ranked })
}
