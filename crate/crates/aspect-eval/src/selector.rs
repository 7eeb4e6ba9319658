//! Top-k auxiliary-aspect selection by similarity of definition embeddings.
//!
//! The target aspect is always excluded from the pool. Ties on similarity
//! break by ascending aspect id so selection is deterministic. `Random`
//! mode ignores embeddings and draws uniformly from the filtered pool.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Backend;
use crate::domain::{Aspect, AspectId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectEmbedding {
    pub aspect_id: AspectId,
    pub provider_id: String,
    pub vector: Vec<f64>,
}

/// Candidate-pool filter for auxiliary selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    All,
    Seen,
    Unseen,
    Random,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PoolMode::All),
            "seen" => Ok(PoolMode::Seen),
            "unseen" => Ok(PoolMode::Unseen),
            "random" => Ok(PoolMode::Random),
            other => Err(Error::Usage(format!("unknown pool mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PoolMode::All => "all",
            PoolMode::Seen => "seen",
            PoolMode::Unseen => "unseen",
            PoolMode::Random => "random",
        };
        f.write_str(s)
    }
}

/// Cache of definition embeddings keyed by (provider id, definition hash).
/// Safe for concurrent readers with serialized writes.
#[derive(Default)]
pub struct EmbeddingCache {
    map: Mutex<HashMap<(String, String), Vec<f64>>>,
}

fn definition_hash(definition: &str) -> String {
    format!("{:x}", Sha256::digest(definition.as_bytes()))
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embed aspect definitions through the backend, order-aligned with the
/// input. Previously embedded definitions are served from the cache.
pub fn embed_definitions<B: Backend>(
    aspects: &[Aspect],
    backend: &B,
    cache: &EmbeddingCache,
) -> Result<Vec<AspectEmbedding>> {
    let provider = backend.provider_id();
    for a in aspects {
        if a.definition.trim().is_empty() {
            return Err(Error::Validation(format!(
                "aspect '{}' has an empty definition",
                a.id
            )));
        }
    }

    let keys: Vec<(String, String)> = aspects
        .iter()
        .map(|a| (provider.clone(), definition_hash(&a.definition)))
        .collect();

    let missing: Vec<usize> = {
        let map = cache.map.lock().unwrap();
        (0..aspects.len()).filter(|&i| !map.contains_key(&keys[i])).collect()
    };

    if !missing.is_empty() {
        let texts: Vec<String> = missing.iter().map(|&i| aspects[i].definition.clone()).collect();
        let vectors = backend.embed(&texts).map_err(|e| {
            Error::Backend(format!(
                "embedding failed for aspect '{}': {e}",
                aspects[missing[0]].id
            ))
        })?;
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Backend("embedding dimension mismatch within batch".into()));
        }
        let mut map = cache.map.lock().unwrap();
        for (&i, v) in missing.iter().zip(vectors) {
            map.insert(keys[i].clone(), v);
        }
    }

    let map = cache.map.lock().unwrap();
    let embeddings: Vec<AspectEmbedding> = aspects
        .iter()
        .zip(&keys)
        .map(|(a, key)| AspectEmbedding {
            aspect_id: a.id.clone(),
            provider_id: provider.clone(),
            vector: map[key].clone(),
        })
        .collect();

    let dim = embeddings.first().map(|e| e.vector.len()).unwrap_or(0);
    if embeddings.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::Backend("embedding dimension mismatch across aspects".into()));
    }
    Ok(embeddings)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Validation(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Validation("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (nu * nv))
}

/// Select up to k auxiliary aspects for `target` from `pool`, ordered by
/// descending cosine similarity of definition embeddings (ascending id on
/// ties). Returns `min(k, |filtered pool|)` aspects.
pub fn select_top_k<R: Rng>(
    target: &Aspect,
    pool: &[Aspect],
    k: usize,
    mode: PoolMode,
    embeddings: &[AspectEmbedding],
    rng: &mut R,
) -> Result<Vec<Aspect>> {
    let filtered: Vec<&Aspect> = pool
        .iter()
        .filter(|a| a.id != target.id)
        .filter(|a| match mode {
            PoolMode::All | PoolMode::Random => true,
            PoolMode::Seen => a.seen,
            PoolMode::Unseen => !a.seen,
        })
        .collect();
    if filtered.is_empty() {
        return Err(Error::Validation(format!(
            "empty candidate pool for target '{}' under mode {mode}",
            target.id
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }

    if mode == PoolMode::Random {
        let mut chosen: Vec<&Aspect> = filtered
            .choose_multiple(rng, k.min(filtered.len()))
            .copied()
            .collect();
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        return Ok(chosen.into_iter().cloned().collect());
    }

    let by_id: HashMap<&AspectId, &AspectEmbedding> =
        embeddings.iter().map(|e| (&e.aspect_id, e)).collect();
    let target_vec = &by_id
        .get(&target.id)
        .ok_or_else(|| Error::Validation(format!("no embedding for target '{}'", target.id)))?
        .vector;

    let mut scored: Vec<(f64, &Aspect)> = filtered
        .into_iter()
        .map(|a| {
            let e = by_id
                .get(&a.id)
                .ok_or_else(|| Error::Validation(format!("no embedding for aspect '{}'", a.id)))?;
            Ok((cosine_similarity(target_vec, &e.vector)?, a))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.partial_cmp(sa).unwrap().then_with(|| a.id.cmp(&b.id))
    });
    Ok(scored.into_iter().take(k).map(|(_, a)| a.clone()).collect())
}

/// Similarity of each pool aspect to the target, for inspection and traces.
pub fn similarity_ranking(
    target: &Aspect,
    pool: &[Aspect],
    embeddings: &[AspectEmbedding],
) -> Result<Vec<(AspectId, f64)>> {
    let by_id: HashMap<&AspectId, &AspectEmbedding> =
        embeddings.iter().map(|e| (&e.aspect_id, e)).collect();
    let target_vec = &by_id
        .get(&target.id)
        .ok_or_else(|| Error::Validation(format!("no embedding for target '{}'", target.id)))?
        .vector;
    let mut out = Vec::new();
    for a in pool.iter().filter(|a| a.id != target.id) {
        let e = by_id
            .get(&a.id)
            .ok_or_else(|| Error::Validation(format!("no embedding for aspect '{}'", a.id)))?;
        out.push((a.id.clone(), cosine_similarity(target_vec, &e.vector)?));
    }
    out.sort_by(|(ida, sa), (idb, sb)| sb.partial_cmp(sa).unwrap().then_with(|| ida.cmp(idb)));
    Ok(out)
}
