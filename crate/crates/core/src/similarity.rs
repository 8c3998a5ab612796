//! Intra-request similarity: a per-request locality cache of earlier search
//! results, cluster reordering, early termination and speculation checks.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::vector_index::{l2_distance, Embedding, IvfIndex, Neighbor, SearchCursor, TopKResult};

/// Size of the extended result list kept per request.
pub const K_CACHE: usize = 20;

/// Default unchanged-heap streak for early termination.
pub const DEFAULT_STREAK: usize = 4;

/// Default probe threshold as a multiple of the mean vector-to-centroid
/// distance.
pub const DELTA_FACTOR: f64 = 0.8;

pub fn default_delta(index: &IvfIndex) -> f64 {
    DELTA_FACTOR * index.mean_centroid_distance()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Hints {
    /// Clusters holding the cached extended results.
    pub result_clusters: BTreeSet<u32>,
    /// Clusters the cached search visited.
    pub searched: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityRecord {
    pub request: u64,
    pub query: Embedding,
    pub extended_topk: TopKResult,
    pub hints: Hints,
}

impl LocalityRecord {
    /// Builds a record; the result clusters are derived from the index.
    pub fn new(index: &IvfIndex, request: u64, query: Embedding, extended_topk: TopKResult, searched: BTreeSet<u32>) -> Self {
        let result_clusters: BTreeSet<u32> = extended_topk
            .entries()
            .iter()
            .filter_map(|n| index.cluster_of(n.doc_id))
            .collect();
        let mut searched = searched;
        searched.extend(result_clusters.iter().copied());
        Self {
            request,
            query,
            extended_topk,
            hints: Hints {
                result_clusters,
                searched,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    /// Cached candidates re-scored against the new query, truncated to k.
    pub seed: TopKResult,
    pub hints: Hints,
}

#[derive(Debug, Clone, Default)]
pub struct LocalityCache {
    records: HashMap<u64, LocalityRecord>,
}

impl LocalityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, request: u64) -> Option<&LocalityRecord> {
        self.records.get(&request)
    }

    /// Stores a record, replacing the request's previous one.
    pub fn record_search(&mut self, record: LocalityRecord) {
        self.records.insert(record.request, record);
    }

    pub fn evict(&mut self, request: u64) -> Option<LocalityRecord> {
        self.records.remove(&request)
    }

    /// Seeds and hints for a new query of the same request if it lies within
    /// `delta` of the cached query.
    pub fn probe_cache(&self, index: &IvfIndex, request: u64, v_prime: &Embedding, k: usize, delta: f64) -> Result<Option<Probe>> {
        if k > K_CACHE {
            return Err(invalid(format!("probe k {k} exceeds the cached list size {K_CACHE}")));
        }
        let Some(rec) = self.records.get(&request) else {
            return Ok(None);
        };
        if rec.query.dim() != v_prime.dim() {
            return Err(invalid("probe dimension does not match cached query"));
        }
        if l2_distance(rec.query.as_slice(), v_prime.as_slice()) > delta {
            return Ok(None);
        }
        let q = index.prepare_query(v_prime)?;
        let candidates = rec
            .extended_topk
            .entries()
            .iter()
            .filter_map(|n| index.rescore(&q, n.doc_id).map(|d| Neighbor::new(n.doc_id, d)))
            .collect();
        Ok(Some(Probe {
            seed: TopKResult::from_candidates(candidates, k),
            hints: rec.hints.clone(),
        }))
    }
}

/// Stable three-way partition: clusters in the cached results first, then
/// other previously searched clusters, then the rest.
pub fn reorder_clusters(c_prime: &[u32], hints: &Hints) -> Vec<u32> {
    let rank = |c: &u32| {
        if hints.result_clusters.contains(c) {
            0
        } else if hints.searched.contains(c) {
            1
        } else {
            2
        }
    };
    let mut out = c_prime.to_vec();
    out.sort_by_key(rank);
    out
}

/// True once the heap has been unchanged for `streak` consecutive clusters.
/// `None` disables termination.
pub fn should_terminate(cursor: &SearchCursor, streak: Option<usize>) -> bool {
    streak.is_some_and(|e| !cursor.is_complete() && cursor.unchanged_streak() >= e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeKind {
    Valid,
    Mismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationOutcome {
    pub kind: OutcomeKind,
    pub compared_k: usize,
}

/// Valid only when both lists hold the same ids in the same order.
pub fn validate_speculation(partial: &TopKResult, final_: &TopKResult, k: usize) -> SpeculationOutcome {
    let a = partial.truncated(k).ids();
    let b = final_.truncated(k).ids();
    SpeculationOutcome {
        kind: if a == b { OutcomeKind::Valid } else { OutcomeKind::Mismatch },
        compared_k: b.len(),
    }
}

/// Euclidean distance between consecutive partial embeddings.
pub fn semantic_drift(prev: &Embedding, curr: &Embedding) -> Result<f64> {
    if prev.dim() != curr.dim() {
        return Err(invalid("semantic drift needs embeddings of equal dimension"));
    }
    Ok(l2_distance(prev.as_slice(), curr.as_slice()))
}

/// Fractions of a follow-up result explained by an earlier record: docs in
/// the extended list, docs in result clusters, docs in searched clusters.
pub fn observation_rates(index: &IvfIndex, record: &LocalityRecord, result: &TopKResult) -> (f64, f64, f64) {
    if result.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let cached: BTreeSet<u64> = record.extended_topk.ids().into_iter().collect();
    let (mut o1, mut o2, mut o3) = (0usize, 0usize, 0usize);
    for n in result.entries() {
        o1 += usize::from(cached.contains(&n.doc_id));
        if let Some(c) = index.cluster_of(n.doc_id) {
            o2 += usize::from(record.hints.result_clusters.contains(&c));
            o3 += usize::from(record.hints.searched.contains(&c));
        }
    }
    let n = result.len() as f64;
    (o1 as f64 / n, o2 as f64 / n, o3 as f64 / n)
}
