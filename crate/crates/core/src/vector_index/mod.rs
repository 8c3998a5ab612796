//! Inverted-file (IVF) vector index with exact per-cluster search.
//!
//! The index is built once from a [`Corpus`] and a set of trained
//! [`Centroids`] and is immutable afterwards. Queries run through a
//! [`SearchCursor`], which walks an ordered plan of clusters and can be
//! advanced in arbitrary budget-sized steps without changing the final
//! result.

mod io;
mod kmeans;
mod topk;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use io::{read_assignment, read_centroids, read_corpus, write_assignment, write_centroids, write_corpus};
pub use kmeans::train_kmeans;
pub use topk::{merge_topk, neighbor_order, Neighbor, TopKResult};

use topk::Collector;

/// Distance metric of a corpus. Cosine is served by the L2 kernel over
/// unit-normalized vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Metric::L2),
            1 => Ok(Metric::Cosine),
            other => Err(Error::Format(format!("unknown metric code {other}"))),
        }
    }

    /// Maps a raw vector into the space the kernel operates in.
    pub fn prepare(self, v: &[f32]) -> Vec<f32> {
        match self {
            Metric::L2 => v.to_vec(),
            Metric::Cosine => normalize(v),
        }
    }
}

fn normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

/// Squared Euclidean distance accumulated in f64.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(*x) - f64::from(*y);
        acc += d * d;
    }
    acc
}

/// Euclidean distance, used for similarity thresholds and drift.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    squared_l2(a, b).sqrt()
}

/// A finite, non-empty vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("embedding must have dimension >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Raw vectors plus their document ids, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dim: usize,
    metric: Metric,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl Corpus {
    pub fn new(dim: usize, metric: Metric, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("corpus dimension must be >= 1"));
        }
        if data.len() != ids.len() * dim {
            return Err(invalid(format!(
                "dimension mismatch: {} values for {} ids at dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("corpus contains non-finite values"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(invalid(format!("duplicate doc_id {dup}")));
        }
        Ok(Self { dim, metric, ids, data })
    }

    pub fn from_embeddings(embeddings: &[Embedding], ids: Vec<u64>, metric: Metric) -> Result<Self> {
        if embeddings.len() != ids.len() {
            return Err(invalid("corpus and doc_ids differ in length"));
        }
        let dim = embeddings.first().map_or(0, Embedding::dim);
        if embeddings.iter().any(|e| e.dim() != dim) {
            return Err(invalid("dimension mismatch inside corpus"));
        }
        let data = embeddings.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
        if embeddings.is_empty() {
            return Err(invalid("empty corpus"));
        }
        Self::new(dim, metric, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major vectors in kernel space (normalized for cosine).
    pub fn prepared_data(&self) -> Vec<f32> {
        match self.metric {
            Metric::L2 => self.data.clone(),
            Metric::Cosine => self.data.chunks(self.dim).flat_map(normalize).collect(),
        }
    }
}

/// Trained cluster centers, `k × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    data: Vec<f32>,
}

impl Centroids {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(invalid("centroid matrix must be non-empty and k × dim"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("centroids contain non-finite values"));
        }
        Ok(Self { dim, data })
    }

    pub fn k(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Nearest centroid of `v`; ties go to the lowest cluster id.
    pub fn nearest(&self, v: &[f32]) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for c in 0..self.k() {
            let d = squared_l2(v, self.row(c));
            if d < best.1 {
                best = (c as u32, d);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Default)]
struct InvertedList {
    ids: Vec<u64>,
    data: Vec<f32>,
}

/// IVF index: centroids plus one inverted list per cluster.
#[derive(Debug, Clone)]
pub struct IvfIndex {
    dim: usize,
    metric: Metric,
    centroids: Centroids,
    lists: Vec<InvertedList>,
    locator: HashMap<u64, (u32, u32)>,
    assignment: Vec<u32>,
}

impl IvfIndex {
    /// Places every corpus vector in the list of its nearest centroid.
    pub fn build(corpus: &Corpus, centroids: Centroids) -> Result<Self> {
        if corpus.dim() != centroids.dim() {
            return Err(invalid(format!(
                "dimension mismatch: corpus {} vs centroids {}",
                corpus.dim(),
                centroids.dim()
            )));
        }
        let prepared = corpus.prepared_data();
        let assignment = kmeans::assign_all(&prepared, corpus.dim(), &centroids);
        Self::assemble(corpus, &prepared, centroids, assignment)
    }

    /// Rebuilds an index from a persisted assignment list.
    pub fn from_assignment(corpus: &Corpus, centroids: Centroids, assignment: Vec<u32>) -> Result<Self> {
        if corpus.dim() != centroids.dim() {
            return Err(invalid("dimension mismatch between corpus and centroids"));
        }
        if assignment.len() != corpus.len() {
            return Err(invalid("assignment length differs from corpus size"));
        }
        if assignment.iter().any(|&c| c as usize >= centroids.k()) {
            return Err(invalid("assignment references unknown cluster"));
        }
        let prepared = corpus.prepared_data();
        Self::assemble(corpus, &prepared, centroids, assignment)
    }

    fn assemble(corpus: &Corpus, prepared: &[f32], centroids: Centroids, assignment: Vec<u32>) -> Result<Self> {
        let dim = corpus.dim();
        let mut lists = vec![InvertedList::default(); centroids.k()];
        let mut locator = HashMap::with_capacity(corpus.len());
        for (i, (&id, &c)) in corpus.ids().iter().zip(&assignment).enumerate() {
            let list = &mut lists[c as usize];
            locator.insert(id, (c, list.ids.len() as u32));
            list.ids.push(id);
            list.data.extend_from_slice(&prepared[i * dim..(i + 1) * dim]);
        }
        Ok(Self {
            dim,
            metric: corpus.metric(),
            centroids,
            lists,
            locator,
            assignment,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn k_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn len(&self) -> usize {
        self.locator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locator.is_empty()
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn cluster_len(&self, cluster: u32) -> usize {
        self.lists[cluster as usize].ids.len()
    }

    pub fn cluster_ids(&self, cluster: u32) -> &[u64] {
        &self.lists[cluster as usize].ids
    }

    pub fn cluster_of(&self, doc_id: u64) -> Option<u32> {
        self.locator.get(&doc_id).map(|&(c, _)| c)
    }

    /// Stored (kernel-space) vector of a document.
    pub fn vector_of(&self, doc_id: u64) -> Option<&[f32]> {
        self.locator.get(&doc_id).map(|&(c, pos)| {
            let list = &self.lists[c as usize];
            let p = pos as usize;
            &list.data[p * self.dim..(p + 1) * self.dim]
        })
    }

    /// Query vector mapped into kernel space.
    pub fn prepare_query(&self, query: &Embedding) -> Result<Vec<f32>> {
        if query.dim() != self.dim {
            return Err(invalid(format!(
                "query dimension {} does not match index dimension {}",
                query.dim(),
                self.dim
            )));
        }
        Ok(self.metric.prepare(query.as_slice()))
    }

    /// The `nprobe` clusters closest to the query, nearest first.
    pub fn select_clusters(&self, query: &Embedding, nprobe: usize) -> Result<Vec<u32>> {
        if nprobe == 0 || nprobe > self.k_clusters() {
            return Err(invalid(format!(
                "nprobe {nprobe} outside 1..={}",
                self.k_clusters()
            )));
        }
        let q = self.prepare_query(query)?;
        let mut scored: Vec<(f64, u32)> = (0..self.k_clusters())
            .map(|c| (squared_l2(&q, self.centroids.row(c)), c as u32))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(nprobe).map(|(_, c)| c).collect())
    }

    /// Exact top-k of one cluster for a prepared query.
    pub fn scan_cluster(&self, cluster: u32, prepared_query: &[f32], k: usize) -> TopKResult {
        let list = &self.lists[cluster as usize];
        let mut collector = Collector::new(k);
        for (i, &id) in list.ids.iter().enumerate() {
            let d = squared_l2(prepared_query, &list.data[i * self.dim..(i + 1) * self.dim]);
            collector.push(Neighbor::new(id, d));
        }
        collector.finish()
    }

    /// Exact distance from a prepared query to a stored document.
    pub fn rescore(&self, prepared_query: &[f32], doc_id: u64) -> Option<f64> {
        self.vector_of(doc_id).map(|v| squared_l2(prepared_query, v))
    }

    /// Mean Euclidean distance from each vector to its centroid.
    pub fn mean_centroid_distance(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .lists
            .iter()
            .enumerate()
            .map(|(c, list)| {
                list.data
                    .chunks(self.dim)
                    .map(|v| l2_distance(v, self.centroids.row(c)))
                    .sum::<f64>()
            })
            .sum();
        total / self.len() as f64
    }
}

/// Exact top-k over the whole corpus.
pub fn brute_force_search(corpus: &Corpus, query: &Embedding, k: usize) -> Result<TopKResult> {
    if query.dim() != corpus.dim() {
        return Err(invalid("query dimension does not match corpus"));
    }
    let q = corpus.metric().prepare(query.as_slice());
    let mut collector = Collector::new(k);
    for (i, &id) in corpus.ids().iter().enumerate() {
        let v = corpus.vector(i);
        let d = match corpus.metric() {
            Metric::L2 => squared_l2(&q, v),
            Metric::Cosine => squared_l2(&q, &normalize(v)),
        };
        collector.push(Neighbor::new(id, d));
    }
    Ok(collector.finish())
}

/// Outcome of one cursor advance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub clusters: Vec<u32>,
    pub heap_changed: bool,
}

impl StepReport {
    pub fn clusters_searched(&self) -> usize {
        self.clusters.len()
    }
}

/// Resumable search state for one query.
#[derive(Debug, Clone)]
pub struct SearchCursor {
    query: Vec<f32>,
    plan: Vec<u32>,
    next_pos: usize,
    heap: TopKResult,
    k: usize,
    clusters_searched: usize,
    unchanged_streak: usize,
    terminated: bool,
}

impl SearchCursor {
    pub fn new(index: &IvfIndex, query: &Embedding, plan: Vec<u32>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        let mut seen = HashSet::with_capacity(plan.len());
        for &c in &plan {
            if c as usize >= index.k_clusters() {
                return Err(invalid(format!("cluster {c} not in index")));
            }
            if !seen.insert(c) {
                return Err(invalid(format!("cluster {c} repeated in plan")));
            }
        }
        Ok(Self {
            query: index.prepare_query(query)?,
            plan,
            next_pos: 0,
            heap: TopKResult::empty(),
            k,
            clusters_searched: 0,
            unchanged_streak: 0,
            terminated: false,
        })
    }

    /// Warms the heap with documents that are re-scored against this query.
    /// Documents outside the plan's clusters are ignored, so seeding never
    /// changes the final result.
    pub fn seed(&mut self, index: &IvfIndex, doc_ids: &[u64]) {
        let in_plan: HashSet<u32> = self.plan.iter().copied().collect();
        let candidates = doc_ids
            .iter()
            .filter(|&&id| index.cluster_of(id).is_some_and(|c| in_plan.contains(&c)))
            .filter_map(|&id| index.rescore(&self.query, id).map(|d| Neighbor::new(id, d)))
            .collect();
        let seeds = TopKResult::from_candidates(candidates, self.k);
        self.heap = merge_topk(&self.heap, &seeds, self.k);
    }

    pub fn prepared_query(&self) -> &[f32] {
        &self.query
    }

    pub fn plan(&self) -> &[u32] {
        &self.plan
    }

    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    pub fn heap(&self) -> &TopKResult {
        &self.heap
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn clusters_searched(&self) -> usize {
        self.clusters_searched
    }

    pub fn unchanged_streak(&self) -> usize {
        self.unchanged_streak
    }

    pub fn searched_clusters(&self) -> &[u32] {
        &self.plan[..self.next_pos]
    }

    pub fn remaining(&self) -> &[u32] {
        if self.terminated {
            &[]
        } else {
            &self.plan[self.next_pos..]
        }
    }

    pub fn is_complete(&self) -> bool {
        self.terminated || self.next_pos >= self.plan.len()
    }

    pub fn is_terminated_early(&self) -> bool {
        self.terminated && self.next_pos < self.plan.len()
    }

    /// Stops the search; remaining clusters are skipped.
    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// Folds a cluster's local top-k into the heap. The cluster must be the
    /// next one in the plan.
    pub fn absorb(&mut self, cluster: u32, local: &TopKResult) -> Result<bool> {
        if self.is_complete() {
            return Err(Error::Internal("absorb on a complete cursor".into()));
        }
        if self.plan[self.next_pos] != cluster {
            return Err(Error::Internal(format!(
                "cluster {cluster} is not next in plan (expected {})",
                self.plan[self.next_pos]
            )));
        }
        let merged = merge_topk(&self.heap, local, self.k);
        let changed = merged != self.heap;
        self.heap = merged;
        self.next_pos += 1;
        self.clusters_searched += 1;
        if changed {
            self.unchanged_streak = 0;
        } else {
            self.unchanged_streak += 1;
        }
        Ok(changed)
    }
}

/// Searches up to `cluster_budget` of the cursor's remaining clusters in plan
/// order. An exhausted cursor yields an empty report.
pub fn search_step(index: &IvfIndex, cursor: &mut SearchCursor, cluster_budget: usize) -> Result<StepReport> {
    if cluster_budget == 0 {
        return Err(invalid("cluster_budget must be >= 1"));
    }
    let clusters: Vec<u32> = cursor.remaining().iter().take(cluster_budget).copied().collect();
    search_clusters(index, cursor, &clusters)
}

/// Searches an explicit run of clusters, which must be the next entries of
/// the cursor's plan.
pub fn search_clusters(index: &IvfIndex, cursor: &mut SearchCursor, clusters: &[u32]) -> Result<StepReport> {
    let mut report = StepReport::default();
    for &c in clusters {
        let local = index.scan_cluster(c, &cursor.query, cursor.k);
        report.heap_changed |= cursor.absorb(c, &local)?;
        report.clusters.push(c);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn corpus_a() -> Corpus {
        let pts: [[f32; 2]; 8] = [
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [0.1, 0.1],
            [9.9, 10.0],
            [10.1, 10.0],
            [10.0, 10.0],
            [10.0, 10.1],
        ];
        Corpus::new(2, Metric::L2, (0..8).collect(), pts.iter().flatten().copied().collect()).unwrap()
    }

    fn two_centroids() -> Centroids {
        Centroids::new(2, vec![0.05, 0.05, 10.0, 10.025]).unwrap()
    }

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn corpus_a_lists_split_four_and_four() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        assert_eq!(index.cluster_len(0), 4);
        assert_eq!(index.cluster_len(1), 4);
        assert_eq!(index.cluster_ids(0), &[0, 1, 2, 3]);
    }

    #[test]
    fn single_centroid_holds_everything() {
        let index = IvfIndex::build(&corpus_a(), Centroids::new(2, vec![5.0, 5.0]).unwrap()).unwrap();
        assert_eq!(index.cluster_len(0), 8);
    }

    #[test]
    fn equidistant_point_goes_to_lower_cluster() {
        let corpus = Corpus::new(1, Metric::L2, vec![42], vec![0.0]).unwrap();
        let index = IvfIndex::build(&corpus, Centroids::new(1, vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(index.cluster_of(42), Some(0));
    }

    #[test]
    fn duplicate_ids_and_dim_mismatch_rejected() {
        assert!(matches!(
            Corpus::new(1, Metric::L2, vec![1, 1], vec![0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
        let c = corpus_a();
        assert!(IvfIndex::build(&c, Centroids::new(3, vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn select_nearest_cluster_and_full_permutation() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        assert_eq!(index.select_clusters(&emb(&[1.0, 0.0]), 1).unwrap(), vec![0]);
        let mut all = index.select_clusters(&emb(&[1.0, 0.0]), 2).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1]);
        assert!(index.select_clusters(&emb(&[1.0, 0.0]), 0).is_err());
        assert!(index.select_clusters(&emb(&[1.0, 0.0]), 3).is_err());
    }

    #[test]
    fn step_over_both_clusters_finds_origin() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        let mut cur = SearchCursor::new(&index, &emb(&[0.0, 0.0]), vec![0, 1], 1).unwrap();
        let rep = search_step(&index, &mut cur, 2).unwrap();
        assert_eq!(rep.clusters_searched(), 2);
        assert_eq!(cur.next_pos(), 2);
        assert_eq!(cur.heap().entries(), &[Neighbor::new(0, 0.0)]);
        // exhausted cursor is a no-op
        let rep = search_step(&index, &mut cur, 1).unwrap();
        assert_eq!(rep, StepReport::default());
    }

    #[test]
    fn budget_beyond_plan_completes() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        let mut cur = SearchCursor::new(&index, &emb(&[0.0, 0.0]), vec![1, 0], 3).unwrap();
        search_step(&index, &mut cur, 1).unwrap();
        let rep = search_step(&index, &mut cur, 10).unwrap();
        assert_eq!(rep.clusters, vec![0]);
        assert!(cur.is_complete());
    }

    #[test]
    fn split_steps_match_single_pass() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        let q = emb(&[5.0, 5.0]);
        let mut a = SearchCursor::new(&index, &q, vec![0, 1], 3).unwrap();
        search_step(&index, &mut a, 1).unwrap();
        search_step(&index, &mut a, 1).unwrap();
        let mut b = SearchCursor::new(&index, &q, vec![0, 1], 3).unwrap();
        search_step(&index, &mut b, 2).unwrap();
        assert_eq!(a.heap(), b.heap());
    }

    #[test]
    fn streak_resets_exactly_on_change() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        let mut cur = SearchCursor::new(&index, &emb(&[0.0, 0.0]), vec![0, 1], 2).unwrap();
        let r1 = search_step(&index, &mut cur, 1).unwrap();
        assert!(r1.heap_changed);
        assert_eq!(cur.unchanged_streak(), 0);
        let r2 = search_step(&index, &mut cur, 1).unwrap();
        assert!(!r2.heap_changed);
        assert_eq!(cur.unchanged_streak(), 1);
    }

    #[test]
    fn absorb_out_of_plan_is_internal_error() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        let mut cur = SearchCursor::new(&index, &emb(&[0.0, 0.0]), vec![0, 1], 2).unwrap();
        assert!(matches!(
            search_clusters(&index, &mut cur, &[1]),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn brute_force_basics() {
        let c = corpus_a();
        let r = brute_force_search(&c, &emb(&[0.0, 0.0]), 1).unwrap();
        assert_eq!(r.entries(), &[Neighbor::new(0, 0.0)]);
        let all = brute_force_search(&c, &emb(&[0.0, 0.0]), 100).unwrap();
        assert_eq!(all.len(), 8);
        assert!(all.is_valid());
    }

    #[test]
    fn seeds_outside_plan_are_dropped() {
        let index = IvfIndex::build(&corpus_a(), two_centroids()).unwrap();
        let mut cur = SearchCursor::new(&index, &emb(&[0.0, 0.0]), vec![0], 2).unwrap();
        cur.seed(&index, &[6, 1]);
        assert_eq!(cur.heap().ids(), vec![1]);
    }

    #[test]
    fn cosine_index_normalizes() {
        let corpus = Corpus::new(2, Metric::Cosine, vec![0, 1], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let index = IvfIndex::build(&corpus, Centroids::new(2, vec![1.0, 0.0]).unwrap()).unwrap();
        let mut cur = SearchCursor::new(&index, &emb(&[5.0, 0.0]), vec![0], 2).unwrap();
        search_step(&index, &mut cur, 1).unwrap();
        assert_eq!(cur.heap().entries()[0], Neighbor::new(0, 0.0));
        assert!((cur.heap().entries()[1].distance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_nan_and_empty() {
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![f32::NAN]).is_err());
    }
}
