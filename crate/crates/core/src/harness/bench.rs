use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generation::{GenEngine, GenLatencyModel, GenTask};
use crate::raggraph::SubNodeId;
use crate::retrieval::{BatchItem, RetrievalCostModel, RetrievalEngine, RetrievalTask, SubStageBatch, TaskOrigin};
use crate::scheduler::{calibrate, Calibration};
use crate::tiered_cache::ThroughputProfile;
use crate::vector_index::{Embedding, IvfIndex, SearchCursor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// KV cache sizes to profile.
    pub kv_bytes: Vec<u64>,
    /// KV memory held by one running sequence.
    pub kv_bytes_per_seq: u64,
    pub gen_rps: Vec<f64>,
    pub ret_rps: Vec<f64>,
    pub tokens_per_request: usize,
    pub prompt_tokens: usize,
    /// Simulated arrival window of each generation measurement.
    pub horizon_ms: f64,
    pub nprobe: usize,
    pub topk: usize,
    /// Queries timed for the retrieval table.
    pub queries: usize,
    pub calibration_max_batch: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            kv_bytes: (1..=8).map(|i| i << 28).collect(),
            kv_bytes_per_seq: 1 << 26,
            gen_rps: vec![5.0, 10.0, 20.0, 40.0, 80.0],
            ret_rps: vec![5.0, 10.0, 20.0, 40.0, 80.0],
            tokens_per_request: 64,
            prompt_tokens: 64,
            horizon_ms: 10_000.0,
            nprobe: 16,
            topk: 10,
            queries: 64,
            calibration_max_batch: 16,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kv_bytes.is_empty() || self.gen_rps.is_empty() || self.ret_rps.is_empty() {
            return Err(invalid("bench grids must be non-empty"));
        }
        if self.gen_rps.iter().chain(&self.ret_rps).any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid("bench rates must be positive and finite"));
        }
        if self.kv_bytes_per_seq == 0 || self.tokens_per_request == 0 {
            return Err(invalid("kv_bytes_per_seq and tokens_per_request must be positive"));
        }
        if !(self.horizon_ms > 0.0) || self.nprobe == 0 || self.topk == 0 || self.queries == 0 {
            return Err(invalid("horizon, nprobe, topk and queries must be positive"));
        }
        if self.calibration_max_batch < 2 {
            return Err(invalid("calibration needs at least two batch sizes"));
        }
        Ok(())
    }
}

/// Offline measurements consumed by the scheduler and the memory solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub profile: ThroughputProfile,
    pub calibration: Calibration,
    pub beta_ms: f64,
    pub per_vector_ns: f64,
    /// Mean wall time of one full retrieval at the bench nprobe.
    pub query_ms: f64,
}

impl BenchReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Completed requests per second of a continuous-batching engine whose
/// concurrency is capped at `max_batch`, under evenly spaced arrivals.
pub fn gen_throughput(
    model: &GenLatencyModel,
    max_batch: usize,
    rps: f64,
    tokens: usize,
    prompt_tokens: usize,
    horizon_ms: f64,
) -> Result<f64> {
    if max_batch == 0 {
        return Ok(0.0);
    }
    let gap = 1000.0 / rps;
    let arrivals = ((horizon_ms / gap).floor() as u64).max(1);
    let mut engine = GenEngine::new(*model)?;
    let mut queue: VecDeque<u64> = VecDeque::new();
    let (mut next, mut now, mut done) = (0u64, 0.0f64, 0u64);
    while done < arrivals {
        while next < arrivals && next as f64 * gap <= now {
            queue.push_back(next);
            next += 1;
        }
        while engine.active().len() < max_batch {
            let Some(r) = queue.pop_front() else { break };
            engine.submit(
                GenTask {
                    request: r,
                    subnode: SubNodeId(0),
                    node: 0,
                    visit: 1,
                    start: 0,
                    end: tokens,
                    prefill_tokens: prompt_tokens,
                },
                tokens,
            )?;
        }
        if engine.is_idle() {
            now = next as f64 * gap;
            continue;
        }
        let step = engine.gen_step();
        now += step.latency_ms;
        done += step.completed.len() as u64;
    }
    Ok(arrivals as f64 / (now.max(arrivals as f64 * gap) / 1000.0))
}

fn sample_queries(index: &IvfIndex, n: usize) -> Vec<Embedding> {
    let stride = (index.len() / n.max(1)).max(1);
    (0..n)
        .filter_map(|i| {
            let cluster = (i * 7919 % index.k_clusters()) as u32;
            let ids = index.cluster_ids(cluster);
            let id = *ids.get(i * stride % ids.len().max(1))?;
            Embedding::new(index.vector_of(id)?.to_vec()).ok()
        })
        .collect()
}

/// Wall-clock nanoseconds per scanned vector over a pass of every cluster.
pub fn measure_per_vector_ns(index: &IvfIndex, queries: &[Embedding], k: usize) -> Result<f64> {
    let mut vectors = 0usize;
    let started = Instant::now();
    for q in queries {
        let prepared = index.prepare_query(q)?;
        for c in 0..index.k_clusters() as u32 {
            std::hint::black_box(index.scan_cluster(c, &prepared, k));
            vectors += index.cluster_len(c);
        }
    }
    if vectors == 0 {
        return Err(invalid("index has no vectors"));
    }
    Ok(started.elapsed().as_secs_f64() * 1e9 / vectors as f64)
}

/// Fixed cost of issuing one retrieval sub-stage: wall time of a
/// one-cluster step minus its scan time at `per_vector_ns`.
pub fn measure_beta_ms(index: &IvfIndex, queries: &[Embedding], k: usize, per_vector_ns: f64) -> Result<f64> {
    let smallest = (0..index.k_clusters() as u32)
        .filter(|&c| index.cluster_len(c) > 0)
        .min_by_key(|&c| (index.cluster_len(c), c))
        .ok_or_else(|| invalid("index has no vectors"))?;
    let mut engine = RetrievalEngine::new(RetrievalCostModel::default())?;
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let started = Instant::now();
        let cursor = SearchCursor::new(index, q, vec![smallest], k)?;
        engine.submit(RetrievalTask {
            request: i as u64,
            node: 0,
            subnode: None,
            cursor,
            origin: TaskOrigin::Normal,
        })?;
        let batch = SubStageBatch {
            items: vec![BatchItem::slow_only(i as u64, 0, vec![smallest])],
            planned_cost_ms: 0.0,
        };
        engine.retrieval_step(index, &batch)?;
        total += started.elapsed().as_secs_f64() * 1000.0;
    }
    let scan_ms = index.cluster_len(smallest) as f64 * per_vector_ns / 1e6;
    Ok((total / queries.len() as f64 - scan_ms).max(1e-3))
}

/// Mean wall milliseconds of a full `nprobe` search.
pub fn measure_query_ms(index: &IvfIndex, queries: &[Embedding], nprobe: usize, k: usize) -> Result<f64> {
    let started = Instant::now();
    for q in queries {
        let plan = index.select_clusters(q, nprobe)?;
        let mut cursor = SearchCursor::new(index, q, plan.clone(), k)?;
        crate::vector_index::search_clusters(index, &mut cursor, &plan)?;
        std::hint::black_box(cursor.heap());
    }
    Ok(started.elapsed().as_secs_f64() * 1000.0 / queries.len() as f64)
}

/// Measures the generation table, the retrieval table, calibration
/// constants, the sub-stage overhead and the scan rate.
pub fn run_bench(spec: &BenchSpec, model: &GenLatencyModel, index: &IvfIndex) -> Result<BenchReport> {
    spec.validate()?;
    let model = GenLatencyModel {
        seed: spec.seed,
        ..*model
    };
    let mut gen = Vec::new();
    for &kv in &spec.kv_bytes {
        let max_batch = (kv / spec.kv_bytes_per_seq) as usize;
        for &rps in &spec.gen_rps {
            let t = gen_throughput(&model, max_batch, rps, spec.tokens_per_request, spec.prompt_tokens, spec.horizon_ms)?;
            gen.push((kv, rps, t));
        }
    }

    let queries = sample_queries(index, spec.queries);
    if queries.is_empty() {
        return Err(invalid("index has no vectors"));
    }
    let per_vector_ns = measure_per_vector_ns(index, &queries, spec.topk)?;
    let beta_ms = measure_beta_ms(index, &queries, spec.topk, per_vector_ns)?;
    let query_ms = measure_query_ms(index, &queries, spec.nprobe.min(index.k_clusters()), spec.topk)?;
    let capacity = 1000.0 / query_ms.max(1e-9);
    let ret = spec.ret_rps.iter().map(|&r| (r, r.min(capacity))).collect();

    let dim = index.dim() as u64;
    let mean_cluster = index.len() as u64 / index.k_clusters().max(1) as u64;
    Ok(BenchReport {
        profile: ThroughputProfile {
            gen,
            ret,
            cluster_bytes: mean_cluster * (dim * 4 + 8),
        },
        calibration: calibrate(&model, spec.calibration_max_batch)?,
        beta_ms,
        per_vector_ns,
        query_ms,
    })
}
