//! Fast-tier partial index cache: access-frequency tracking, interval
//! updates with swaps on a separate transfer timeline, per-batch lane
//! partitioning, and the memory split between KV cache and index cache.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::vector_index::IvfIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity_gc: usize,
    /// Sub-stages between residency updates.
    pub update_interval: usize,
    /// A batch uses the fast lane only if at least this many of its clusters
    /// are resident.
    pub min_fast_clusters: usize,
    pub bandwidth_bytes_per_ms: f64,
    /// Multiplier applied to every counter after an update.
    pub decay: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity_gc: 0,
            update_interval: 50,
            min_fast_clusters: 2,
            bandwidth_bytes_per_ms: 16e9 / 1000.0,
            decay: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwapDir {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Swap {
    pub cluster: u32,
    pub dir: SwapDir,
    pub completes_at: f64,
}

#[derive(Debug, Clone)]
pub struct ClusterCacheState {
    cfg: CacheConfig,
    cluster_bytes: Vec<u64>,
    resident: BTreeSet<u32>,
    in_flight: Vec<Swap>,
    freq: BTreeMap<u32, f64>,
    substages_since_update: usize,
    channel_free_at: f64,
    accesses: u64,
    hits: u64,
    bytes_moved: u64,
}

impl ClusterCacheState {
    /// `cluster_bytes[c]` is the transfer size of cluster `c`.
    pub fn new(cfg: CacheConfig, cluster_bytes: Vec<u64>) -> Result<Self> {
        if cfg.update_interval == 0 {
            return Err(invalid("update_interval must be >= 1"));
        }
        if !(cfg.bandwidth_bytes_per_ms > 0.0) || !(0.0..=1.0).contains(&cfg.decay) {
            return Err(invalid("cache needs positive bandwidth and decay in [0, 1]"));
        }
        Ok(Self {
            cfg,
            cluster_bytes,
            resident: BTreeSet::new(),
            in_flight: Vec::new(),
            freq: BTreeMap::new(),
            substages_since_update: 0,
            channel_free_at: 0.0,
            accesses: 0,
            hits: 0,
            bytes_moved: 0,
        })
    }

    /// Sizes clusters from the index's inverted lists (f32 vectors plus u64 ids).
    pub fn for_index(cfg: CacheConfig, index: &IvfIndex) -> Result<Self> {
        let bytes = (0..index.k_clusters() as u32)
            .map(|c| (index.cluster_len(c) * (index.dim() * 4 + 8)) as u64)
            .collect();
        Self::new(cfg, bytes)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn resident(&self) -> &BTreeSet<u32> {
        &self.resident
    }

    pub fn in_flight(&self) -> &[Swap] {
        &self.in_flight
    }

    pub fn frequency(&self, cluster: u32) -> f64 {
        self.freq.get(&cluster).copied().unwrap_or(0.0)
    }

    /// Fraction of recorded accesses that found their cluster resident.
    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    pub fn bytes_moved(&self) -> u64 {
        self.bytes_moved
    }

    pub fn reset_hit_stats(&mut self) {
        self.accesses = 0;
        self.hits = 0;
    }

    /// Counts one access per distinct cluster of a sub-stage.
    pub fn record_access(&mut self, clusters: &[u32]) {
        let distinct: BTreeSet<u32> = clusters.iter().copied().collect();
        for c in distinct {
            *self.freq.entry(c).or_insert(0.0) += 1.0;
            self.accesses += 1;
            self.hits += u64::from(self.resident.contains(&c));
        }
    }

    /// Applies swaps finished by `now`.
    pub fn complete_swaps(&mut self, now: f64) {
        let (done, pending): (Vec<Swap>, Vec<Swap>) = self.in_flight.iter().partition(|s| s.completes_at <= now);
        self.in_flight = pending;
        for s in done {
            if s.dir == SwapDir::In {
                self.resident.insert(s.cluster);
            }
        }
    }

    /// The `capacity_gc` most frequent clusters, ties to the lower id.
    pub fn target_set(&self) -> BTreeSet<u32> {
        let mut ranked: Vec<(u32, f64)> = self.freq.iter().filter(|(_, &f)| f > 0.0).map(|(&c, &f)| (c, f)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(self.cfg.capacity_gc).map(|(c, _)| c).collect()
    }

    /// Counts a sub-stage and, every `update_interval` sub-stages, moves
    /// residency toward the current top clusters. Evictions are immediate;
    /// loads queue on the transfer channel and become resident when they
    /// complete. Returns the swaps issued.
    pub fn maybe_update(&mut self, now: f64) -> Vec<Swap> {
        self.complete_swaps(now);
        self.substages_since_update += 1;
        if self.substages_since_update < self.cfg.update_interval {
            return Vec::new();
        }
        self.substages_since_update = 0;
        let target = self.target_set();
        for f in self.freq.values_mut() {
            *f *= self.cfg.decay;
        }

        let mut swaps = Vec::new();
        self.in_flight.retain(|s| target.contains(&s.cluster));
        let evict: Vec<u32> = self.resident.difference(&target).copied().collect();
        for c in evict {
            self.resident.remove(&c);
            swaps.push(Swap {
                cluster: c,
                dir: SwapDir::Out,
                completes_at: now,
            });
        }
        let loading: BTreeSet<u32> = self.in_flight.iter().map(|s| s.cluster).collect();
        for &c in target.iter().filter(|c| !self.resident.contains(c) && !loading.contains(c)) {
            let bytes = self.cluster_bytes.get(c as usize).copied().unwrap_or(0);
            let start = self.channel_free_at.max(now);
            let done = start + bytes as f64 / self.cfg.bandwidth_bytes_per_ms;
            self.channel_free_at = done;
            self.bytes_moved += bytes;
            let s = Swap {
                cluster: c,
                dir: SwapDir::In,
                completes_at: done,
            };
            self.in_flight.push(s);
            swaps.push(s);
        }
        debug_assert!(self.resident.len() + self.in_flight.len() <= self.cfg.capacity_gc);
        swaps
    }

    /// Splits clusters into fast (resident) and slow sets. Below
    /// `min_fast_clusters` resident hits everything goes slow.
    pub fn partition_batch(&self, clusters: &[u32]) -> (BTreeSet<u32>, BTreeSet<u32>) {
        let (fast, slow): (BTreeSet<u32>, BTreeSet<u32>) = clusters.iter().partition(|c| self.resident.contains(c));
        if fast.len() < self.cfg.min_fast_clusters.max(1) {
            return (BTreeSet::new(), clusters.iter().copied().collect());
        }
        (fast, slow)
    }
}

/// Measured throughput tables plus the uniform cluster size.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThroughputProfile {
    /// `(kv_bytes, rps, throughput)`.
    pub gen: Vec<(u64, f64, f64)>,
    /// `(rps, throughput)`.
    pub ret: Vec<(f64, f64)>,
    pub cluster_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    kind: String,
    kv_bytes: u64,
    rps: f64,
    throughput: f64,
}

impl ThroughputProfile {
    /// CSV with columns `kind,kv_bytes,rps,throughput`. Kind is `gen`, `ret`,
    /// or `cluster` (a single row whose `kv_bytes` holds the cluster size).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for &(kv_bytes, rps, throughput) in &self.gen {
            w.serialize(ProfileRow { kind: "gen".into(), kv_bytes, rps, throughput })?;
        }
        for &(rps, throughput) in &self.ret {
            w.serialize(ProfileRow { kind: "ret".into(), kv_bytes: 0, rps, throughput })?;
        }
        w.serialize(ProfileRow {
            kind: "cluster".into(),
            kv_bytes: self.cluster_bytes,
            rps: 0.0,
            throughput: 0.0,
        })?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut p = Self::default();
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: ProfileRow = row?;
            match row.kind.as_str() {
                "gen" => p.gen.push((row.kv_bytes, row.rps, row.throughput)),
                "ret" => p.ret.push((row.rps, row.throughput)),
                "cluster" => p.cluster_bytes = row.kv_bytes,
                other => return Err(invalid(format!("unknown profile row kind {other:?}"))),
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub kv_bytes: u64,
    pub cache_bytes: u64,
    pub capacity_gc: usize,
}

fn nearest(values: impl Iterator<Item = f64>, target: f64) -> Option<f64> {
    values.fold(None, |best: Option<f64>, v| match best {
        Some(b) if (b - target).abs() < (v - target).abs() => Some(b),
        Some(b) if (b - target).abs() == (v - target).abs() && b <= v => Some(b),
        _ => Some(v),
    })
}

/// Chooses the KV cache size maximizing `min(T_G(kv, rps_G), T_R(rps_R))`.
/// Among equal maxima the smallest KV size wins. Tables are looked up at
/// the nearest measured rps.
pub fn solve_memory_budget(profile: &ThroughputProfile, rps_g: f64, rps_r: f64, total_mem: u64, model_bytes: u64) -> Result<MemoryPlan> {
    if total_mem <= model_bytes {
        return Err(invalid("total memory must exceed model size"));
    }
    let free = total_mem - model_bytes;
    let rg = nearest(profile.gen.iter().map(|g| g.1), rps_g).ok_or_else(|| invalid("generation table is empty"))?;
    let rr = nearest(profile.ret.iter().map(|r| r.0), rps_r).ok_or_else(|| invalid("retrieval table is empty"))?;
    let t_r = profile
        .ret
        .iter()
        .find(|r| r.0 == rr)
        .map(|r| r.1)
        .expect("nearest value comes from the table");

    let mut grid: Vec<(u64, f64)> = profile
        .gen
        .iter()
        .filter(|g| g.1 == rg && g.0 <= free)
        .map(|g| (g.0, g.2))
        .collect();
    grid.sort_by_key(|g| g.0);
    let mut best: Option<(u64, f64)> = None;
    for (kv, t_g) in grid {
        let score = t_g.min(t_r);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((kv, score));
        }
    }
    let (kv_bytes, _) = best.ok_or_else(|| invalid("no KV size in the profile fits in memory"))?;
    let cache_bytes = free - kv_bytes;
    let capacity_gc = if profile.cluster_bytes == 0 {
        0
    } else {
        (cache_bytes / profile.cluster_bytes) as usize
    };
    Ok(MemoryPlan {
        kv_bytes,
        cache_bytes,
        capacity_gc,
    })
}
