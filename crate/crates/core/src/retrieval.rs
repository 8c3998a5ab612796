//! Step-wise retrieval worker: variable-length batches of cluster searches
//! across requests, billed on a slow lane and a faster cache-resident lane.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raggraph::SubNodeId;
use crate::vector_index::{IvfIndex, SearchCursor, TopKResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskOrigin {
    Normal,
    SpeculativeRetrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lane {
    Slow,
    Fast,
}

/// A live search for one retrieval stage of one request.
#[derive(Debug, Clone)]
pub struct RetrievalTask {
    pub request: u64,
    pub node: u32,
    /// Sub-node that issued the task, when the stage has been split.
    pub subnode: Option<SubNodeId>,
    pub cursor: SearchCursor,
    pub origin: TaskOrigin,
}

impl RetrievalTask {
    pub fn key(&self) -> (u64, u32) {
        (self.request, self.node)
    }
}

/// Per-cluster cost: `size · per_vector_ns`, divided by `fast_speedup` on the
/// fast lane. Every step additionally pays `fixed_call_us`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCostModel {
    pub per_vector_ns: f64,
    pub fast_speedup: f64,
    pub fixed_call_us: f64,
}

impl Default for RetrievalCostModel {
    fn default() -> Self {
        Self {
            per_vector_ns: 5000.0,
            fast_speedup: 8.0,
            fixed_call_us: 50.0,
        }
    }
}

impl RetrievalCostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.per_vector_ns >= 0.0 && self.fast_speedup >= 1.0 && self.fixed_call_us >= 0.0) {
            return Err(invalid("cost model needs per_vector_ns >= 0, fast_speedup >= 1, fixed_call_us >= 0"));
        }
        Ok(())
    }

    pub fn fixed_ms(&self) -> f64 {
        self.fixed_call_us / 1000.0
    }

    pub fn vectors_cost_ms(&self, vectors: usize, lane: Lane) -> f64 {
        let slow = vectors as f64 * self.per_vector_ns / 1e6;
        match lane {
            Lane::Slow => slow,
            Lane::Fast => slow / self.fast_speedup,
        }
    }

    /// Virtual step time: the lanes overlap.
    pub fn step_ms(&self, slow_ms: f64, fast_ms: f64) -> f64 {
        slow_ms.max(fast_ms) + self.fixed_ms()
    }
}

/// Variable cost of searching one cluster on a lane, in milliseconds.
pub fn estimate_cluster_cost(index: &IvfIndex, cost: &RetrievalCostModel, cluster: u32, lane: Lane) -> f64 {
    cost.vectors_cost_ms(index.cluster_len(cluster), lane)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub request: u64,
    pub node: u32,
    /// Next clusters of the task's plan, in plan order.
    pub clusters: Vec<u32>,
    /// Subset of `clusters` served by the fast lane.
    pub fast: BTreeSet<u32>,
}

impl BatchItem {
    pub fn slow_only(request: u64, node: u32, clusters: Vec<u32>) -> Self {
        Self {
            request,
            node,
            clusters,
            fast: BTreeSet::new(),
        }
    }

    pub fn lane_of(&self, cluster: u32) -> Lane {
        if self.fast.contains(&cluster) {
            Lane::Fast
        } else {
            Lane::Slow
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubStageBatch {
    pub items: Vec<BatchItem>,
    pub planned_cost_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemReport {
    pub request: u64,
    pub node: u32,
    pub clusters: Vec<u32>,
    pub heap_changed: bool,
    pub unchanged_streak: usize,
    pub complete: bool,
    /// Heap after this step.
    pub heap: TopKResult,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneStats {
    pub slow_clusters: usize,
    pub fast_clusters: usize,
    pub slow_ms: f64,
    pub fast_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RetrievalStepReport {
    /// Ordered by `(request, node)`.
    pub items: Vec<ItemReport>,
    /// Tasks whose plan is exhausted, removed from the engine.
    pub completions: Vec<RetrievalTask>,
    pub modeled_ms: f64,
    pub measured_ms: f64,
    pub lanes: LaneStats,
}

#[derive(Debug)]
pub struct RetrievalEngine {
    cost: RetrievalCostModel,
    tasks: BTreeMap<(u64, u32), RetrievalTask>,
    parallel: bool,
}

impl RetrievalEngine {
    pub fn new(cost: RetrievalCostModel) -> Result<Self> {
        cost.validate()?;
        Ok(Self {
            cost,
            tasks: BTreeMap::new(),
            parallel: true,
        })
    }

    /// Scan clusters on the rayon pool (default) or on the calling thread.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn cost(&self) -> &RetrievalCostModel {
        &self.cost
    }

    pub fn submit(&mut self, task: RetrievalTask) -> Result<()> {
        let key = task.key();
        if self.tasks.contains_key(&key) {
            return Err(invalid(format!(
                "request {} already has a live retrieval for node {}",
                key.0, key.1
            )));
        }
        self.tasks.insert(key, task);
        Ok(())
    }

    pub fn task(&self, request: u64, node: u32) -> Option<&RetrievalTask> {
        self.tasks.get(&(request, node))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &RetrievalTask> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn cancel(&mut self, request: u64, node: u32) -> Option<RetrievalTask> {
        self.tasks.remove(&(request, node))
    }

    pub fn cancel_request(&mut self, request: u64) -> Vec<RetrievalTask> {
        let keys: Vec<_> = self.tasks.range((request, 0)..=(request, u32::MAX)).map(|(k, _)| *k).collect();
        keys.into_iter().filter_map(|k| self.tasks.remove(&k)).collect()
    }

    /// Stops a search early and hands back the finished task.
    pub fn terminate(&mut self, request: u64, node: u32) -> Option<RetrievalTask> {
        let mut t = self.tasks.remove(&(request, node))?;
        t.cursor.terminate();
        Some(t)
    }

    /// Modeled cost of a batch given its lane partition.
    pub fn batch_cost_ms(&self, index: &IvfIndex, batch: &SubStageBatch) -> LaneStats {
        let mut s = LaneStats::default();
        for item in &batch.items {
            for &c in &item.clusters {
                let lane = item.lane_of(c);
                let ms = estimate_cluster_cost(index, &self.cost, c, lane);
                match lane {
                    Lane::Slow => {
                        s.slow_clusters += 1;
                        s.slow_ms += ms;
                    }
                    Lane::Fast => {
                        s.fast_clusters += 1;
                        s.fast_ms += ms;
                    }
                }
            }
        }
        s
    }

    /// Runs one sub-stage batch. Both lanes do the same exact math; lanes
    /// only change the modeled time.
    pub fn retrieval_step(&mut self, index: &IvfIndex, batch: &SubStageBatch) -> Result<RetrievalStepReport> {
        let started = Instant::now();
        let mut seen = BTreeSet::new();
        for item in &batch.items {
            if !seen.insert((item.request, item.node)) {
                return Err(Error::Internal(format!(
                    "request {} node {} appears twice in one batch",
                    item.request, item.node
                )));
            }
            let task = self.tasks.get(&(item.request, item.node)).ok_or_else(|| {
                Error::Internal(format!("no live retrieval for request {} node {}", item.request, item.node))
            })?;
            let remaining = task.cursor.remaining();
            if item.clusters.len() > remaining.len() || item.clusters[..] != remaining[..item.clusters.len()] {
                return Err(Error::Internal(format!(
                    "clusters {:?} are not the next entries of the plan for request {} node {}",
                    item.clusters, item.request, item.node
                )));
            }
            if item.fast.iter().any(|c| !item.clusters.contains(c)) {
                return Err(Error::Internal("fast lane cluster outside the item's clusters".into()));
            }
        }

        let work: Vec<(usize, u32)> = batch
            .items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| it.clusters.iter().map(move |&c| (i, c)))
            .collect();
        let scan = |&(i, c): &(usize, u32)| -> TopKResult {
            let it = &batch.items[i];
            let cursor = &self.tasks[&(it.request, it.node)].cursor;
            index.scan_cluster(c, cursor.prepared_query(), cursor.k())
        };
        let locals: Vec<TopKResult> = if self.parallel {
            work.par_iter().map(scan).collect()
        } else {
            work.iter().map(scan).collect()
        };

        let mut report = RetrievalStepReport {
            lanes: self.batch_cost_ms(index, batch),
            ..RetrievalStepReport::default()
        };
        let mut locals = locals.into_iter();
        for item in &batch.items {
            let task = self.tasks.get_mut(&(item.request, item.node)).expect("checked above");
            let mut changed = false;
            for &c in &item.clusters {
                changed |= task.cursor.absorb(c, &locals.next().expect("one local per cluster"))?;
            }
            report.items.push(ItemReport {
                request: item.request,
                node: item.node,
                clusters: item.clusters.clone(),
                heap_changed: changed,
                unchanged_streak: task.cursor.unchanged_streak(),
                complete: task.cursor.is_complete(),
                heap: task.cursor.heap().clone(),
            });
        }
        report.items.sort_by_key(|r| (r.request, r.node));
        for r in &report.items {
            if r.complete {
                report.completions.push(self.tasks.remove(&(r.request, r.node)).expect("live"));
            }
        }
        report.modeled_ms = if batch.items.is_empty() {
            0.0
        } else {
            self.cost.step_ms(report.lanes.slow_ms, report.lanes.fast_ms)
        };
        report.measured_ms = started.elapsed().as_secs_f64() * 1000.0;
        Ok(report)
    }
}
