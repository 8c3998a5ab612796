use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raggraph::Bindings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub workflow: String,
    pub status: RequestStatus,
    pub arrival_ms: f64,
    pub finish_ms: Option<f64>,
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub bindings: Bindings,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub admitted: usize,
    pub completed: usize,
    pub failed: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub throughput_rps: f64,
    pub makespan_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeculationStats {
    pub generation_issued: usize,
    pub valid: usize,
    pub mismatch: usize,
    pub rollbacks: usize,
    /// `valid / (valid + mismatch)`; absent when nothing was validated.
    pub accuracy: Option<f64>,
    pub retrieval_issued: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub enabled: bool,
    pub capacity_gc: usize,
    pub hit_rate: f64,
    pub accesses: u64,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LaneUtilization {
    pub slow_busy_ms: f64,
    pub fast_busy_ms: f64,
    pub slow_clusters: usize,
    pub fast_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkerStats {
    pub gen_busy_ms: f64,
    pub ret_busy_ms: f64,
    pub gen_idle_fraction: f64,
    pub ret_idle_fraction: f64,
    pub gen_steps: u64,
    pub ret_batches: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageStats {
    pub count: usize,
    pub total_ms: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub stages: usize,
    pub clusters_searched: usize,
    pub mean_clusters_per_stage: f64,
    pub terminated_early: usize,
    pub final_budget_ms: f64,
    pub final_t_retrieval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: String,
    pub clock: String,
    pub seed: u64,
    pub summary: Summary,
    pub speculation: SpeculationStats,
    pub cache: CacheStats,
    pub lanes: LaneUtilization,
    pub workers: WorkerStats,
    pub retrieval: RetrievalStats,
    /// Keyed by stage kind (`generation`, `retrieval`).
    pub stages: BTreeMap<String, StageStats>,
    pub requests: BTreeMap<u64, RequestOutcome>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Fills the summary from the per-request outcomes.
    pub fn summarize(&mut self, makespan_ms: f64) {
        let mut lat: Vec<f64> = self.requests.values().filter_map(|r| r.latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        let completed = lat.len();
        self.summary = Summary {
            admitted: self.requests.len(),
            completed,
            failed: self.requests.values().filter(|r| r.status == RequestStatus::Failed).count(),
            p50_ms: percentile(&lat, 50.0),
            p95_ms: percentile(&lat, 95.0),
            p99_ms: percentile(&lat, 99.0),
            mean_ms: if completed == 0 { 0.0 } else { lat.iter().sum::<f64>() / completed as f64 },
            throughput_rps: if makespan_ms > 0.0 { completed as f64 / (makespan_ms / 1000.0) } else { 0.0 },
            makespan_ms,
        };
    }
}

/// Nearest-rank percentile of sorted values; 0 for an empty list.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub worker: String,
    pub request: Option<u64>,
    pub subnode: Option<u32>,
    pub event: String,
    pub duration: f64,
}

pub fn write_trace(path: impl AsRef<Path>, events: &[TraceEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Per-worker busy time and per-event counts of a trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceSummary {
    pub events: usize,
    pub span_ms: f64,
    pub busy_ms: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

pub fn summarize_trace(events: &[TraceEvent]) -> TraceSummary {
    let mut s = TraceSummary {
        events: events.len(),
        ..TraceSummary::default()
    };
    for e in events {
        *s.busy_ms.entry(e.worker.clone()).or_insert(0.0) += e.duration;
        *s.counts.entry(e.event.clone()).or_insert(0) += 1;
        s.span_ms = s.span_ms.max(e.time + e.duration);
    }
    s
}
