//! Request scheduling across the generation and retrieval workers.
//!
//! One state machine drives three strategies. The virtual clock replays a
//! run deterministically from modeled latencies; the live clock runs the
//! two workers on threads.

mod budget;
mod machine;
mod live;
mod speculation;
mod virtual_clock;

use serde::{Deserialize, Serialize};

pub use budget::{
    calibrate, compute_time_budget, decode_window, fit_calibration, measure_throughput, plan_substages,
    select_wavefront, throughput_estimate, trigger_speculation, BudgetForm, Calibration, PendingStage, Sample,
    ThroughputEstimate, Wavefront, MIN_BUDGET_MS,
};
pub use speculation::{choose_speculative_candidates, SpecCandidate};

use crate::error::{invalid, Result};
use crate::generation::GenLatencyModel;
use crate::harness::report::{ExperimentReport, TraceEvent};
use crate::harness::workload::Workload;
use crate::retrieval::RetrievalCostModel;
use crate::similarity::DEFAULT_STREAK;
use crate::vector_index::IvfIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One stage runs system-wide at a time.
    #[serde(alias = "coarse")]
    CoarseSequential,
    /// Whole stages overlap across the two workers.
    #[serde(alias = "naive")]
    NaiveAsync,
    /// Sub-stage batching with similarity reuse, speculation and caching.
    #[default]
    Hedra,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::CoarseSequential => "coarse-sequential",
            Strategy::NaiveAsync => "naive-async",
            Strategy::Hedra => "hedra",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Live,
}

impl ClockMode {
    pub fn name(self) -> &'static str {
        match self {
            ClockMode::Virtual => "virtual",
            ClockMode::Live => "live",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub strategy: Strategy,
    pub clock: ClockMode,
    /// Scheduling overhead per sub-stage.
    pub beta_ms: f64,
    /// Speculation fires while current/max throughput is below this.
    pub tau: f64,
    /// Fixed sub-stage budget instead of the solver.
    pub mb_override_ms: Option<f64>,
    pub budget_form: BudgetForm,
    pub nprobe: usize,
    /// Replaces every retrieval node's top-k.
    pub topk: Option<usize>,
    /// Stop a retrieval once its heap is unchanged for `streak_e` clusters.
    pub approx: bool,
    pub streak_e: usize,
    pub speculation: bool,
    pub cache: bool,
    /// Resident clusters; defaults to a fifth of the index.
    pub capacity_gc: Option<usize>,
    pub cache_update_interval: usize,
    /// Per-request deadline; requests still running at it are failed.
    pub slo_ms: Option<f64>,
    pub seed: u64,
    pub gen_model: GenLatencyModel,
    pub ret_cost: RetrievalCostModel,
    /// Locality threshold; defaults to a fraction of the mean
    /// vector-to-centroid distance.
    pub delta: Option<f64>,
    /// Generation throughput model; measured on the latency model if absent.
    pub calibration: Option<Calibration>,
    /// Smoothing of the observed retrieval stage time.
    pub ewma_alpha: f64,
    /// Live mode sleeps `latency · live_time_scale` per generation step.
    pub live_time_scale: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hedra,
            clock: ClockMode::Virtual,
            beta_ms: 1.0,
            tau: 0.8,
            mb_override_ms: None,
            budget_form: BudgetForm::Subtractive,
            nprobe: 16,
            topk: None,
            approx: false,
            streak_e: DEFAULT_STREAK,
            speculation: true,
            cache: true,
            capacity_gc: None,
            cache_update_interval: 50,
            slo_ms: None,
            seed: 0,
            gen_model: GenLatencyModel::default(),
            ret_cost: RetrievalCostModel::default(),
            delta: None,
            calibration: None,
            ewma_alpha: 0.2,
            live_time_scale: 1.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nprobe == 0 {
            return Err(invalid("nprobe must be at least 1"));
        }
        if self.topk == Some(0) {
            return Err(invalid("topk must be at least 1"));
        }
        if self.streak_e == 0 {
            return Err(invalid("streak_e must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau must lie in (0, 1]"));
        }
        if !(self.beta_ms > 0.0) {
            return Err(invalid("beta_ms must be positive"));
        }
        if let Some(mb) = self.mb_override_ms {
            if !(mb > 0.0) {
                return Err(invalid("mb_override_ms must be positive"));
            }
        }
        if let Some(slo) = self.slo_ms {
            if !(slo > 0.0) {
                return Err(invalid("slo_ms must be positive"));
            }
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(invalid("ewma_alpha must lie in (0, 1]"));
        }
        if !(self.live_time_scale >= 0.0) {
            return Err(invalid("live_time_scale must be non-negative"));
        }
        if self.cache_update_interval == 0 {
            return Err(invalid("cache_update_interval must be at least 1"));
        }
        self.gen_model.validate()?;
        self.ret_cost.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub trace: Vec<TraceEvent>,
}

/// Serves every request of `workload` against `index`.
pub fn run(cfg: &SchedulerConfig, index: &IvfIndex, workload: &Workload) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.clock {
        ClockMode::Virtual => virtual_clock::run_virtual(cfg, index, workload),
        ClockMode::Live => live::run_live(cfg, index, workload),
    }
}
