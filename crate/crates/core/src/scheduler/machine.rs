//! Clock-independent scheduler state. Drivers feed it arrivals, deadlines
//! and worker reports, call [`Machine::dispatch`], and forward the queued
//! commands to the workers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::budget::{
    calibrate, compute_time_budget, decode_window, plan_substages, select_wavefront, throughput_estimate,
    Calibration, PendingStage, ThroughputEstimate,
};
use super::speculation::{choose_speculative_candidates, SpecCandidate};
use super::{SchedulerConfig, Strategy};
use crate::error::{invalid, Error, Result};
use crate::generation::{partial_embedding, GenStepReport, GenTask, GenerationScript};
use crate::harness::report::{
    CacheStats, ExperimentReport, LaneUtilization, RequestOutcome, RequestStatus, RetrievalStats, SpeculationStats,
    StageStats, TraceEvent, WorkerStats,
};
use crate::harness::workload::{RequestSpec, Workload};
use crate::raggraph::{
    render_prompt, template, Bindings, Endpoint, GraphInstance, NodeKind, RAGraph, RequestState, SnapshotId, Span,
    SubNodeId, Value,
};
use crate::retrieval::{estimate_cluster_cost, BatchItem, Lane, RetrievalStepReport, RetrievalTask, SubStageBatch, TaskOrigin};
use crate::similarity::{
    default_delta, reorder_clusters, semantic_drift, validate_speculation, LocalityCache, LocalityRecord, OutcomeKind,
    K_CACHE,
};
use crate::tiered_cache::{CacheConfig, ClusterCacheState};
use crate::vector_index::{Embedding, IvfIndex, SearchCursor, TopKResult};

/// Batch size used when calibrating generation throughput on the fly.
const CALIBRATION_BATCH: usize = 16;

#[derive(Debug, Clone)]
pub(crate) enum GenCmd {
    Submit { task: GenTask, script_tokens: usize },
    Cancel { request: u64, subnode: SubNodeId },
}

#[derive(Debug, Clone)]
pub(crate) enum RetCmd {
    Submit(Box<RetrievalTask>),
    Cancel { request: u64, node: u32 },
    Batch(SubStageBatch),
}

#[derive(Debug, Default)]
pub(crate) struct Outbox {
    pub gen: Vec<GenCmd>,
    pub ret: Vec<RetCmd>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pending,
    Active,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
struct GenStage {
    node: u32,
    visit: u32,
    output_var: String,
    prompt: String,
    total: usize,
    prompt_tokens: usize,
    submitted: usize,
    done: usize,
    inflight: Option<SubNodeId>,
    last_sub: Option<SubNodeId>,
    /// Dependency of the first window.
    entry_dep: Option<SubNodeId>,
    /// Set while the stage runs ahead of an unfinished retrieval.
    spec_anchor: Option<SnapshotId>,
    /// Tokens done at the previous and the latest window completion.
    marks: (usize, usize),
    ready_at: f64,
    spec_ret_tried: bool,
}

#[derive(Debug, Clone)]
struct RetRun {
    plan: Vec<u32>,
    next_pos: usize,
    heap: TopKResult,
    k: usize,
    in_batch: bool,
    substages: usize,
    last_sub: Option<SubNodeId>,
    started_at: f64,
}

#[derive(Debug, Clone)]
struct RetStage {
    node: u32,
    visit: u32,
    topk: usize,
    output_var: String,
    query: Embedding,
    ready_at: f64,
    run: Option<RetRun>,
    spec_tried: bool,
}

#[derive(Debug, Clone)]
enum Stage {
    Gen(GenStage),
    Ret(RetStage),
}

impl Stage {
    fn started(&self) -> bool {
        match self {
            Stage::Gen(g) => g.submitted > 0,
            Stage::Ret(r) => r.run.is_some(),
        }
    }

    fn ready_at(&self) -> f64 {
        match self {
            Stage::Gen(g) => g.ready_at,
            Stage::Ret(r) => r.ready_at,
        }
    }

    fn node(&self) -> u32 {
        match self {
            Stage::Gen(g) => g.node,
            Stage::Ret(r) => r.node,
        }
    }
}

#[derive(Debug, Clone)]
struct SpecGen {
    anchor: SnapshotId,
    partial: TopKResult,
    gen: GenStage,
}

#[derive(Debug, Clone)]
struct SpecRet {
    node: u32,
    query: Embedding,
    plan: Vec<u32>,
    next_pos: usize,
    heap: TopKResult,
    in_batch: bool,
}

#[derive(Debug)]
struct Req {
    id: u64,
    arrival: f64,
    workflow: String,
    graph: Arc<RAGraph>,
    scripts: BTreeMap<(u32, u32), GenerationScript>,
    nprobe: Option<usize>,
    state: RequestState,
    inst: GraphInstance,
    status: Status,
    finish: Option<f64>,
    error: Option<String>,
    stage: Option<Stage>,
    spec_gen: Option<SpecGen>,
    spec_ret: Option<SpecRet>,
    /// Last sub-node of the previous stage.
    last_sub: Option<SubNodeId>,
}

impl Req {
    fn active(&self) -> bool {
        self.status == Status::Active
    }
}

#[derive(Debug, Default)]
struct Stats {
    gen_busy_ms: f64,
    ret_busy_ms: f64,
    gen_steps: u64,
    ret_batches: u64,
    lanes: LaneUtilization,
    spec: SpeculationStats,
    ret_stages: usize,
    clusters_searched: usize,
    terminated_early: usize,
    stages: BTreeMap<String, StageStats>,
}

impl Stats {
    fn stage(&mut self, kind: &str, ms: f64) {
        let s = self.stages.entry(kind.to_string()).or_default();
        s.count += 1;
        s.total_ms += ms;
        s.mean_ms = s.total_ms / s.count as f64;
    }
}

/// Which generation stage of a request a window belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Which {
    Main,
    Spec,
}

pub(crate) struct Machine<'a> {
    cfg: &'a SchedulerConfig,
    index: &'a IvfIndex,
    reqs: Vec<Req>,
    pos: BTreeMap<u64, usize>,
    locality: LocalityCache,
    cache: Option<ClusterCacheState>,
    delta: f64,
    t_r: f64,
    calibration: Option<Calibration>,
    mean_cluster_ms: f64,
    ret_busy: bool,
    stats: Stats,
    trace: Vec<TraceEvent>,
    pub out: Outbox,
}

impl<'a> Machine<'a> {
    pub fn new(cfg: &'a SchedulerConfig, index: &'a IvfIndex, workload: &Workload) -> Result<Self> {
        workload.validate()?;
        if index.k_clusters() == 0 {
            return Err(invalid("index has no clusters"));
        }
        let mut graphs: BTreeMap<String, Arc<RAGraph>> = BTreeMap::new();
        let mut reqs = Vec::with_capacity(workload.requests.len());
        for spec in &workload.requests {
            if !graphs.contains_key(&spec.workflow) {
                graphs.insert(spec.workflow.clone(), Arc::new(template(&spec.workflow)?));
            }
            reqs.push(Self::build_req(spec, graphs[&spec.workflow].clone(), index.dim())?);
        }
        reqs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
        let pos = reqs.iter().enumerate().map(|(i, r)| (r.id, i)).collect();

        let k = index.k_clusters();
        let mean_cluster_ms = (0..k as u32)
            .map(|c| estimate_cluster_cost(index, &cfg.ret_cost, c, Lane::Slow))
            .sum::<f64>()
            / k as f64;
        let hedra = cfg.strategy == Strategy::Hedra;
        let calibration = match (hedra && cfg.speculation, cfg.calibration) {
            (true, Some(c)) => Some(c),
            (true, None) => Some(calibrate(&cfg.gen_model, CALIBRATION_BATCH)?),
            (false, c) => c,
        };
        let cache = if hedra && cfg.cache {
            let capacity_gc = cfg.capacity_gc.unwrap_or((k / 5).max(1)).min(k);
            let cc = CacheConfig {
                capacity_gc,
                update_interval: cfg.cache_update_interval,
                ..CacheConfig::default()
            };
            Some(ClusterCacheState::for_index(cc, index)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            index,
            reqs,
            pos,
            locality: LocalityCache::new(),
            cache,
            delta: cfg.delta.unwrap_or_else(|| default_delta(index)),
            t_r: cfg.nprobe.min(k) as f64 * mean_cluster_ms + cfg.ret_cost.fixed_ms(),
            calibration,
            mean_cluster_ms,
            ret_busy: false,
            stats: Stats::default(),
            trace: Vec::new(),
            out: Outbox::default(),
        })
    }

    fn build_req(spec: &RequestSpec, graph: Arc<RAGraph>, dim: usize) -> Result<Req> {
        if spec.query_embedding.dim() != dim {
            return Err(invalid(format!(
                "request {} query has dimension {} but the index has {dim}",
                spec.id,
                spec.query_embedding.dim()
            )));
        }
        let mut scripts = BTreeMap::new();
        for s in &spec.scripts {
            if s.script.final_embedding.dim() != dim {
                return Err(invalid(format!(
                    "request {} script for node {} has the wrong embedding dimension",
                    spec.id, s.node
                )));
            }
            if scripts.insert((s.node, s.visit), s.script.clone()).is_some() {
                return Err(invalid(format!(
                    "request {} has two scripts for node {} visit {}",
                    spec.id, s.node, s.visit
                )));
            }
        }
        Ok(Req {
            id: spec.id,
            arrival: spec.arrival_ms,
            workflow: spec.workflow.clone(),
            graph,
            scripts,
            nprobe: spec.nprobe,
            state: RequestState::new(Value {
                text: spec.input.clone(),
                embedding: Some(spec.query_embedding.clone()),
                ..Value::default()
            }),
            inst: GraphInstance::new(),
            status: Status::Pending,
            finish: None,
            error: None,
            stage: None,
            spec_gen: None,
            spec_ret: None,
            last_sub: None,
        })
    }

    pub fn arrivals(&self) -> Vec<(u64, f64)> {
        self.reqs.iter().map(|r| (r.id, r.arrival)).collect()
    }

    pub fn settled(&self) -> bool {
        self.reqs
            .iter()
            .all(|r| matches!(r.status, Status::Done | Status::Failed))
    }

    pub fn budget_ms(&self) -> f64 {
        self.cfg
            .mb_override_ms
            .unwrap_or_else(|| compute_time_budget(self.t_r, self.cfg.beta_ms, self.cfg.budget_form))
    }

    fn hedra(&self) -> bool {
        self.cfg.strategy == Strategy::Hedra
    }

    fn mark(&mut self, now: f64, worker: &str, request: Option<u64>, subnode: Option<SubNodeId>, event: &str, duration: f64) {
        self.trace.push(TraceEvent {
            time: now,
            worker: worker.to_string(),
            request,
            subnode: subnode.map(|s| s.0),
            event: event.to_string(),
            duration,
        });
    }

    // ---- request lifecycle ----

    pub fn arrive(&mut self, id: u64, now: f64) {
        let Some(&i) = self.pos.get(&id) else { return };
        if self.reqs[i].status != Status::Pending {
            return;
        }
        self.reqs[i].status = Status::Active;
        self.mark(now, "sched", Some(id), None, "arrive", 0.0);
        self.enter_next(i, now);
    }

    pub fn deadline(&mut self, id: u64, now: f64) {
        if let Some(&i) = self.pos.get(&id) {
            if self.reqs[i].active() {
                self.fail(i, now, "deadline exceeded".into());
            }
        }
    }

    fn enter_next(&mut self, i: usize, now: f64) {
        let r = &mut self.reqs[i];
        let graph = r.graph.clone();
        match graph.advance(&mut r.state) {
            Err(e) => self.fail(i, now, e.to_string()),
            Ok(Endpoint::Node(n)) => {
                let visit = r.state.visits(n);
                match make_stage(r, n, visit, &r.state.bindings, self.cfg.topk, now) {
                    Ok(stage) => {
                        r.stage = Some(stage);
                        let id = r.id;
                        self.mark(now, "sched", Some(id), None, "stage_ready", 0.0);
                    }
                    Err(e) => self.fail(i, now, e.to_string()),
                }
            }
            Ok(_) => self.finish(i, now),
        }
    }

    fn finish(&mut self, i: usize, now: f64) {
        let r = &mut self.reqs[i];
        r.status = Status::Done;
        r.finish = Some(now);
        let id = r.id;
        self.locality.evict(id);
        self.mark(now, "sched", Some(id), None, "finish", 0.0);
    }

    fn fail(&mut self, i: usize, now: f64, reason: String) {
        let r = &mut self.reqs[i];
        let id = r.id;
        match r.stage.take() {
            Some(Stage::Gen(g)) => {
                if let Some(s) = g.inflight {
                    self.out.gen.push(GenCmd::Cancel { request: id, subnode: s });
                }
            }
            Some(Stage::Ret(rs)) => {
                if rs.run.is_some() {
                    self.out.ret.push(RetCmd::Cancel { request: id, node: rs.node });
                }
            }
            None => {}
        }
        if let Some(sg) = r.spec_gen.take() {
            if let Some(s) = sg.gen.inflight {
                self.out.gen.push(GenCmd::Cancel { request: id, subnode: s });
            }
        }
        if let Some(sr) = r.spec_ret.take() {
            self.out.ret.push(RetCmd::Cancel { request: id, node: sr.node });
        }
        r.status = Status::Failed;
        r.finish = Some(now);
        log::debug!("request {id} failed: {reason}");
        r.error = Some(reason);
        self.locality.evict(id);
        self.mark(now, "sched", Some(id), None, "fail", 0.0);
    }

    // ---- worker reports ----

    pub fn on_gen_report(&mut self, report: &GenStepReport, started: f64, busy_ms: f64, now: f64) {
        self.stats.gen_steps += 1;
        self.stats.gen_busy_ms += busy_ms;
        self.mark(started, "gen", None, None, "step", busy_ms);
        for &(rid, sub) in &report.advanced {
            let Some(&i) = self.pos.get(&rid) else { continue };
            let r = &mut self.reqs[i];
            if !r.active() {
                continue;
            }
            if let Some(Stage::Gen(g)) = &mut r.stage {
                if g.inflight == Some(sub) {
                    g.done += 1;
                    continue;
                }
            }
            if let Some(sg) = &mut r.spec_gen {
                if sg.gen.inflight == Some(sub) {
                    sg.gen.done += 1;
                }
            }
        }
        for &(rid, sub) in &report.completed {
            let Some(&i) = self.pos.get(&rid) else { continue };
            if !self.reqs[i].active() {
                continue;
            }
            let r = &mut self.reqs[i];
            let mut stage_done = false;
            let mut matched = false;
            if let Some(Stage::Gen(g)) = &mut r.stage {
                if g.inflight == Some(sub) {
                    close_window(g, sub);
                    stage_done = g.done == g.total;
                    matched = true;
                }
            }
            if !matched {
                if let Some(sg) = &mut r.spec_gen {
                    if sg.gen.inflight == Some(sub) {
                        close_window(&mut sg.gen, sub);
                        matched = true;
                    }
                }
            }
            if matched {
                self.mark(now, "gen", Some(rid), Some(sub), "window_done", 0.0);
            }
            if stage_done {
                self.complete_gen(i, now);
            }
        }
    }

    fn complete_gen(&mut self, i: usize, now: f64) {
        let r = &mut self.reqs[i];
        let Some(Stage::Gen(g)) = r.stage.take() else { return };
        r.last_sub = g.last_sub.or(r.last_sub);
        let script = &r.scripts[&(g.node, g.visit)];
        let value = Value {
            text: script.output_text.clone(),
            prompt: Some(g.prompt.clone()),
            docs: None,
            embedding: Some(script.final_embedding.clone()),
        };
        r.state.bindings.insert(g.output_var.clone(), value);
        let id = r.id;
        self.stats.stage("generation", now - g.ready_at);
        self.mark(now, "sched", Some(id), g.last_sub, "gen_stage_done", 0.0);
        self.enter_next(i, now);
    }

    pub fn on_ret_report(&mut self, report: &RetrievalStepReport, started: f64, busy_ms: f64, now: f64) {
        self.ret_busy = false;
        self.stats.ret_batches += 1;
        self.stats.ret_busy_ms += busy_ms;
        let lanes = &mut self.stats.lanes;
        lanes.slow_busy_ms += report.lanes.slow_ms;
        lanes.fast_busy_ms += report.lanes.fast_ms;
        lanes.slow_clusters += report.lanes.slow_clusters;
        lanes.fast_clusters += report.lanes.fast_clusters;
        self.mark(started, "ret", None, None, "batch", busy_ms);

        for item in &report.items {
            let Some(&i) = self.pos.get(&item.request) else { continue };
            if !self.reqs[i].active() {
                continue;
            }
            let approx = self.cfg.approx;
            let streak_e = self.cfg.streak_e;
            let r = &mut self.reqs[i];
            if let Some(Stage::Ret(rs)) = &mut r.stage {
                if rs.node == item.node {
                    if let Some(run) = rs.run.as_mut().filter(|run| run.in_batch) {
                        run.in_batch = false;
                        run.heap = item.heap.clone();
                        run.next_pos += item.clusters.len();
                        run.substages += 1;
                        self.stats.clusters_searched += item.clusters.len();
                        if item.complete {
                            self.complete_ret(i, now);
                        } else if approx && item.unchanged_streak >= streak_e {
                            self.out.ret.push(RetCmd::Cancel {
                                request: item.request,
                                node: item.node,
                            });
                            self.stats.terminated_early += 1;
                            self.complete_ret(i, now);
                        }
                        continue;
                    }
                }
            }
            if let Some(sr) = r.spec_ret.as_mut().filter(|sr| sr.node == item.node && sr.in_batch) {
                sr.in_batch = false;
                sr.heap = item.heap.clone();
                sr.next_pos += item.clusters.len();
                if item.complete {
                    let sr = r.spec_ret.take().expect("matched above");
                    self.record_spec_ret(i, sr);
                }
            }
        }
    }

    fn record_spec_ret(&mut self, i: usize, sr: SpecRet) {
        if sr.next_pos == 0 {
            return;
        }
        let r = &self.reqs[i];
        let searched = sr.plan[..sr.next_pos].iter().copied().collect();
        self.locality
            .record_search(LocalityRecord::new(self.index, r.id, sr.query, sr.heap, searched));
    }

    fn complete_ret(&mut self, i: usize, now: f64) {
        let hedra = self.hedra();
        let alpha = self.cfg.ewma_alpha;
        let r = &mut self.reqs[i];
        let Some(Stage::Ret(rs)) = r.stage.take() else { return };
        let run = rs.run.expect("a reported retrieval has started");
        r.last_sub = run.last_sub.or(r.last_sub);
        let id = r.id;
        if hedra {
            let searched: BTreeSet<u32> = run.plan[..run.next_pos].iter().copied().collect();
            self.locality.record_search(LocalityRecord::new(
                self.index,
                id,
                rs.query.clone(),
                run.heap.clone(),
                searched,
            ));
        }
        self.t_r = (1.0 - alpha) * self.t_r + alpha * (now - run.started_at);
        self.stats.ret_stages += 1;
        self.stats.stage("retrieval", now - rs.ready_at);
        self.mark(now, "sched", Some(id), run.last_sub, "ret_stage_done", 0.0);

        let final_ = run.heap.truncated(rs.topk);
        let docs = Value {
            docs: Some(final_.ids()),
            ..Value::default()
        };
        let r = &mut self.reqs[i];
        let Some(sg) = r.spec_gen.take() else {
            r.state.bindings.insert(rs.output_var, docs);
            self.enter_next(i, now);
            return;
        };
        let outcome = validate_speculation(&sg.partial, &final_, rs.topk);
        if outcome.kind == OutcomeKind::Valid {
            self.stats.spec.valid += 1;
            if let Err(e) = r.inst.commit(sg.anchor) {
                self.fail(i, now, e.to_string());
                return;
            }
            r.state.bindings.insert(rs.output_var, docs);
            let graph = r.graph.clone();
            match graph.advance(&mut r.state) {
                Ok(Endpoint::Node(n)) if n == sg.gen.node && r.state.visits(n) == sg.gen.visit => {
                    let mut g = sg.gen;
                    g.spec_anchor = None;
                    let finished = g.done == g.total;
                    r.stage = Some(Stage::Gen(g));
                    self.mark(now, "sched", Some(id), None, "spec_valid", 0.0);
                    if finished {
                        self.complete_gen(i, now);
                    }
                }
                Ok(_) | Err(_) => {
                    if let Some(s) = sg.gen.inflight {
                        self.out.gen.push(GenCmd::Cancel { request: id, subnode: s });
                    }
                    self.fail(i, now, "speculative successor diverged from the workflow".into());
                }
            }
        } else {
            self.stats.spec.mismatch += 1;
            self.stats.spec.rollbacks += 1;
            if let Some(s) = sg.gen.inflight {
                self.out.gen.push(GenCmd::Cancel { request: id, subnode: s });
            }
            match r.inst.rollback(sg.anchor) {
                Ok(b) => r.state.bindings = b,
                Err(e) => {
                    self.fail(i, now, e.to_string());
                    return;
                }
            }
            r.state.bindings.insert(rs.output_var, docs);
            self.mark(now, "sched", Some(id), None, "spec_rollback", 0.0);
            self.enter_next(i, now);
        }
    }

    // ---- dispatch ----

    /// Queues whatever work can start at `now`.
    pub fn dispatch(&mut self, now: f64) {
        if let Some(c) = &mut self.cache {
            c.complete_swaps(now);
        }
        match self.cfg.strategy {
            Strategy::CoarseSequential => self.dispatch_coarse(now),
            Strategy::NaiveAsync => {
                self.dispatch_whole_gen(now);
                if !self.ret_busy {
                    self.dispatch_whole_ret(now);
                }
            }
            Strategy::Hedra => {
                if self.cfg.speculation {
                    self.select_spec_gen(now);
                }
                self.dispatch_gen_windows(now);
                if !self.ret_busy {
                    self.dispatch_ret_hedra(now);
                }
            }
        }
    }

    fn dispatch_coarse(&mut self, now: f64) {
        if self.ret_busy
            || self
                .reqs
                .iter()
                .any(|r| r.active() && r.stage.as_ref().is_some_and(Stage::started))
        {
            return;
        }
        let next = self
            .reqs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.active())
            .filter_map(|(i, r)| r.stage.as_ref().map(|s| (i, s.ready_at(), r.arrival, r.id)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.3.cmp(&b.3)));
        let Some((i, ..)) = next else { return };
        match &self.reqs[i].stage {
            Some(Stage::Gen(g)) => {
                let total = g.total;
                self.submit_window(i, Which::Main, total, now);
            }
            Some(Stage::Ret(rs)) => {
                let k = rs.topk;
                if self.start_ret(i, k, now) {
                    self.batch_whole(vec![i], now);
                }
            }
            None => {}
        }
    }

    fn dispatch_whole_gen(&mut self, now: f64) {
        for i in 0..self.reqs.len() {
            let r = &self.reqs[i];
            if let (true, Some(Stage::Gen(g))) = (r.active(), &r.stage) {
                if g.submitted == 0 {
                    let total = g.total;
                    self.submit_window(i, Which::Main, total, now);
                }
            }
        }
    }

    fn dispatch_whole_ret(&mut self, now: f64) {
        let mut started = Vec::new();
        for i in 0..self.reqs.len() {
            let r = &self.reqs[i];
            if let (true, Some(Stage::Ret(rs))) = (r.active(), &r.stage) {
                if rs.run.is_none() {
                    let k = rs.topk;
                    if self.start_ret(i, k, now) {
                        started.push(i);
                    }
                }
            }
        }
        if !started.is_empty() {
            self.batch_whole(started, now);
        }
    }

    /// One batch holding the full plan of every listed request.
    fn batch_whole(&mut self, reqs: Vec<usize>, now: f64) {
        let entries = reqs
            .into_iter()
            .filter_map(|i| match &self.reqs[i].stage {
                Some(Stage::Ret(rs)) => rs.run.as_ref().map(|run| (i, false, run.plan[run.next_pos..].to_vec())),
                _ => None,
            })
            .collect();
        self.emit_batch(entries, now);
    }

    /// Request indices with a ready stage, in wavefront order.
    fn wavefront(&self) -> Vec<usize> {
        let pending: Vec<PendingStage> = self
            .reqs
            .iter()
            .filter(|r| r.active())
            .filter_map(|r| {
                r.stage.as_ref().map(|s| PendingStage {
                    request: r.id,
                    node: s.node(),
                    arrival_ms: r.arrival,
                    dependencies_met: true,
                })
            })
            .collect();
        select_wavefront(&pending)
            .entries
            .iter()
            .map(|(id, _)| self.pos[id])
            .collect()
    }

    fn gen_inflight(&self) -> usize {
        self.reqs
            .iter()
            .filter(|r| r.active())
            .map(|r| {
                let main = matches!(&r.stage, Some(Stage::Gen(g)) if g.inflight.is_some());
                let spec = r.spec_gen.as_ref().is_some_and(|s| s.gen.inflight.is_some());
                usize::from(main) + usize::from(spec)
            })
            .sum()
    }

    fn dispatch_gen_windows(&mut self, now: f64) {
        let mb = self.budget_ms();
        let mut active = self.gen_inflight();
        for i in self.wavefront() {
            for which in [Which::Main, Which::Spec] {
                let Some(g) = self.gen_stage(i, which) else { continue };
                if g.inflight.is_some() || g.submitted >= g.total {
                    continue;
                }
                let w = decode_window(mb, self.cfg.gen_model.expected_step_ms(active + 1));
                let end = (g.submitted + w).min(g.total);
                if self.submit_window(i, which, end, now) {
                    active += 1;
                }
            }
        }
    }

    fn gen_stage(&self, i: usize, which: Which) -> Option<&GenStage> {
        let r = &self.reqs[i];
        if !r.active() {
            return None;
        }
        match which {
            Which::Main => match &r.stage {
                Some(Stage::Gen(g)) => Some(g),
                _ => None,
            },
            Which::Spec => r.spec_gen.as_ref().map(|s| &s.gen),
        }
    }

    /// Appends the token window `[submitted, end)` as a sub-node and sends
    /// it to the generation worker.
    fn submit_window(&mut self, i: usize, which: Which, end: usize, now: f64) -> bool {
        let r = &mut self.reqs[i];
        let id = r.id;
        let g = match which {
            Which::Main => match &mut r.stage {
                Some(Stage::Gen(g)) => g,
                _ => return false,
            },
            Which::Spec => match &mut r.spec_gen {
                Some(s) => &mut s.gen,
                None => return false,
            },
        };
        let start = g.submitted;
        if start == 0 {
            r.inst.declare_total(g.node, g.visit, g.total);
        }
        let dep = g.last_sub.or(if start == 0 { g.entry_dep.or(r.last_sub) } else { None });
        let appended = r
            .inst
            .append_subnode(g.node, g.visit, Span::Decode { start, end }, BTreeSet::new())
            .and_then(|sub| {
                if let Some(d) = dep {
                    r.inst.rewire_dependency(sub, BTreeSet::from([d]))?;
                }
                if let Some(a) = g.spec_anchor {
                    r.inst.set_speculative(sub, a)?;
                }
                Ok(sub)
            });
        let sub = match appended {
            Ok(s) => s,
            Err(e) => {
                self.fail(i, now, e.to_string());
                return false;
            }
        };
        let task = GenTask {
            request: id,
            subnode: sub,
            node: g.node,
            visit: g.visit,
            start,
            end,
            prefill_tokens: if start == 0 { g.prompt_tokens } else { 0 },
        };
        g.submitted = end;
        g.inflight = Some(sub);
        let total = g.total;
        self.out.gen.push(GenCmd::Submit {
            task,
            script_tokens: total,
        });
        let ev = if which == Which::Spec { "spec_window" } else { "window" };
        self.mark(now, "sched", Some(id), Some(sub), ev, 0.0);
        true
    }

    /// Builds the cursor for a ready retrieval stage and submits its task.
    fn start_ret(&mut self, i: usize, k: usize, now: f64) -> bool {
        match self.try_start_ret(i, k, now) {
            Ok(()) => true,
            Err(e) => {
                self.fail(i, now, e.to_string());
                false
            }
        }
    }

    fn try_start_ret(&mut self, i: usize, k: usize, now: f64) -> Result<()> {
        let hedra = self.hedra();
        let nprobe = self.reqs[i].nprobe.unwrap_or(self.cfg.nprobe).min(self.index.k_clusters());
        if hedra {
            if let Some(sr) = self.reqs[i].spec_ret.take() {
                let id = self.reqs[i].id;
                self.out.ret.push(RetCmd::Cancel { request: id, node: sr.node });
                self.record_spec_ret(i, sr);
            }
        }
        let r = &mut self.reqs[i];
        let Some(Stage::Ret(rs)) = &mut r.stage else {
            return Err(Error::Internal("start_ret on a non-retrieval stage".into()));
        };
        let mut plan = self.index.select_clusters(&rs.query, nprobe)?;
        let mut seeds = Vec::new();
        if hedra {
            if let Some(p) = self
                .locality
                .probe_cache(self.index, r.id, &rs.query, k.min(K_CACHE), self.delta)?
            {
                plan = reorder_clusters(&plan, &p.hints);
                seeds = p.seed.ids();
            }
        }
        let mut cursor = SearchCursor::new(self.index, &rs.query, plan.clone(), k)?;
        cursor.seed(self.index, &seeds);
        r.inst.declare_total(rs.node, rs.visit, plan.len());
        rs.run = Some(RetRun {
            plan,
            next_pos: 0,
            heap: cursor.heap().clone(),
            k,
            in_batch: false,
            substages: 0,
            last_sub: None,
            started_at: now,
        });
        let (id, node) = (r.id, rs.node);
        self.out.ret.push(RetCmd::Submit(Box::new(RetrievalTask {
            request: id,
            node,
            subnode: r.last_sub,
            cursor,
            origin: TaskOrigin::Normal,
        })));
        self.mark(now, "sched", Some(id), None, "ret_start", 0.0);
        Ok(())
    }

    fn dispatch_ret_hedra(&mut self, now: f64) {
        let order = self.wavefront();
        for &i in &order {
            if let Some(Stage::Ret(rs)) = &self.reqs[i].stage {
                if rs.run.is_none() {
                    let k = rs.topk.max(K_CACHE);
                    self.start_ret(i, k, now);
                }
            }
        }
        if self.cfg.speculation {
            self.select_spec_ret(now);
        }

        let mut remaining: Vec<(usize, bool, Vec<u32>)> = Vec::new();
        for &i in &order {
            let r = &self.reqs[i];
            if !r.active() {
                continue;
            }
            if let Some(Stage::Ret(rs)) = &r.stage {
                if let Some(run) = rs.run.as_ref().filter(|run| !run.in_batch && run.next_pos < run.plan.len()) {
                    remaining.push((i, false, run.plan[run.next_pos..].to_vec()));
                }
            }
        }
        for i in 0..self.reqs.len() {
            let r = &self.reqs[i];
            if let Some(sr) = r.spec_ret.as_ref().filter(|sr| r.active() && !sr.in_batch && sr.next_pos < sr.plan.len()) {
                remaining.push((i, true, sr.plan[sr.next_pos..].to_vec()));
            }
        }
        if remaining.is_empty() {
            return;
        }
        let mb = self.budget_ms();
        let slices: Vec<&[u32]> = remaining.iter().map(|e| e.2.as_slice()).collect();
        let (index, cost) = (self.index, self.cfg.ret_cost);
        let taken = plan_substages(&slices, mb, |c| estimate_cluster_cost(index, &cost, c, Lane::Slow));
        let entries = remaining
            .into_iter()
            .zip(taken)
            .filter(|(_, t)| !t.is_empty())
            .map(|((i, spec, _), t)| (i, spec, t))
            .collect();
        self.emit_batch(entries, now);
    }

    /// Sends one sub-stage batch and records the sub-nodes it executes.
    fn emit_batch(&mut self, entries: Vec<(usize, bool, Vec<u32>)>, now: f64) {
        if entries.is_empty() {
            return;
        }
        let all: Vec<u32> = entries.iter().flat_map(|e| e.2.iter().copied()).collect();
        let fast = match &mut self.cache {
            Some(c) => {
                let (fast, _) = c.partition_batch(&all);
                c.record_access(&all);
                let swaps = c.maybe_update(now);
                if !swaps.is_empty() {
                    self.trace.push(TraceEvent {
                        time: now,
                        worker: "cache".into(),
                        request: None,
                        subnode: None,
                        event: format!("swap_{}", swaps.len()),
                        duration: 0.0,
                    });
                }
                fast
            }
            None => BTreeSet::new(),
        };
        let mut items = Vec::with_capacity(entries.len());
        let mut planned = 0.0;
        for (i, spec, clusters) in entries {
            let r = &mut self.reqs[i];
            let id = r.id;
            for &c in &clusters {
                let lane = if fast.contains(&c) { Lane::Fast } else { Lane::Slow };
                planned += estimate_cluster_cost(self.index, &self.cfg.ret_cost, c, lane);
            }
            let node = if spec {
                let sr = r.spec_ret.as_mut().expect("spec entry has a speculative retrieval");
                sr.in_batch = true;
                sr.node
            } else {
                let Some(Stage::Ret(rs)) = &mut r.stage else { continue };
                let run = rs.run.as_mut().expect("batched retrieval has started");
                let span = Span::Clusters {
                    start: run.next_pos,
                    end: run.next_pos + clusters.len(),
                };
                let dep = run.last_sub.or(r.last_sub);
                match r.inst.append_subnode(rs.node, rs.visit, span, dep.into_iter().collect()) {
                    Ok(sub) => run.last_sub = Some(sub),
                    Err(e) => log::warn!("request {id}: {e}"),
                }
                run.in_batch = true;
                let sub = run.last_sub;
                let node = rs.node;
                self.mark(now, "sched", Some(id), sub, "substage", 0.0);
                node
            };
            let fast_here = clusters.iter().copied().filter(|c| fast.contains(c)).collect();
            items.push(BatchItem {
                request: id,
                node,
                clusters,
                fast: fast_here,
            });
        }
        if items.is_empty() {
            return;
        }
        self.out.ret.push(RetCmd::Batch(SubStageBatch {
            items,
            planned_cost_ms: planned,
        }));
        self.ret_busy = true;
    }

    // ---- speculation ----

    fn pending_gen_load(&self) -> (usize, usize) {
        let mut prefill = 0;
        let mut waiting = 0;
        for r in self.reqs.iter().filter(|r| r.active()) {
            if let Some(Stage::Gen(g)) = &r.stage {
                if g.submitted == 0 {
                    waiting += 1;
                    prefill += g.prompt_tokens;
                }
            }
        }
        (self.gen_inflight() + waiting, prefill)
    }

    /// Starts the successor generation of partially searched retrievals
    /// while the generation worker is underused.
    fn select_spec_gen(&mut self, now: f64) {
        let Some(cal) = self.calibration else { return };
        let (active, prefill) = self.pending_gen_load();
        let mut picks: BTreeMap<u64, (usize, u32, u32, TopKResult)> = BTreeMap::new();
        let mut candidates = Vec::new();
        for (i, r) in self.reqs.iter().enumerate() {
            if !r.active() || r.spec_gen.is_some() {
                continue;
            }
            let Some(Stage::Ret(rs)) = &r.stage else { continue };
            let Some(run) = &rs.run else { continue };
            if rs.spec_tried || run.substages == 0 || run.next_pos >= run.plan.len() || run.heap.len() < run.k {
                continue;
            }
            let partial = run.heap.truncated(rs.topk);
            let mut probe = r.state.clone();
            probe.bindings.insert(
                rs.output_var.clone(),
                Value {
                    docs: Some(partial.ids()),
                    ..Value::default()
                },
            );
            let Ok(Endpoint::Node(m)) = r.graph.peek(&probe) else { continue };
            let visit = probe.visits(m) + 1;
            let Some(script) = r.scripts.get(&(m, visit)) else { continue };
            if !r.graph.node(m).is_some_and(|n| n.is_generation()) || visit > r.graph.max_loop_iters {
                continue;
            }
            // Heap distances are squared; score by the mean Euclidean distance.
            let entries = partial.entries();
            let score = entries.iter().map(|n| n.distance.sqrt()).sum::<f64>() / entries.len().max(1) as f64;
            candidates.push(SpecCandidate {
                request: r.id,
                score,
                load_requests: 1,
                load_prefill: script.prompt_tokens,
            });
            picks.insert(r.id, (i, m, visit, partial));
        }
        if candidates.is_empty() {
            return;
        }
        let chosen = choose_speculative_candidates(&candidates, self.cfg.tau, |c| {
            let n = active + c.iter().map(|c| c.load_requests).sum::<usize>();
            let p = prefill + c.iter().map(|c| c.load_prefill).sum::<usize>();
            throughput_estimate(n, p, Some(&cal)).expect("calibration present")
        });
        for id in chosen {
            let (i, m, visit, partial) = picks.remove(&id).expect("chosen from candidates");
            self.start_spec_gen(i, m, visit, partial, now);
        }
    }

    fn start_spec_gen(&mut self, i: usize, m: u32, visit: u32, partial: TopKResult, now: f64) -> usize {
        let r = &mut self.reqs[i];
        let id = r.id;
        let Some(Stage::Ret(rs)) = &mut r.stage else { return 0 };
        rs.spec_tried = true;
        let run = rs.run.as_ref().expect("checked by the caller");
        let Some(from) = run.last_sub else { return 0 };
        let anchor = match r.inst.insert_speculative_edge(from, m, r.state.bindings.clone()) {
            Ok(a) => a,
            Err(e) => {
                log::debug!("request {id}: no speculative edge: {e}");
                return 0;
            }
        };
        let mut bindings = r.state.bindings.clone();
        bindings.insert(
            rs.output_var.clone(),
            Value {
                docs: Some(partial.ids()),
                ..Value::default()
            },
        );
        match make_stage(r, m, visit, &bindings, self.cfg.topk, now) {
            Ok(Stage::Gen(mut g)) => {
                g.entry_dep = Some(from);
                g.spec_anchor = Some(anchor);
                let prompt_tokens = g.prompt_tokens;
                r.spec_gen = Some(SpecGen { anchor, partial, gen: g });
                self.stats.spec.generation_issued += 1;
                self.mark(now, "sched", Some(id), Some(from), "spec_gen", 0.0);
                prompt_tokens
            }
            _ => {
                let _ = r.inst.rollback(anchor);
                0
            }
        }
    }

    /// Pre-searches the next retrieval of a request whose generation output
    /// is still being decoded, to warm its locality record.
    fn select_spec_ret(&mut self, now: f64) {
        let per_stage = (self.budget_ms() / self.mean_cluster_ms.max(f64::MIN_POSITIVE)).max(1e-9);
        let load = self
            .reqs
            .iter()
            .filter(|r| r.active())
            .map(|r| usize::from(matches!(&r.stage, Some(Stage::Ret(_)))) + usize::from(r.spec_ret.is_some()))
            .sum::<usize>();
        let mut picks: BTreeMap<u64, (usize, u32, Embedding)> = BTreeMap::new();
        let mut candidates = Vec::new();
        for (i, r) in self.reqs.iter().enumerate() {
            if !r.active() || r.spec_ret.is_some() {
                continue;
            }
            let Some(Stage::Gen(g)) = &r.stage else { continue };
            let (prev, cur) = g.marks;
            if g.spec_ret_tried || prev == 0 || cur >= g.total {
                continue;
            }
            let mut probe = r.state.clone();
            probe.bindings.insert(g.output_var.clone(), Value::text("pending"));
            let Ok(Endpoint::Node(m)) = r.graph.peek(&probe) else { continue };
            let reads_output = matches!(
                r.graph.node(m).map(|n| &n.kind),
                Some(NodeKind::Retrieval { query_var, .. }) if *query_var == g.output_var
            );
            if !reads_output {
                continue;
            }
            let script = &r.scripts[&(g.node, g.visit)];
            let ratio = |t: usize| t as f64 / g.total as f64;
            let (Ok(p), Ok(c)) = (partial_embedding(script, ratio(prev)), partial_embedding(script, ratio(cur))) else {
                continue;
            };
            let Ok(drift) = semantic_drift(&p, &c) else { continue };
            candidates.push(SpecCandidate {
                request: r.id,
                score: drift,
                load_requests: 1,
                load_prefill: 0,
            });
            picks.insert(r.id, (i, m, c));
        }
        if candidates.is_empty() {
            return;
        }
        let chosen = choose_speculative_candidates(&candidates, self.cfg.tau, |c| ThroughputEstimate {
            t_curr: (load + c.len()) as f64,
            t_max: per_stage,
        });
        for id in chosen {
            let (i, m, query) = picks.remove(&id).expect("chosen from candidates");
            if let Err(e) = self.start_spec_ret(i, m, query, now) {
                log::debug!("speculative retrieval skipped: {e}");
            }
        }
    }

    fn start_spec_ret(&mut self, i: usize, m: u32, query: Embedding, now: f64) -> Result<()> {
        let nprobe = self.reqs[i].nprobe.unwrap_or(self.cfg.nprobe).min(self.index.k_clusters());
        let r = &mut self.reqs[i];
        if let Some(Stage::Gen(g)) = &mut r.stage {
            g.spec_ret_tried = true;
        }
        let plan = self.index.select_clusters(&query, nprobe)?;
        let cursor = SearchCursor::new(self.index, &query, plan.clone(), K_CACHE)?;
        let id = r.id;
        r.spec_ret = Some(SpecRet {
            node: m,
            query,
            plan,
            next_pos: 0,
            heap: cursor.heap().clone(),
            in_batch: false,
        });
        self.out.ret.push(RetCmd::Submit(Box::new(RetrievalTask {
            request: id,
            node: m,
            subnode: None,
            cursor,
            origin: TaskOrigin::SpeculativeRetrieval,
        })));
        self.stats.spec.retrieval_issued += 1;
        self.mark(now, "sched", Some(id), None, "spec_ret", 0.0);
        Ok(())
    }

    // ---- output ----

    pub fn take_outbox(&mut self) -> Outbox {
        std::mem::take(&mut self.out)
    }

    pub fn into_output(self, seed: u64) -> (ExperimentReport, Vec<TraceEvent>) {
        let mut report = ExperimentReport {
            strategy: self.cfg.strategy.name().to_string(),
            clock: self.cfg.clock.name().to_string(),
            seed,
            ..ExperimentReport::default()
        };
        let start = self.reqs.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let end = self.reqs.iter().filter_map(|r| r.finish).fold(f64::NEG_INFINITY, f64::max);
        let makespan = if end > start { end - start } else { 0.0 };
        for r in &self.reqs {
            let completed = r.status == Status::Done;
            report.requests.insert(
                r.id,
                RequestOutcome {
                    workflow: r.workflow.clone(),
                    status: if completed { RequestStatus::Completed } else { RequestStatus::Failed },
                    arrival_ms: r.arrival,
                    finish_ms: r.finish,
                    latency_ms: if completed { r.finish.map(|f| f - r.arrival) } else { None },
                    error: r.error.clone(),
                    bindings: strip_embeddings(&r.state.bindings),
                },
            );
        }
        report.summarize(makespan);
        let s = self.stats;
        let idle = |busy: f64| if makespan > 0.0 { (1.0 - busy / makespan).clamp(0.0, 1.0) } else { 0.0 };
        report.workers = WorkerStats {
            gen_busy_ms: s.gen_busy_ms,
            ret_busy_ms: s.ret_busy_ms,
            gen_idle_fraction: idle(s.gen_busy_ms),
            ret_idle_fraction: idle(s.ret_busy_ms),
            gen_steps: s.gen_steps,
            ret_batches: s.ret_batches,
        };
        let mut spec = s.spec;
        let validated = spec.valid + spec.mismatch;
        spec.accuracy = (validated > 0).then(|| spec.valid as f64 / validated as f64);
        report.speculation = spec;
        report.cache = match &self.cache {
            Some(c) => CacheStats {
                enabled: true,
                capacity_gc: c.config().capacity_gc,
                hit_rate: c.hit_rate(),
                accesses: c.accesses(),
                bytes_moved: c.bytes_moved(),
            },
            None => CacheStats::default(),
        };
        report.lanes = s.lanes;
        report.retrieval = RetrievalStats {
            stages: s.ret_stages,
            clusters_searched: s.clusters_searched,
            mean_clusters_per_stage: if s.ret_stages == 0 {
                0.0
            } else {
                s.clusters_searched as f64 / s.ret_stages as f64
            },
            terminated_early: s.terminated_early,
            final_budget_ms: self
                .cfg
                .mb_override_ms
                .unwrap_or_else(|| compute_time_budget(self.t_r, self.cfg.beta_ms, self.cfg.budget_form)),
            final_t_retrieval_ms: self.t_r,
        };
        report.stages = s.stages;
        let mut trace = self.trace;
        trace.sort_by(|a, b| a.time.total_cmp(&b.time));
        (report, trace)
    }
}

fn close_window(g: &mut GenStage, sub: SubNodeId) {
    g.inflight = None;
    g.last_sub = Some(sub);
    g.marks = (g.marks.1, g.done);
}

fn strip_embeddings(b: &Bindings) -> Bindings {
    b.iter()
        .map(|(k, v)| {
            (
                k.clone(),
                Value {
                    embedding: None,
                    ..v.clone()
                },
            )
        })
        .collect()
}

fn make_stage(r: &Req, n: u32, visit: u32, bindings: &Bindings, topk_override: Option<usize>, now: f64) -> Result<Stage> {
    let node = r
        .graph
        .node(n)
        .ok_or_else(|| Error::MalformedWorkflow(format!("unknown node {n}")))?;
    match &node.kind {
        NodeKind::Generation {
            prompt_template,
            output_var,
        } => {
            let script = r.scripts.get(&(n, visit)).ok_or_else(|| {
                Error::InvalidState(format!("request {} has no script for node {n} visit {visit}", r.id))
            })?;
            Ok(Stage::Gen(GenStage {
                node: n,
                visit,
                output_var: output_var.clone(),
                prompt: render_prompt(prompt_template, bindings)?,
                total: script.total_tokens,
                prompt_tokens: script.prompt_tokens,
                submitted: 0,
                done: 0,
                inflight: None,
                last_sub: None,
                entry_dep: None,
                spec_anchor: None,
                marks: (0, 0),
                ready_at: now,
                spec_ret_tried: false,
            }))
        }
        NodeKind::Retrieval {
            topk,
            query_var,
            output_var,
        } => {
            let query = bindings
                .get(query_var)
                .and_then(|v| v.embedding.clone())
                .ok_or_else(|| Error::InvalidState(format!("variable {query_var} has no embedding to query with")))?;
            Ok(Stage::Ret(RetStage {
                node: n,
                visit,
                topk: topk_override.unwrap_or(*topk),
                output_var: output_var.clone(),
                query,
                ready_at: now,
                run: None,
                spec_tried: false,
            }))
        }
    }
}
