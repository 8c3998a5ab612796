//! Discrete-event driver: worker latencies come from the models, so a run
//! is a deterministic function of its inputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::machine::{GenCmd, Machine, RetCmd};
use super::{RunOutput, SchedulerConfig};
use crate::error::{Error, Result};
use crate::generation::{GenEngine, GenLatencyModel, GenStepReport};
use crate::harness::workload::Workload;
use crate::retrieval::{RetrievalEngine, RetrievalStepReport};
use crate::vector_index::IvfIndex;

enum Event {
    Arrival(u64),
    Deadline(u64),
    GenDone(GenStepReport, f64),
    RetDone(RetrievalStepReport, f64),
}

struct Timed {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Timed {}

impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timed {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct Queue {
    heap: BinaryHeap<Timed>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.heap.push(Timed {
            time,
            seq: self.seq,
            event,
        });
    }
}

pub(crate) fn run_virtual(cfg: &SchedulerConfig, index: &IvfIndex, workload: &Workload) -> Result<RunOutput> {
    let mut m = Machine::new(cfg, index, workload)?;
    let mut gen = GenEngine::new(GenLatencyModel {
        seed: cfg.seed,
        ..cfg.gen_model
    })?;
    let mut ret = RetrievalEngine::new(cfg.ret_cost)?.with_parallel(true);
    let mut q = Queue {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    for (id, t) in m.arrivals() {
        q.push(t, Event::Arrival(id));
        if let Some(slo) = cfg.slo_ms {
            q.push(t + slo, Event::Deadline(id));
        }
    }
    let mut gen_running = false;
    while let Some(first) = q.heap.pop() {
        let now = first.time;
        let mut batch = vec![first];
        while q.heap.peek().is_some_and(|e| e.time == now) {
            batch.push(q.heap.pop().expect("peeked"));
        }
        for e in batch {
            match e.event {
                Event::Arrival(id) => m.arrive(id, now),
                Event::Deadline(id) => m.deadline(id, now),
                Event::GenDone(report, started) => {
                    gen_running = false;
                    m.on_gen_report(&report, started, report.latency_ms, now);
                }
                Event::RetDone(report, started) => m.on_ret_report(&report, started, report.modeled_ms, now),
            }
        }
        m.dispatch(now);
        let out = m.take_outbox();
        for cmd in out.gen {
            match cmd {
                GenCmd::Submit { task, script_tokens } => gen.submit(task, script_tokens)?,
                GenCmd::Cancel { request, subnode } => {
                    gen.cancel_subnode(request, subnode);
                }
            }
        }
        for cmd in out.ret {
            match cmd {
                RetCmd::Submit(task) => ret.submit(*task)?,
                RetCmd::Cancel { request, node } => {
                    ret.cancel(request, node);
                }
                RetCmd::Batch(b) => {
                    let report = ret.retrieval_step(index, &b)?;
                    q.push(now + report.modeled_ms, Event::RetDone(report, now));
                }
            }
        }
        if !gen_running && !gen.is_idle() {
            let report = gen.gen_step();
            q.push(now + report.latency_ms, Event::GenDone(report, now));
            gen_running = true;
        }
        if m.settled() {
            break;
        }
    }
    if !m.settled() {
        return Err(Error::Internal("scheduler stalled with unfinished requests".into()));
    }
    let (report, trace) = m.into_output(cfg.seed);
    Ok(RunOutput { report, trace })
}
