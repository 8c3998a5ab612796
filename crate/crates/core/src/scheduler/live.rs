//! Threaded driver: the generation and retrieval workers run concurrently
//! and the scheduler reacts to their reports in wall-clock time.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};

use super::machine::{GenCmd, Machine, RetCmd};
use super::{RunOutput, SchedulerConfig};
use crate::error::{Error, Result};
use crate::generation::{GenEngine, GenLatencyModel, GenStepReport};
use crate::harness::workload::Workload;
use crate::retrieval::{RetrievalEngine, RetrievalStepReport};
use crate::vector_index::IvfIndex;

enum WorkerMsg {
    Gen(GenStepReport, f64, f64),
    Ret(RetrievalStepReport, f64, f64),
    Failed(Error),
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1000.0
}

fn gen_worker(mut engine: GenEngine, cmds: Receiver<GenCmd>, events: Sender<WorkerMsg>, t0: Instant, scale: f64) {
    let mut open = true;
    let apply = |engine: &mut GenEngine, cmd: GenCmd| -> Result<()> {
        match cmd {
            GenCmd::Submit { task, script_tokens } => engine.submit(task, script_tokens),
            GenCmd::Cancel { request, subnode } => {
                engine.cancel_subnode(request, subnode);
                Ok(())
            }
        }
    };
    loop {
        if engine.is_idle() {
            if !open {
                return;
            }
            match cmds.recv() {
                Ok(cmd) => {
                    if let Err(e) = apply(&mut engine, cmd) {
                        let _ = events.send(WorkerMsg::Failed(e));
                        return;
                    }
                }
                Err(_) => return,
            }
        }
        loop {
            match cmds.try_recv() {
                Ok(cmd) => {
                    if let Err(e) = apply(&mut engine, cmd) {
                        let _ = events.send(WorkerMsg::Failed(e));
                        return;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    open = false;
                    break;
                }
            }
        }
        if engine.is_idle() {
            continue;
        }
        let started = ms_since(t0);
        let report = engine.gen_step();
        let busy = report.latency_ms * scale;
        thread::sleep(Duration::from_secs_f64(busy / 1000.0));
        if events.send(WorkerMsg::Gen(report, started, busy)).is_err() {
            return;
        }
    }
}

fn ret_worker(mut engine: RetrievalEngine, index: &IvfIndex, cmds: Receiver<RetCmd>, events: Sender<WorkerMsg>, t0: Instant) {
    for cmd in cmds {
        let res = match cmd {
            RetCmd::Submit(task) => engine.submit(*task),
            RetCmd::Cancel { request, node } => {
                engine.cancel(request, node);
                Ok(())
            }
            RetCmd::Batch(b) => {
                let started = ms_since(t0);
                engine.retrieval_step(index, &b).and_then(|r| {
                    let busy = r.measured_ms;
                    events
                        .send(WorkerMsg::Ret(r, started, busy))
                        .map_err(|_| Error::Internal("scheduler hung up".into()))
                })
            }
        };
        if let Err(e) = res {
            let _ = events.send(WorkerMsg::Failed(e));
            return;
        }
    }
}

pub(crate) fn run_live(cfg: &SchedulerConfig, index: &IvfIndex, workload: &Workload) -> Result<RunOutput> {
    let mut m = Machine::new(cfg, index, workload)?;
    let gen = GenEngine::new(GenLatencyModel {
        seed: cfg.seed,
        ..cfg.gen_model
    })?;
    let ret = RetrievalEngine::new(cfg.ret_cost)?.with_parallel(true);

    let mut arrivals = m.arrivals();
    arrivals.reverse();
    let mut deadlines: BinaryHeap<Reverse<(u64, u64)>> = BinaryHeap::new();
    if let Some(slo) = cfg.slo_ms {
        for &(id, t) in &arrivals {
            deadlines.push(Reverse((((t + slo) * 1000.0) as u64, id)));
        }
    }

    let t0 = Instant::now();
    let (gen_tx, gen_rx) = unbounded();
    let (ret_tx, ret_rx) = unbounded();
    let (ev_tx, ev_rx) = unbounded();
    let scale = cfg.live_time_scale;

    let result = thread::scope(|s| -> Result<()> {
        let ev_gen = ev_tx.clone();
        s.spawn(move || gen_worker(gen, gen_rx, ev_gen, t0, scale));
        let ev_ret = ev_tx;
        s.spawn(move || ret_worker(ret, index, ret_rx, ev_ret, t0));

        let handle = |m: &mut Machine, msg: WorkerMsg| -> Result<()> {
            let now = ms_since(t0);
            match msg {
                WorkerMsg::Gen(r, started, busy) => m.on_gen_report(&r, started, busy, now),
                WorkerMsg::Ret(r, started, busy) => m.on_ret_report(&r, started, busy, now),
                WorkerMsg::Failed(e) => return Err(e),
            }
            Ok(())
        };
        let outcome = (|| -> Result<()> {
            loop {
                let now = ms_since(t0);
                while arrivals.last().is_some_and(|a| a.1 <= now) {
                    let (id, _) = arrivals.pop().expect("checked");
                    m.arrive(id, now);
                }
                while deadlines.peek().is_some_and(|d| (d.0 .0 as f64) / 1000.0 <= now) {
                    let Reverse((_, id)) = deadlines.pop().expect("checked");
                    m.deadline(id, now);
                }
                while let Ok(msg) = ev_rx.try_recv() {
                    handle(&mut m, msg)?;
                }
                m.dispatch(ms_since(t0));
                let out = m.take_outbox();
                for c in out.gen {
                    gen_tx.send(c).map_err(|_| Error::Internal("generation worker exited".into()))?;
                }
                for c in out.ret {
                    ret_tx.send(c).map_err(|_| Error::Internal("retrieval worker exited".into()))?;
                }
                if m.settled() {
                    return Ok(());
                }
                let next_timer = [
                    arrivals.last().map(|a| a.1),
                    deadlines.peek().map(|d| d.0 .0 as f64 / 1000.0),
                ]
                .into_iter()
                .flatten()
                .fold(f64::INFINITY, f64::min);
                let msg = if next_timer.is_finite() {
                    let wait = (next_timer - ms_since(t0)).max(0.0);
                    match ev_rx.recv_timeout(Duration::from_secs_f64(wait / 1000.0)) {
                        Ok(msg) => Some(msg),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => {
                            return Err(Error::Internal("workers exited early".into()))
                        }
                    }
                } else {
                    Some(
                        ev_rx
                            .recv()
                            .map_err(|_| Error::Internal("scheduler stalled with unfinished requests".into()))?,
                    )
                };
                if let Some(msg) = msg {
                    handle(&mut m, msg)?;
                }
            }
        })();
        drop(gen_tx);
        drop(ret_tx);
        outcome
    });
    result?;
    let (report, trace) = m.into_output(cfg.seed);
    Ok(RunOutput { report, trace })
}
