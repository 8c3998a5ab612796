mod common;

use proptest::prelude::*;

use hedra_core::harness::report::RequestStatus;
use hedra_core::harness::workload::Workload;
use hedra_core::scheduler::{run, ClockMode, RunOutput, SchedulerConfig, Strategy};
use hedra_core::vector_index::IvfIndex;

use common::{mixture, workload_for, Setup};

fn setup() -> Setup {
    mixture(4000, 16, 16, 64, 31)
}

fn serve(index: &IvfIndex, w: &Workload, cfg: SchedulerConfig) -> RunOutput {
    let out = run(&cfg, index, w).unwrap();
    assert!(
        out.report.requests.values().all(|r| r.status == RequestStatus::Completed),
        "{:?} left requests unfinished",
        cfg.strategy
    );
    out
}

fn assert_same_bindings(a: &RunOutput, b: &RunOutput) {
    assert_eq!(a.report.requests.len(), b.report.requests.len());
    for (id, r) in &a.report.requests {
        assert_eq!(r.bindings, b.report.requests[id].bindings, "request {id}");
    }
}

const ALL: [(&str, f64); 5] = [
    ("oneshot", 0.2),
    ("hyde", 0.2),
    ("multistep", 0.2),
    ("irg", 0.2),
    ("recomp", 0.2),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn strategies_agree_on_results(seed in 0u64..1000, rate in 5.0f64..200.0, nprobe in 2usize..24) {
        let s = setup();
        let w = workload_for(&s, &ALL, 25, rate, seed);
        let base = SchedulerConfig { nprobe, seed, ..SchedulerConfig::default() };
        let coarse = serve(&s.index, &w, SchedulerConfig { strategy: Strategy::CoarseSequential, ..base.clone() });
        let naive = serve(&s.index, &w, SchedulerConfig { strategy: Strategy::NaiveAsync, ..base.clone() });
        let hedra = serve(&s.index, &w, SchedulerConfig { strategy: Strategy::Hedra, ..base.clone() });
        let plain = serve(&s.index, &w, SchedulerConfig { speculation: false, cache: false, ..base });
        assert_same_bindings(&coarse, &naive);
        assert_same_bindings(&coarse, &hedra);
        assert_same_bindings(&coarse, &plain);
    }
}

#[test]
fn live_clock_matches_virtual_results() {
    let s = setup();
    let w = workload_for(&s, &ALL, 12, 200.0, 4);
    let base = SchedulerConfig {
        nprobe: 8,
        live_time_scale: 0.02,
        ..SchedulerConfig::default()
    };
    let virt = serve(&s.index, &w, base.clone());
    for strategy in [Strategy::CoarseSequential, Strategy::Hedra] {
        let live = serve(
            &s.index,
            &w,
            SchedulerConfig {
                strategy,
                clock: ClockMode::Live,
                ..base.clone()
            },
        );
        assert_eq!(live.report.clock, "live");
        assert_same_bindings(&virt, &live);
    }
}

#[test]
fn hedra_is_faster_than_coarse_under_load() {
    let s = setup();
    let w = workload_for(&s, &ALL, 60, 100.0, 8);
    let base = SchedulerConfig {
        nprobe: 16,
        ..SchedulerConfig::default()
    };
    let coarse = serve(
        &s.index,
        &w,
        SchedulerConfig {
            strategy: Strategy::CoarseSequential,
            ..base.clone()
        },
    );
    let hedra = serve(&s.index, &w, base);
    assert!(
        hedra.report.summary.makespan_ms < coarse.report.summary.makespan_ms,
        "hedra {} vs coarse {}",
        hedra.report.summary.makespan_ms,
        coarse.report.summary.makespan_ms
    );
    assert!(hedra.report.summary.mean_ms < coarse.report.summary.mean_ms);
}

#[test]
fn approx_mode_searches_fewer_clusters() {
    let s = setup();
    let w = workload_for(&s, &[("multistep", 0.5), ("irg", 0.5)], 30, 40.0, 9);
    let base = SchedulerConfig {
        nprobe: 32,
        ..SchedulerConfig::default()
    };
    let exact = serve(&s.index, &w, base.clone());
    let approx = serve(
        &s.index,
        &w,
        SchedulerConfig {
            approx: true,
            streak_e: 4,
            ..base
        },
    );
    assert_eq!(exact.report.retrieval.terminated_early, 0);
    assert!(approx.report.retrieval.terminated_early > 0);
    assert!(approx.report.retrieval.mean_clusters_per_stage < exact.report.retrieval.mean_clusters_per_stage);
}

#[test]
fn disabled_features_report_nothing() {
    let s = setup();
    let w = workload_for(&s, &ALL, 20, 50.0, 10);
    let out = serve(
        &s.index,
        &w,
        SchedulerConfig {
            speculation: false,
            cache: false,
            ..SchedulerConfig::default()
        },
    );
    let sp = &out.report.speculation;
    assert_eq!((sp.generation_issued, sp.retrieval_issued, sp.rollbacks), (0, 0, 0));
    assert!(sp.accuracy.is_none());
    assert!(!out.report.cache.enabled);
    assert_eq!(out.report.lanes.fast_clusters, 0);
}

#[test]
fn speculation_counts_are_consistent() {
    let s = setup();
    let w = workload_for(&s, &[("multistep", 0.5), ("irg", 0.5)], 60, 30.0, 12);
    let out = serve(&s.index, &w, SchedulerConfig::default());
    let sp = &out.report.speculation;
    assert!(sp.valid + sp.mismatch <= sp.generation_issued);
    assert!(sp.rollbacks <= sp.mismatch);
    if let Some(a) = sp.accuracy {
        assert!((0.0..=1.0).contains(&a));
        assert!((a - sp.valid as f64 / (sp.valid + sp.mismatch) as f64).abs() < 1e-12);
    }
}

#[test]
fn tight_slo_fails_requests_without_losing_them() {
    let s = setup();
    let w = workload_for(&s, &ALL, 30, 500.0, 13);
    let out = run(
        &SchedulerConfig {
            strategy: Strategy::CoarseSequential,
            slo_ms: Some(5.0),
            ..SchedulerConfig::default()
        },
        &s.index,
        &w,
    )
    .unwrap();
    let sum = &out.report.summary;
    assert!(sum.failed > 0);
    assert_eq!(sum.completed + sum.failed, 30);
    for r in out.report.requests.values().filter(|r| r.status == RequestStatus::Failed) {
        assert!(r.error.is_some());
    }
}

#[test]
fn invalid_config_is_rejected() {
    let s = setup();
    for cfg in [
        SchedulerConfig {
            beta_ms: 0.0,
            ..SchedulerConfig::default()
        },
        SchedulerConfig {
            tau: 1.5,
            ..SchedulerConfig::default()
        },
        SchedulerConfig {
            nprobe: 0,
            ..SchedulerConfig::default()
        },
        SchedulerConfig {
            topk: Some(0),
            ..SchedulerConfig::default()
        },
    ] {
        assert!(run(&cfg, &s.index, &Workload::default()).is_err());
    }
}
