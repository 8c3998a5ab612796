mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use hedra_core::harness::config::ExperimentConfig;
use hedra_core::harness::corpus::generate_corpus;
use hedra_core::harness::report::{ExperimentReport, RequestStatus};
use hedra_core::raggraph::GraphInstance;
use hedra_core::scheduler::{compute_time_budget, run, BudgetForm, SchedulerConfig, Strategy, MIN_BUDGET_MS};
use hedra_core::similarity::{
    default_delta, observation_rates, reorder_clusters, should_terminate, Hints, LocalityCache, LocalityRecord, K_CACHE,
};
use hedra_core::tiered_cache::{CacheConfig, ClusterCacheState};
use hedra_core::vector_index::{
    brute_force_search, search_clusters, search_step, train_kmeans, Corpus, Embedding, IvfIndex, Metric, SearchCursor,
    TopKResult,
};

use common::{gantt_config, gantt_workload, line_index, mixture, workload_for};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn full_search(index: &IvfIndex, q: &Embedding, plan: Vec<u32>, k: usize) -> TopKResult {
    let mut c = SearchCursor::new(index, q, plan.clone(), k).unwrap();
    search_clusters(index, &mut c, &plan).unwrap();
    c.heap().clone()
}

fn noisy(rng: &mut impl Rng, v: &[f32], sigma: f64) -> Embedding {
    let n = Normal::new(0.0, sigma).unwrap();
    Embedding::new(v.iter().map(|&x| (x as f64 + n.sample(rng)) as f32).collect()).unwrap()
}

fn oracle_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut recall_sum, mut queries, mut worst) = (0.0, 0usize, 1.0f64);
    for trial in 0..50u64 {
        let n = rng.random_range(1000..=10_000);
        let dim = rng.random_range(4..=64);
        let topics = rng.random_range(4..=32);
        let k = rng.random_range(8..=64);
        let s = mixture(n, dim, topics, k, trial);
        let mut corpus_recall = 0.0;
        for _ in 0..10 {
            let i = rng.random_range(0..n);
            let q = noisy(&mut rng, s.corpus.vector(i), 0.05);
            let truth = brute_force_search(&s.corpus, &q, 10).unwrap();
            let all = full_search(&s.index, &q, s.index.select_clusters(&q, k).unwrap(), 10);
            check(
                all == truth,
                format!("corpus {trial}: full-nprobe result differs from brute force"),
            )?;
            let part = full_search(&s.index, &q, s.index.select_clusters(&q, (k / 4).max(1)).unwrap(), 10);
            let truth_ids: BTreeSet<u64> = truth.ids().into_iter().collect();
            let hits = part.ids().iter().filter(|id| truth_ids.contains(id)).count();
            corpus_recall += hits as f64 / truth.len() as f64;
        }
        corpus_recall /= 10.0;
        worst = worst.min(corpus_recall);
        recall_sum += corpus_recall * 10.0;
        queries += 10;
    }
    let mean = recall_sum / queries as f64;
    check(mean >= 0.8, format!("mean recall@10 at k/4 is {mean:.3}"))?;
    Ok(format!("500 queries exact at full nprobe; recall@10 at k/4 mean {mean:.3}, worst corpus {worst:.3}"))
}

fn tiny_index(rng: &mut impl Rng) -> (Corpus, IvfIndex) {
    let n = rng.random_range(100..=600);
    let dim = rng.random_range(2..=8);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let corpus = Corpus::new(dim, Metric::L2, (0..n as u64).collect(), data).unwrap();
    let k = rng.random_range(4..=24);
    let cents = train_kmeans(corpus.data(), dim, k, 3, rng.random()).unwrap();
    let index = IvfIndex::build(&corpus, cents).unwrap();
    (corpus, index)
}

fn random_subset(rng: &mut impl Rng, of: &[u32]) -> BTreeSet<u32> {
    of.iter().copied().filter(|_| rng.random_bool(0.4)).collect()
}

fn split_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..1000 {
        let (corpus, index) = tiny_index(&mut rng);
        let q = Embedding::new((0..corpus.dim()).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let k = rng.random_range(1..=20);
        let plan = index.select_clusters(&q, rng.random_range(1..=index.k_clusters())).unwrap();
        let reference = full_search(&index, &q, plan.clone(), k);

        let mut split = SearchCursor::new(&index, &q, plan.clone(), k).unwrap();
        while !split.is_complete() {
            search_step(&index, &mut split, rng.random_range(1..=4)).unwrap();
        }
        check(split.heap() == &reference, format!("trial {trial}: budget split changed the result"))?;

        let hints = Hints {
            result_clusters: random_subset(&mut rng, &plan),
            searched: random_subset(&mut rng, &plan),
        };
        let mut g = GraphInstance::new();
        let mut bounds = vec![0];
        bounds.extend((1..plan.len()).filter(|_| rng.random_bool(0.5)));
        bounds.push(plan.len());
        let ids = g.split_node(1, 1, false, &bounds).unwrap();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.shuffle(&mut rng);
        let regrouped = g.reorder_subnodes(&ids, &order, &reorder_clusters(&plan, &hints)).unwrap();
        let seeds: Vec<u64> = (0..rng.random_range(0..30))
            .map(|_| corpus.ids()[rng.random_range(0..corpus.len())])
            .collect();
        let mut c = SearchCursor::new(&index, &q, regrouped.clone(), k).unwrap();
        c.seed(&index, &seeds);
        for id in g.topological_order().unwrap() {
            let (a, b) = g.get(id).unwrap().span.bounds();
            search_clusters(&index, &mut c, &regrouped[a..b]).unwrap();
        }
        check(c.is_complete(), format!("trial {trial}: reordered pieces missed clusters"))?;
        check(c.heap() == &reference, format!("trial {trial}: reorder or seeding changed the result"))?;
    }
    Ok("1000 trials identical".into())
}

fn end_to_end_equivalence() -> Outcome {
    let s = mixture(8000, 32, 32, 64, 303);
    let w = workload_for(&s, &[("multistep", 0.5), ("irg", 0.5)], 200, 40.0, 303);
    let base = SchedulerConfig {
        nprobe: 16,
        ..SchedulerConfig::default()
    };
    let coarse = run(
        &SchedulerConfig {
            strategy: Strategy::CoarseSequential,
            ..base.clone()
        },
        &s.index,
        &w,
    )
    .map_err(|e| e.to_string())?;
    let hedra = run(
        &SchedulerConfig {
            strategy: Strategy::Hedra,
            speculation: true,
            cache: true,
            ..base
        },
        &s.index,
        &w,
    )
    .map_err(|e| e.to_string())?;
    for r in [&coarse.report, &hedra.report] {
        check(
            r.requests.values().all(|o| o.status == RequestStatus::Completed),
            format!("{} left requests unfinished", r.strategy),
        )?;
    }
    check(coarse.report.requests.len() == 200, "expected 200 requests")?;
    for (id, c) in &coarse.report.requests {
        check(
            c.bindings == hedra.report.requests[id].bindings,
            format!("request {id}: final bindings differ"),
        )?;
    }
    let sp = &hedra.report.speculation;
    let acc = sp.accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}"));
    Ok(format!(
        "200 requests equal; speculative generations {} (valid {}, mismatch {}), accuracy {acc}, rollbacks {}, speculative retrievals {}",
        sp.generation_issued, sp.valid, sp.mismatch, sp.rollbacks, sp.retrieval_issued
    ))
}

fn gain(t_r: f64, beta: f64, mb: f64) -> f64 {
    (t_r - mb) / 2.0 - (t_r / mb) * beta
}

/// Grid argmax of the latency gain over the clamp range.
fn grid_budget(t_r: f64, beta: f64, steps: usize) -> (f64, f64) {
    let lo = MIN_BUDGET_MS.min(t_r);
    let step = (t_r - lo) / steps as f64;
    let best = (0..=steps)
        .map(|i| lo + i as f64 * step)
        .max_by(|a, b| gain(t_r, beta, *a).total_cmp(&gain(t_r, beta, *b)))
        .unwrap();
    (best, step)
}

fn budget_closed_form() -> Outcome {
    let mb = compute_time_budget(100.0, 2.0, BudgetForm::Subtractive);
    let (grid, step) = grid_budget(100.0, 2.0, 100_000);
    check((mb - 20.0).abs() <= step, format!("mb*(100, 2) = {mb}"))?;
    check((mb - grid).abs() <= step, format!("closed form {mb} vs grid {grid}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..100 {
        let t_r = rng.random_range(0.05..500.0);
        let beta = rng.random_range(0.001..20.0);
        let mb = compute_time_budget(t_r, beta, BudgetForm::Subtractive);
        let expect = (2.0 * beta * t_r).sqrt().clamp(MIN_BUDGET_MS.min(t_r), t_r);
        check((mb - expect).abs() < 1e-9, format!("t_R={t_r} beta={beta}: {mb} vs {expect}"))?;
        let (grid, step) = grid_budget(t_r, beta, 20_000);
        check(
            (mb - grid).abs() <= step * 1.0001,
            format!("t_R={t_r} beta={beta}: {mb} vs grid {grid}"),
        )?;
    }
    Ok(format!("mb*(100, 2) = {mb}; 100 random pairs match the closed form and the grid"))
}

fn pipeline_ordering() -> Outcome {
    let index = line_index();
    let mut spans = Vec::new();
    for (strategy, expect) in [
        (Strategy::CoarseSequential, 48.0),
        (Strategy::NaiveAsync, 34.0),
        (Strategy::Hedra, 28.0),
    ] {
        let out = run(&gantt_config(strategy), &index, &gantt_workload()).map_err(|e| e.to_string())?;
        let m = out.report.summary.makespan_ms;
        check(
            (m - expect).abs() <= 1.0,
            format!("{} makespan {m}, hand Gantt {expect}", strategy.name()),
        )?;
        spans.push(m);
    }
    let (coarse, naive, hedra) = (spans[0], spans[1], spans[2]);
    check(hedra < naive && naive < coarse, "makespans out of order")?;
    check(coarse / hedra >= 1.3, format!("speedup {:.2}", coarse / hedra))?;
    Ok(format!(
        "coarse {coarse} ms, naive {naive} ms, hedra {hedra} ms; speedup {:.2}x",
        coarse / hedra
    ))
}

fn cache_convergence() -> Outcome {
    let clusters = 256usize;
    let gc = clusters / 5;
    let interval = 50;
    let cfg = CacheConfig {
        capacity_gc: gc,
        update_interval: interval,
        ..CacheConfig::default()
    };
    let mut cache = ClusterCacheState::new(cfg, vec![1 << 20; clusters]).map_err(|e| e.to_string())?;
    let zipf = Zipf::new(clusters as f64, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut counts = vec![0u64; clusters];
    let mut now = 0.0;
    let per_substage = 8;
    let mut step = |cache: &mut ClusterCacheState, counts: Option<&mut Vec<u64>>, rng: &mut ChaCha8Rng| {
        let batch: BTreeSet<u32> = (0..per_substage).map(|_| zipf.sample(rng) as u32 - 1).collect();
        let batch: Vec<u32> = batch.into_iter().collect();
        cache.record_access(&batch);
        if let Some(counts) = counts {
            for &c in &batch {
                counts[c as usize] += 1;
            }
        }
        now += 1000.0;
        cache.maybe_update(now);
    };
    for _ in 0..20 * interval {
        step(&mut cache, None, &mut rng);
    }
    cache.reset_hit_stats();
    for _ in 0..20 * interval {
        step(&mut cache, Some(&mut counts), &mut rng);
    }
    let hit = cache.hit_rate();
    let h: f64 = (1..=clusters).map(|i| 1.0 / i as f64).sum();
    let analytic: f64 = (1..=gc).map(|i| 1.0 / i as f64).sum::<f64>() / h;
    let mut sorted = counts.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let empirical = sorted[..gc].iter().sum::<u64>() as f64 / counts.iter().sum::<u64>() as f64;
    check(
        (hit - empirical).abs() <= 0.05,
        format!("hit rate {hit:.3}, top-gc access mass {empirical:.3} (Zipf mass {analytic:.3})"),
    )?;

    let s = mixture(6000, 16, 64, 256, 606);
    let w = workload_for(&s, &[("multistep", 0.5), ("irg", 0.5)], 120, 40.0, 606);
    let base = SchedulerConfig {
        nprobe: 32,
        speculation: false,
        cache_update_interval: 10,
        ..SchedulerConfig::default()
    };
    let on = run(&SchedulerConfig { cache: true, ..base.clone() }, &s.index, &w).map_err(|e| e.to_string())?;
    let off = run(&SchedulerConfig { cache: false, ..base }, &s.index, &w).map_err(|e| e.to_string())?;
    check(on.report.cache.accesses > 0, "cache saw no accesses")?;
    for (id, r) in &on.report.requests {
        check(r.bindings == off.report.requests[id].bindings, format!("request {id}: cache changed results"))?;
    }
    Ok(format!(
        "hit rate {hit:.3} vs top-gc access mass {empirical:.3} (Zipf mass {analytic:.3}); cache on/off results equal, run hit rate {:.3}",
        on.report.cache.hit_rate
    ))
}

fn locality_ordering() -> Outcome {
    let s = mixture(20_000, 32, 32, 256, 707);
    let w = workload_for(&s, &[("irg", 1.0)], 150, 20.0, 707);
    let (nprobe, k, e) = (32usize, 5usize, 4usize);
    let delta = default_delta(&s.index);
    let (mut o1, mut o2, mut o3, mut pairs) = (0.0, 0.0, 0.0, 0usize);
    let (mut plain, mut seeded, mut reordered, mut reorder_only, mut probed) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let approx = |plan: Vec<u32>, q: &Embedding, seeds: &[u64]| -> usize {
        let mut c = SearchCursor::new(&s.index, q, plan, k).unwrap();
        c.seed(&s.index, seeds);
        while !c.is_complete() && !should_terminate(&c, Some(e)) {
            search_step(&s.index, &mut c, 1).unwrap();
        }
        c.clusters_searched()
    };
    for r in &w.requests {
        let mut queries = vec![r.query_embedding.clone()];
        queries.extend((1..).map_while(|v| r.script(1, v)).map(|sc| sc.final_embedding.clone()));
        for pair in queries.windows(2) {
            let (q, q2) = (&pair[0], &pair[1]);
            let plan = s.index.select_clusters(q, nprobe).unwrap();
            let extended = full_search(&s.index, q, plan.clone(), K_CACHE);
            let record = LocalityRecord::new(&s.index, r.id, q.clone(), extended, plan.into_iter().collect());
            let plan2 = s.index.select_clusters(q2, nprobe).unwrap();
            let result = full_search(&s.index, q2, plan2.clone(), k);
            let (a, b, c) = observation_rates(&s.index, &record, &result);
            o1 += a;
            o2 += b;
            o3 += c;
            pairs += 1;

            let mut cache = LocalityCache::new();
            cache.record_search(record);
            let Some(probe) = cache.probe_cache(&s.index, r.id, q2, k, delta).unwrap() else {
                continue;
            };
            let seeds = probe.seed.ids();
            probed += 1;
            plain += approx(plan2.clone(), q2, &[]);
            seeded += approx(plan2.clone(), q2, &seeds);
            reordered += approx(reorder_clusters(&plan2, &probe.hints), q2, &seeds);
            reorder_only += approx(reorder_clusters(&plan2, &probe.hints), q2, &[]);
        }
    }
    check(pairs > 0 && probed > 0, "no drift-correlated query pairs")?;
    let n = pairs as f64;
    let (o1, o2, o3) = (o1 / n, o2 / n, o3 / n);
    check(o3 >= o2 && o2 >= o1, format!("rates {o1:.3} {o2:.3} {o3:.3} out of order"))?;
    let m = probed as f64;
    let (plain, seeded, reordered) = (plain as f64 / m, seeded as f64 / m, reordered as f64 / m);
    let reorder_only = reorder_only as f64 / m;
    check(
        reordered <= 0.9 * plain,
        format!("approx clusters: reordered {reordered:.2} vs unordered {plain:.2}"),
    )?;
    Ok(format!(
        "Obs1 {o1:.3} <= Obs2 {o2:.3} <= Obs3 {o3:.3} over {pairs} pairs; approx E={e} clusters over {probed} probes: seeded and reordered {reordered:.2}, unordered {plain:.2} ({:.0}%); seeded only {seeded:.2}, reordered only {reorder_only:.2}",
        100.0 * reordered / plain
    ))
}

fn determinism(started: Instant) -> Outcome {
    let cfg = ExperimentConfig::default();
    check(
        generate_corpus(&cfg.corpus).unwrap().data() == generate_corpus(&cfg.corpus).unwrap().data(),
        "corpus differs between runs",
    )?;
    let (_, _, a) = cfg.execute().map_err(|e| e.to_string())?;
    let (_, _, b) = cfg.execute().map_err(|e| e.to_string())?;
    check(a.report.to_json() == b.report.to_json(), "reports differ")?;
    check(a.trace == b.trace, "traces differ")?;
    let back = serde_json::from_str::<ExperimentReport>(&a.report.to_json()).map_err(|e| e.to_string())?;
    check(back == a.report, "report does not round-trip")?;
    let secs = started.elapsed().as_secs_f64();
    check(secs < 600.0, format!("suite took {secs:.0} s"))?;
    Ok(format!(
        "default scale ({} vectors, {} clusters, {} requests) bitwise identical; suite {secs:.1} s",
        cfg.corpus.n_vectors, cfg.index.k_clusters, a.report.summary.admitted
    ))
}

#[test]
fn acceptance_criteria() {
    let started = Instant::now();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("oracle exactness", Box::new(oracle_exactness)),
        ("split/reorder/seed invariance", Box::new(split_invariance)),
        ("end-to-end equivalence", Box::new(end_to_end_equivalence)),
        ("budget closed form", Box::new(budget_closed_form)),
        ("pipeline ordering", Box::new(pipeline_ordering)),
        ("cache convergence", Box::new(cache_convergence)),
        ("locality ordering", Box::new(locality_ordering)),
        ("determinism", Box::new(move || determinism(started))),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stdout()).unwrap();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("PASS {} {name} ({secs:.1} s): {detail}", i + 1),
            Err(why) => {
                failed.push(i + 1);
                format!("FAIL {} {name} ({secs:.1} s): {why}", i + 1)
            }
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
