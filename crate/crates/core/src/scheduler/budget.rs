use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{GenEngine, GenLatencyModel, GenTask};
use crate::raggraph::SubNodeId;

/// Smallest sub-stage budget the solver returns.
pub const MIN_BUDGET_MS: f64 = 0.1;

/// How the scheduling-overhead term enters the latency-gain model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetForm {
    /// `Δl(mb) = (t_R − mb)/2 − (t_R/mb)·β`, maximized at `sqrt(2·β·t_R)`.
    #[default]
    Subtractive,
    /// `Δl(mb) = (t_R − mb)/2 + (t_R/mb)·β`, which grows without bound as
    /// `mb → 0`, so the clamp decides.
    Printed,
}

/// Sub-stage time budget for a retrieval stage of expected length
/// `t_retrieval_ms`, clamped to `[MIN_BUDGET_MS, t_retrieval_ms]`.
pub fn compute_time_budget(t_retrieval_ms: f64, beta_ms: f64, form: BudgetForm) -> f64 {
    let hi = t_retrieval_ms.max(0.0);
    let lo = MIN_BUDGET_MS.min(hi);
    let raw = match form {
        BudgetForm::Subtractive => (2.0 * beta_ms.max(0.0) * hi).sqrt(),
        BudgetForm::Printed => 0.0,
    };
    raw.clamp(lo, hi)
}

/// Round-robin budget fill. Every entry receives its next cluster in the
/// first round; later rounds keep adding one cluster per entry while the
/// running total stays within `mb_ms`, and stop at the first cluster that
/// would exceed it. Returns the clusters taken per entry.
pub fn plan_substages(remaining: &[&[u32]], mb_ms: f64, cost: impl Fn(u32) -> f64) -> Vec<Vec<u32>> {
    let mut taken: Vec<Vec<u32>> = vec![Vec::new(); remaining.len()];
    let mut total = 0.0;
    for (i, r) in remaining.iter().enumerate() {
        if let Some(&c) = r.first() {
            total += cost(c);
            taken[i].push(c);
        }
    }
    'fill: loop {
        let mut progressed = false;
        for (i, r) in remaining.iter().enumerate() {
            let Some(&c) = r.get(taken[i].len()) else { continue };
            let t = cost(c);
            if total + t > mb_ms {
                break 'fill;
            }
            total += t;
            taken[i].push(c);
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    taken
}

/// Decode steps of a generation window that fills one budget.
pub fn decode_window(mb_ms: f64, expected_step_ms: f64) -> usize {
    if expected_step_ms <= 0.0 {
        return usize::MAX;
    }
    ((mb_ms / expected_step_ms).ceil() as usize).max(1)
}

/// Generation throughput model `T = c + a·requests + b·prefill_tokens`
/// (tokens per ms), fitted on engine measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub t_max: f64,
    pub max_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEstimate {
    pub t_curr: f64,
    pub t_max: f64,
}

impl ThroughputEstimate {
    pub fn ratio(&self) -> f64 {
        self.t_curr / self.t_max
    }
}

/// One calibration sample: batch size, prefill tokens and measured tokens
/// per millisecond.
pub type Sample = (usize, usize, f64);

/// Measures decode throughput of a fresh engine over a grid of batch sizes
/// and prefill loads.
pub fn measure_throughput(model: &GenLatencyModel, max_batch: usize, steps: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &prefill in &[0usize, 16, 64] {
        for n in 1..=max_batch.max(1) {
            let mut e = GenEngine::new(*model)?;
            let mut tokens = 0usize;
            let mut ms = 0.0;
            for s in 0..n {
                e.submit(
                    GenTask {
                        request: s as u64,
                        subnode: SubNodeId(0),
                        node: 0,
                        visit: 1,
                        start: 0,
                        end: steps,
                        prefill_tokens: if s == 0 { prefill } else { 0 },
                    },
                    steps,
                )?;
            }
            tokens += prefill;
            while !e.is_idle() {
                let r = e.gen_step();
                tokens += r.tokens_advanced;
                ms += r.latency_ms;
            }
            out.push((n, prefill, tokens as f64 / ms));
        }
    }
    Ok(out)
}

/// Relative least-squares fit of the throughput model. `T_max` is the
/// measured throughput at the largest batch without prefill.
pub fn fit_calibration(samples: &[Sample]) -> Result<Calibration> {
    let max_batch = samples.iter().map(|s| s.0).max().ok_or_else(|| Error::InvalidState("no samples".into()))?;
    let t_max = samples
        .iter()
        .filter(|s| s.0 == max_batch && s.1 == 0)
        .map(|s| s.2)
        .next()
        .ok_or_else(|| Error::InvalidState("no prefill-free sample at the largest batch".into()))?;
    // Weighted normal equations over features (1, n, p) with weights 1/y².
    let mut m = [[0.0f64; 3]; 3];
    let mut v = [0.0f64; 3];
    for &(n, p, y) in samples {
        if y <= 0.0 {
            continue;
        }
        let x = [1.0, n as f64, p as f64];
        let w = 1.0 / (y * y);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += w * x[i] * x[j];
            }
            v[i] += w * x[i] * y;
        }
    }
    let [c, a, b] = solve3(m, v).ok_or_else(|| Error::InvalidState("calibration samples are degenerate".into()))?;
    Ok(Calibration {
        a,
        b,
        c,
        t_max,
        max_batch,
    })
}

fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in 0..3 {
                    m[row][k] -= f * m[col][k];
                }
                v[row] -= f * v[col];
            }
        }
    }
    Some([v[0] / m[0][0], v[1] / m[1][1], v[2] / m[2][2]])
}

pub fn calibrate(model: &GenLatencyModel, max_batch: usize) -> Result<Calibration> {
    fit_calibration(&measure_throughput(model, max_batch, 64)?)
}

/// Current generation throughput from the calibrated model. An idle
/// engine has zero throughput.
pub fn throughput_estimate(active_requests: usize, prefill_tokens: usize, calibration: Option<&Calibration>) -> Result<ThroughputEstimate> {
    let cal = calibration.ok_or_else(|| Error::InvalidState("throughput calibration missing".into()))?;
    let t_curr = if active_requests == 0 && prefill_tokens == 0 {
        0.0
    } else {
        (cal.c + cal.a * active_requests as f64 + cal.b * prefill_tokens as f64).max(0.0)
    };
    Ok(ThroughputEstimate {
        t_curr,
        t_max: cal.t_max,
    })
}

/// Speculate only while the next sub-stage is underused.
pub fn trigger_speculation(estimate: &ThroughputEstimate, tau: f64) -> bool {
    estimate.t_max > 0.0 && estimate.t_curr / estimate.t_max < tau
}

/// A stage instance the scheduler could run now or later.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingStage {
    pub request: u64,
    pub node: u32,
    pub arrival_ms: f64,
    pub dependencies_met: bool,
}

/// Dependency-ready stages ordered by arrival, request id, node id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Wavefront {
    pub entries: Vec<(u64, u32)>,
}

pub fn select_wavefront(pending: &[PendingStage]) -> Wavefront {
    let mut ready: Vec<&PendingStage> = pending.iter().filter(|p| p.dependencies_met).collect();
    ready.sort_by(|a, b| {
        a.arrival_ms
            .total_cmp(&b.arrival_ms)
            .then(a.request.cmp(&b.request))
            .then(a.node.cmp(&b.node))
    });
    Wavefront {
        entries: ready.into_iter().map(|p| (p.request, p.node)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn budget_closed_form() {
        assert!((compute_time_budget(100.0, 2.0, BudgetForm::Subtractive) - 20.0).abs() < 1e-12);
        assert_eq!(compute_time_budget(100.0, 0.0, BudgetForm::Subtractive), MIN_BUDGET_MS);
        assert_eq!(compute_time_budget(10.0, 1000.0, BudgetForm::Subtractive), 10.0);
        assert_eq!(compute_time_budget(100.0, 2.0, BudgetForm::Printed), MIN_BUDGET_MS);
    }

    #[test]
    fn round_robin_fill() {
        let a = [1u32, 2, 3, 4];
        let b = [5u32, 6, 7];
        let got = plan_substages(&[&a, &b], 4.0, |_| 1.0);
        assert_eq!(got, vec![vec![1, 2], vec![5, 6]]);
        let huge = [9u32];
        assert_eq!(plan_substages(&[&huge], 1.0, |_| 50.0), vec![vec![9]]);
        assert_eq!(plan_substages(&[], 1.0, |_| 1.0), Vec::<Vec<u32>>::new());
    }

    #[test]
    fn decode_windows() {
        assert_eq!(decode_window(2.0, 2.0), 1);
        assert_eq!(decode_window(5.0, 2.0), 3);
        assert_eq!(decode_window(0.01, 2.0), 1);
    }

    #[test]
    fn trigger_rules() {
        let e = |c| ThroughputEstimate { t_curr: c, t_max: 1.0 };
        assert!(!trigger_speculation(&e(1.0), 0.8));
        assert!(trigger_speculation(&e(0.0), 0.8));
        assert!(!trigger_speculation(&e(0.8), 0.8));
    }

    #[test]
    fn estimate_requires_calibration() {
        assert!(matches!(throughput_estimate(1, 0, None), Err(Error::InvalidState(_))));
        let cal = Calibration {
            a: 0.5,
            b: 0.01,
            c: 0.1,
            t_max: 3.0,
            max_batch: 8,
        };
        assert_eq!(throughput_estimate(0, 0, Some(&cal)).unwrap().t_curr, 0.0);
        let one = throughput_estimate(2, 0, Some(&cal)).unwrap().t_curr - cal.c;
        let two = throughput_estimate(4, 0, Some(&cal)).unwrap().t_curr - cal.c;
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn calibration_tracks_measurements() {
        let model = GenLatencyModel {
            seed: 5,
            ..GenLatencyModel::default()
        };
        let samples = measure_throughput(&model, 8, 64).unwrap();
        let cal = fit_calibration(&samples).unwrap();
        for &(n, p, y) in &samples {
            let est = throughput_estimate(n, p, Some(&cal)).unwrap().t_curr;
            assert!((est - y).abs() / y < 0.3, "n={n} p={p} est={est} measured={y}");
        }
        assert!(cal.t_max > 0.0 && cal.a > 0.0);
    }

    #[test]
    fn wavefront_order() {
        let p = |request, node, arrival_ms, dependencies_met| PendingStage {
            request,
            node,
            arrival_ms,
            dependencies_met,
        };
        let w = select_wavefront(&[p(3, 1, 2.0, true), p(1, 0, 2.0, true), p(2, 0, 0.5, false), p(0, 4, 0.0, true)]);
        assert_eq!(w.entries, vec![(0, 4), (1, 0), (3, 1)]);
        assert!(select_wavefront(&[]).entries.is_empty());
    }

    proptest! {
        #[test]
        fn closed_form_matches_grid(t_r in 1.0f64..500.0, beta in 0.01f64..20.0) {
            let mb = compute_time_budget(t_r, beta, BudgetForm::Subtractive);
            let gain = |m: f64| (t_r - m) / 2.0 - (t_r / m) * beta;
            let step = t_r / 1000.0;
            let best = (1..=1000)
                .map(|i| i as f64 * step)
                .filter(|&m| m >= MIN_BUDGET_MS)
                .max_by(|a, b| gain(*a).total_cmp(&gain(*b)))
                .unwrap_or(MIN_BUDGET_MS.min(t_r));
            prop_assert!((mb - best).abs() <= step + 1e-9, "mb={} grid={}", mb, best);
        }

        #[test]
        fn fill_cost_bound(
            plans in proptest::collection::vec(proptest::collection::vec(0u32..40, 0..12), 0..6),
            mb in 0.1f64..20.0,
        ) {
            let cost = |c: u32| 0.25 + (c % 7) as f64;
            let refs: Vec<&[u32]> = plans.iter().map(|p| p.as_slice()).collect();
            let got = plan_substages(&refs, mb, cost);
            let first: f64 = plans.iter().filter_map(|p| p.first()).map(|&c| cost(c)).sum();
            let total: f64 = got.iter().flatten().map(|&c| cost(c)).sum();
            prop_assert!(total <= mb.max(first) + 1e-9);
            for (p, g) in plans.iter().zip(&got) {
                prop_assert_eq!(&p[..g.len()], g.as_slice());
                prop_assert!(p.is_empty() || !g.is_empty());
            }
        }
    }
}
