use super::budget::{trigger_speculation, ThroughputEstimate};

/// A stage that could be started speculatively. Lower scores are better:
/// mean heap distance for generation, semantic drift for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecCandidate {
    pub request: u64,
    pub score: f64,
    /// Sequences the candidate adds to the generation batch.
    pub load_requests: usize,
    /// Prompt tokens it adds.
    pub load_prefill: usize,
}

/// Greedy selection: takes candidates in ascending `(score, request)` order
/// while the estimate with the chosen set still triggers speculation.
/// Returns the chosen request ids in pick order.
pub fn choose_speculative_candidates(
    candidates: &[SpecCandidate],
    tau: f64,
    mut estimate_with: impl FnMut(&[&SpecCandidate]) -> ThroughputEstimate,
) -> Vec<u64> {
    let mut order: Vec<&SpecCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.request.cmp(&b.request)));
    let mut chosen: Vec<&SpecCandidate> = Vec::new();
    for c in order {
        if !trigger_speculation(&estimate_with(&chosen), tau) {
            break;
        }
        chosen.push(c);
    }
    chosen.iter().map(|c| c.request).collect()
}
