use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// One search hit. Distances are squared L2 over the index's stored vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub doc_id: u64,
    pub distance: f64,
}

impl Neighbor {
    pub fn new(doc_id: u64, distance: f64) -> Self {
        Self { doc_id, distance }
    }
}

/// Ascending distance, then ascending doc id.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Ordered top-k result list.
///
/// Entries are sorted by [`neighbor_order`] and doc ids are unique. Every
/// constructor preserves both properties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopKResult {
    entries: Vec<Neighbor>,
}

impl TopKResult {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a result from arbitrary candidates: duplicates collapse to their
    /// minimum distance, then the list is sorted and truncated to `k`.
    pub fn from_candidates(mut candidates: Vec<Neighbor>, k: usize) -> Self {
        candidates.sort_by(neighbor_order);
        let mut seen = HashSet::with_capacity(candidates.len().min(k));
        let mut entries = Vec::with_capacity(k.min(candidates.len()));
        for n in candidates {
            if entries.len() == k {
                break;
            }
            if seen.insert(n.doc_id) {
                entries.push(n);
            }
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|n| n.doc_id).collect()
    }

    pub fn worst(&self) -> Option<&Neighbor> {
        self.entries.last()
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            entries: self.entries.iter().take(k).copied().collect(),
        }
    }

    pub fn mean_distance(&self) -> Option<f64> {
        if self.entries.is_empty() {
            None
        } else {
            Some(self.entries.iter().map(|n| n.distance).sum::<f64>() / self.entries.len() as f64)
        }
    }

    /// Checks ordering and id uniqueness.
    pub fn is_valid(&self) -> bool {
        let sorted = self
            .entries
            .windows(2)
            .all(|w| neighbor_order(&w[0], &w[1]) == Ordering::Less);
        let mut seen = HashSet::new();
        sorted && self.entries.iter().all(|n| seen.insert(n.doc_id))
    }
}

/// Top-k of the union of two valid results. A doc id present in both keeps
/// its smaller distance.
pub fn merge_topk(a: &TopKResult, b: &TopKResult, k: usize) -> TopKResult {
    let (xs, ys) = (a.entries(), b.entries());
    let mut out = Vec::with_capacity(k.min(xs.len() + ys.len()));
    let mut seen = HashSet::with_capacity(out.capacity());
    let (mut i, mut j) = (0, 0);
    while out.len() < k && (i < xs.len() || j < ys.len()) {
        let take_left = match (xs.get(i), ys.get(j)) {
            (Some(x), Some(y)) => neighbor_order(x, y) != Ordering::Greater,
            (Some(_), None) => true,
            _ => false,
        };
        let next = if take_left {
            i += 1;
            xs[i - 1]
        } else {
            j += 1;
            ys[j - 1]
        };
        // Sorted inputs mean the first occurrence carries the minimum distance.
        if seen.insert(next.doc_id) {
            out.push(next);
        }
    }
    TopKResult { entries: out }
}

/// Bounded insertion collector used by the scan kernels. Callers guarantee
/// that pushed doc ids are distinct.
#[derive(Debug)]
pub(crate) struct Collector {
    k: usize,
    entries: Vec<Neighbor>,
}

impl Collector {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            entries: Vec::with_capacity(k.min(1024) + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, n: Neighbor) {
        if self.k == 0 {
            return;
        }
        if self.entries.len() == self.k {
            let worst = self.entries.last().expect("k > 0");
            if neighbor_order(&n, worst) != Ordering::Less {
                return;
            }
        }
        let pos = self
            .entries
            .partition_point(|e| neighbor_order(e, &n) == Ordering::Less);
        self.entries.insert(pos, n);
        self.entries.truncate(self.k);
    }

    pub(crate) fn finish(self) -> TopKResult {
        TopKResult {
            entries: self.entries,
        }
    }
}
