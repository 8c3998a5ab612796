use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::Bindings;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubNodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SnapshotId(pub u32);

/// Work covered by a sub-node: a token window of a generation stage or a
/// slice of a retrieval stage's cluster plan. Both are half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Span {
    Decode { start: usize, end: usize },
    Clusters { start: usize, end: usize },
}

impl Span {
    pub fn bounds(&self) -> (usize, usize) {
        match *self {
            Span::Decode { start, end } | Span::Clusters { start, end } => (start, end),
        }
    }

    pub fn len(&self) -> usize {
        let (s, e) = self.bounds();
        e - s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_decode(&self) -> bool {
        matches!(self, Span::Decode { .. })
    }

    fn with_bounds(&self, start: usize, end: usize) -> Span {
        match self {
            Span::Decode { .. } => Span::Decode { start, end },
            Span::Clusters { .. } => Span::Clusters { start, end },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubNode {
    pub id: SubNodeId,
    /// Id of the workflow node this sub-node was split from.
    pub parent: u32,
    /// Which entry into the parent node (loops re-enter nodes).
    pub visit: u32,
    pub span: Span,
    pub deps: BTreeSet<SubNodeId>,
    pub speculative: bool,
    pub rollback_anchor: Option<SnapshotId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculativeEdge {
    pub from: SubNodeId,
    pub to_node: u32,
    pub anchor: SnapshotId,
}

/// Per-request sub-node graph that the scheduler reshapes at runtime.
#[derive(Debug, Clone, Default)]
pub struct GraphInstance {
    subnodes: BTreeMap<SubNodeId, SubNode>,
    totals: BTreeMap<(u32, u32), usize>,
    spec_edges: Vec<SpeculativeEdge>,
    snapshots: BTreeMap<SnapshotId, Bindings>,
    next_sub: u32,
    next_snap: u32,
}

impl GraphInstance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: SubNodeId) -> Option<&SubNode> {
        self.subnodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.subnodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subnodes.is_empty()
    }

    pub fn subnodes(&self) -> impl Iterator<Item = &SubNode> {
        self.subnodes.values()
    }

    /// Sub-nodes of one stage ordered by span start.
    pub fn subnodes_of(&self, parent: u32, visit: u32) -> Vec<&SubNode> {
        let mut v: Vec<&SubNode> = self
            .subnodes
            .values()
            .filter(|s| s.parent == parent && s.visit == visit)
            .collect();
        v.sort_by_key(|s| (s.span.bounds().0, s.id));
        v
    }

    /// Total work units (tokens or planned clusters) of a stage.
    pub fn declare_total(&mut self, parent: u32, visit: u32, total: usize) {
        self.totals.insert((parent, visit), total);
    }

    pub fn total_of(&self, parent: u32, visit: u32) -> Option<usize> {
        self.totals.get(&(parent, visit)).copied()
    }

    fn fresh_id(&mut self) -> SubNodeId {
        let id = SubNodeId(self.next_sub);
        self.next_sub += 1;
        id
    }

    /// Splits one stage at `boundaries`, which must start at 0, end at the
    /// stage total and be strictly increasing. Each piece depends on the one
    /// before it.
    pub fn split_node(&mut self, parent: u32, visit: u32, decode: bool, boundaries: &[usize]) -> Result<Vec<SubNodeId>> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(invalid("split boundaries must start at 0 and contain at least two entries"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("split boundaries must be strictly increasing"));
        }
        if !self.subnodes_of(parent, visit).is_empty() {
            return Err(Error::InvalidState(format!("node {parent} visit {visit} is already split")));
        }
        self.declare_total(parent, visit, *boundaries.last().expect("len >= 2"));
        let mut ids = Vec::with_capacity(boundaries.len() - 1);
        let mut prev: Option<SubNodeId> = None;
        for w in boundaries.windows(2) {
            let span = if decode {
                Span::Decode { start: w[0], end: w[1] }
            } else {
                Span::Clusters { start: w[0], end: w[1] }
            };
            let id = self.push(parent, visit, span, prev.into_iter().collect());
            ids.push(id);
            prev = Some(id);
        }
        Ok(ids)
    }

    fn push(&mut self, parent: u32, visit: u32, span: Span, deps: BTreeSet<SubNodeId>) -> SubNodeId {
        let id = self.fresh_id();
        self.subnodes.insert(
            id,
            SubNode {
                id,
                parent,
                visit,
                span,
                deps,
                speculative: false,
                rollback_anchor: None,
            },
        );
        id
    }

    /// Adds one piece to a stage whose remaining work is carved out
    /// incrementally. The span must start where the stage's last piece ends.
    pub fn append_subnode(&mut self, parent: u32, visit: u32, span: Span, deps: BTreeSet<SubNodeId>) -> Result<SubNodeId> {
        if span.is_empty() {
            return Err(invalid("sub-node span must be non-empty"));
        }
        if let Some(d) = deps.iter().find(|d| !self.subnodes.contains_key(d)) {
            return Err(invalid(format!("unknown dependency {d:?}")));
        }
        let siblings = self.subnodes_of(parent, visit);
        let expected_start = siblings.last().map_or(0, |s| s.span.bounds().1);
        if let Some(first) = siblings.first() {
            if first.span.is_decode() != span.is_decode() {
                return Err(invalid("sub-node span kind differs from its siblings"));
            }
        }
        if span.bounds().0 != expected_start {
            return Err(invalid(format!(
                "sub-node span starts at {} but the stage continues at {expected_start}",
                span.bounds().0
            )));
        }
        if let Some(total) = self.total_of(parent, visit) {
            if span.bounds().1 > total {
                return Err(invalid("sub-node span exceeds the stage total"));
            }
        }
        Ok(self.push(parent, visit, span, deps))
    }

    pub fn set_speculative(&mut self, id: SubNodeId, anchor: SnapshotId) -> Result<()> {
        let s = self
            .subnodes
            .get_mut(&id)
            .ok_or_else(|| invalid(format!("unknown sub-node {id:?}")))?;
        s.speculative = true;
        s.rollback_anchor = Some(anchor);
        Ok(())
    }

    /// True when the sub-node's span reaches its stage's declared total.
    pub fn is_last(&self, id: SubNodeId) -> bool {
        self.subnodes.get(&id).is_some_and(|s| {
            self.total_of(s.parent, s.visit)
                .is_some_and(|t| s.span.bounds().1 >= t)
        })
    }

    /// Moves retrieval pieces into a new execution order.
    ///
    /// `ids` are the stage's pieces in current span order and `order[i]` is
    /// the index into `ids` of the piece that should run i-th. Spans are
    /// reassigned contiguously in the new order, the sibling dependency chain
    /// is rebuilt to match, and the returned plan is `plan` with the spans'
    /// cluster slices concatenated in the new order.
    pub fn reorder_subnodes(&mut self, ids: &[SubNodeId], order: &[usize], plan: &[u32]) -> Result<Vec<u32>> {
        let mut check = order.to_vec();
        check.sort_unstable();
        if check != (0..ids.len()).collect::<Vec<_>>() {
            return Err(invalid("order must be a permutation of the sub-node positions"));
        }
        let mut offset = 0;
        for id in ids {
            let s = self
                .subnodes
                .get(id)
                .ok_or_else(|| invalid(format!("unknown sub-node {id:?}")))?;
            if s.span.is_decode() || s.span.bounds().0 != offset {
                return Err(invalid("reorder expects contiguous cluster spans in span order"));
            }
            offset = s.span.bounds().1;
        }
        if offset != plan.len() {
            return Err(invalid(format!(
                "spans cover {offset} clusters but the plan has {}",
                plan.len()
            )));
        }

        let members: BTreeSet<SubNodeId> = ids.iter().copied().collect();
        let mut new_plan = Vec::with_capacity(plan.len());
        let mut start = 0;
        let mut prev: Option<SubNodeId> = None;
        for &i in order {
            let id = ids[i];
            let s = self.subnodes.get_mut(&id).expect("checked above");
            let (a, b) = s.span.bounds();
            new_plan.extend_from_slice(&plan[a..b]);
            s.span = s.span.with_bounds(start, start + (b - a));
            start += b - a;
            s.deps.retain(|d| !members.contains(d));
            s.deps.extend(prev);
            prev = Some(id);
        }
        Ok(new_plan)
    }

    /// Records an early edge from a non-final sub-node to a downstream node
    /// and stores `anchor` so the request can roll back on mismatch.
    pub fn insert_speculative_edge(&mut self, from: SubNodeId, to_node: u32, anchor: Bindings) -> Result<SnapshotId> {
        if !self.subnodes.contains_key(&from) {
            return Err(invalid(format!("unknown sub-node {from:?}")));
        }
        if self.is_last(from) {
            return Err(invalid("speculative edges must leave a non-final sub-node"));
        }
        if self.spec_edges.iter().any(|e| e.from == from && e.to_node == to_node) {
            return Err(invalid("speculative edge already exists"));
        }
        let snap = SnapshotId(self.next_snap);
        self.next_snap += 1;
        self.snapshots.insert(snap, anchor);
        self.spec_edges.push(SpeculativeEdge {
            from,
            to_node,
            anchor: snap,
        });
        Ok(snap)
    }

    pub fn speculative_edges(&self) -> &[SpeculativeEdge] {
        &self.spec_edges
    }

    pub fn snapshot(&self, id: SnapshotId) -> Option<&Bindings> {
        self.snapshots.get(&id)
    }

    /// Drops a speculative edge together with the sub-nodes executed under
    /// it and returns its anchored bindings.
    pub fn rollback(&mut self, id: SnapshotId) -> Result<Bindings> {
        let bindings = self
            .snapshots
            .remove(&id)
            .ok_or_else(|| invalid(format!("unknown snapshot {id:?}")))?;
        self.spec_edges.retain(|e| e.anchor != id);
        let dropped: BTreeSet<SubNodeId> = self
            .subnodes
            .values()
            .filter(|s| s.rollback_anchor == Some(id))
            .map(|s| s.id)
            .collect();
        self.subnodes.retain(|k, _| !dropped.contains(k));
        for s in self.subnodes.values_mut() {
            s.deps.retain(|d| !dropped.contains(d));
        }
        Ok(bindings)
    }

    /// Drops a speculative edge after its result was accepted; the sub-nodes
    /// executed under it become regular.
    pub fn commit(&mut self, id: SnapshotId) -> Result<()> {
        self.snapshots
            .remove(&id)
            .ok_or_else(|| invalid(format!("unknown snapshot {id:?}")))?;
        self.spec_edges.retain(|e| e.anchor != id);
        for s in self.subnodes.values_mut().filter(|s| s.rollback_anchor == Some(id)) {
            s.speculative = false;
            s.rollback_anchor = None;
        }
        Ok(())
    }

    /// Replaces a sub-node's dependency set. Rejected if the result would
    /// contain a self-dependency, an unknown id or a cycle.
    pub fn rewire_dependency(&mut self, id: SubNodeId, deps: BTreeSet<SubNodeId>) -> Result<()> {
        if deps.contains(&id) {
            return Err(invalid("a sub-node cannot depend on itself"));
        }
        if let Some(d) = deps.iter().find(|d| !self.subnodes.contains_key(d)) {
            return Err(invalid(format!("unknown dependency {d:?}")));
        }
        let s = self
            .subnodes
            .get_mut(&id)
            .ok_or_else(|| invalid(format!("unknown sub-node {id:?}")))?;
        let old = std::mem::replace(&mut s.deps, deps);
        if self.topological_order().is_err() {
            self.subnodes.get_mut(&id).expect("exists").deps = old;
            return Err(invalid("rewiring would create a dependency cycle"));
        }
        Ok(())
    }

    /// Kahn's algorithm with ties broken by ascending id.
    pub fn topological_order(&self) -> Result<Vec<SubNodeId>> {
        let mut indeg: BTreeMap<SubNodeId, usize> = self.subnodes.keys().map(|&k| (k, 0)).collect();
        let mut users: BTreeMap<SubNodeId, Vec<SubNodeId>> = BTreeMap::new();
        for s in self.subnodes.values() {
            for d in &s.deps {
                *indeg.get_mut(&s.id).expect("present") += 1;
                users.entry(*d).or_default().push(s.id);
            }
        }
        let mut ready: VecDeque<SubNodeId> = indeg.iter().filter(|(_, &n)| n == 0).map(|(&k, _)| k).collect();
        let mut out = Vec::with_capacity(self.subnodes.len());
        while let Some(id) = ready.pop_front() {
            out.push(id);
            for u in users.get(&id).into_iter().flatten() {
                let n = indeg.get_mut(u).expect("present");
                *n -= 1;
                if *n == 0 {
                    ready.push_back(*u);
                }
            }
        }
        if out.len() == self.subnodes.len() {
            Ok(out)
        } else {
            Err(Error::InvalidState("sub-node dependencies contain a cycle".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_covers_stage_and_chains_deps() {
        let mut g = GraphInstance::new();
        let ids = g.split_node(2, 1, true, &[0, 4, 10, 12]).unwrap();
        assert_eq!(ids.len(), 3);
        let spans: Vec<_> = ids.iter().map(|i| g.get(*i).unwrap().span).collect();
        assert_eq!(
            spans,
            vec![
                Span::Decode { start: 0, end: 4 },
                Span::Decode { start: 4, end: 10 },
                Span::Decode { start: 10, end: 12 }
            ]
        );
        assert_eq!(g.get(ids[2]).unwrap().deps, BTreeSet::from([ids[1]]));
        assert!(g.is_last(ids[2]) && !g.is_last(ids[1]));
        assert!(g.split_node(2, 1, true, &[0, 3]).is_err());
    }

    #[test]
    fn split_rejects_bad_boundaries() {
        let mut g = GraphInstance::new();
        assert!(g.split_node(0, 1, false, &[0]).is_err());
        assert!(g.split_node(0, 1, false, &[1, 3]).is_err());
        assert!(g.split_node(0, 1, false, &[0, 3, 3]).is_err());
    }

    #[test]
    fn append_must_continue_stage() {
        let mut g = GraphInstance::new();
        g.declare_total(1, 1, 6);
        let a = g.append_subnode(1, 1, Span::Clusters { start: 0, end: 2 }, BTreeSet::new()).unwrap();
        assert!(g.append_subnode(1, 1, Span::Clusters { start: 3, end: 4 }, BTreeSet::new()).is_err());
        assert!(g.append_subnode(1, 1, Span::Decode { start: 2, end: 4 }, BTreeSet::new()).is_err());
        assert!(g.append_subnode(1, 1, Span::Clusters { start: 2, end: 7 }, BTreeSet::new()).is_err());
        let b = g.append_subnode(1, 1, Span::Clusters { start: 2, end: 6 }, BTreeSet::from([a])).unwrap();
        assert!(g.is_last(b));
    }

    #[test]
    fn reorder_moves_cluster_slices() {
        let mut g = GraphInstance::new();
        let ids = g.split_node(1, 1, false, &[0, 1, 3, 4]).unwrap();
        let plan = [5, 3, 8, 1];
        let new_plan = g.reorder_subnodes(&ids, &[1, 0, 2], &plan).unwrap();
        assert_eq!(new_plan, vec![3, 8, 5, 1]);
        assert_eq!(g.get(ids[1]).unwrap().span, Span::Clusters { start: 0, end: 2 });
        assert!(g.get(ids[1]).unwrap().deps.is_empty());
        assert_eq!(g.get(ids[0]).unwrap().deps, BTreeSet::from([ids[1]]));
        assert!(g.reorder_subnodes(&ids, &[0, 0, 1], &new_plan).is_err());
    }

    #[test]
    fn speculative_edge_rules() {
        let mut g = GraphInstance::new();
        let ids = g.split_node(1, 1, false, &[0, 2, 4]).unwrap();
        assert!(g.insert_speculative_edge(ids[1], 2, Bindings::new()).is_err());
        let snap = g.insert_speculative_edge(ids[0], 2, Bindings::new()).unwrap();
        assert!(g.insert_speculative_edge(ids[0], 2, Bindings::new()).is_err());
        assert_eq!(g.speculative_edges().len(), 1);
        g.rollback(snap).unwrap();
        assert!(g.speculative_edges().is_empty());
        assert!(g.rollback(snap).is_err());
    }

    #[test]
    fn rollback_drops_anchored_subnodes_and_commit_keeps_them() {
        let mut g = GraphInstance::new();
        let ret = g.split_node(1, 1, false, &[0, 2, 4]).unwrap();
        let mut anchor = Bindings::new();
        anchor.insert("q".into(), crate::raggraph::Value::text("before"));
        let snap = g.insert_speculative_edge(ret[0], 2, anchor.clone()).unwrap();
        let gen = g.append_subnode(2, 1, Span::Decode { start: 0, end: 3 }, BTreeSet::from([ret[0]])).unwrap();
        g.set_speculative(gen, snap).unwrap();
        let next = g.append_subnode(3, 1, Span::Decode { start: 0, end: 1 }, BTreeSet::from([gen])).unwrap();
        assert_eq!(g.rollback(snap).unwrap(), anchor);
        assert!(g.get(gen).is_none());
        assert!(g.get(next).unwrap().deps.is_empty());
        assert_eq!(g.len(), 3);

        let snap = g.insert_speculative_edge(ret[0], 2, Bindings::new()).unwrap();
        let gen = g.append_subnode(2, 1, Span::Decode { start: 0, end: 3 }, BTreeSet::from([ret[0]])).unwrap();
        g.set_speculative(gen, snap).unwrap();
        g.commit(snap).unwrap();
        let s = g.get(gen).unwrap();
        assert!(!s.speculative && s.rollback_anchor.is_none());
        assert!(g.speculative_edges().is_empty() && g.snapshot(snap).is_none());
    }

    #[test]
    fn rewire_rejects_self_and_cycles() {
        let mut g = GraphInstance::new();
        let ids = g.split_node(1, 1, false, &[0, 1, 2, 3]).unwrap();
        assert!(g.rewire_dependency(ids[0], BTreeSet::from([ids[0]])).is_err());
        assert!(g.rewire_dependency(ids[0], BTreeSet::from([ids[2]])).is_err());
        assert!(g.get(ids[0]).unwrap().deps.is_empty());
        g.rewire_dependency(ids[2], BTreeSet::from([ids[0]])).unwrap();
        assert_eq!(g.topological_order().unwrap(), vec![ids[0], ids[1], ids[2]]);
    }

    fn boundaries() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::btree_set(1usize..40, 1..8).prop_map(|s| {
            let mut v = vec![0];
            v.extend(s);
            v
        })
    }

    proptest! {
        #[test]
        fn reorder_preserves_cluster_multiset(b in boundaries(), seed in any::<u64>()) {
            let mut g = GraphInstance::new();
            let ids = g.split_node(0, 1, false, &b).unwrap();
            let total = *b.last().unwrap();
            let plan: Vec<u32> = (0..total as u32).map(|i| i * 7 % 101).collect();
            let mut order: Vec<usize> = (0..ids.len()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let new_plan = g.reorder_subnodes(&ids, &order, &plan).unwrap();
            let mut x = new_plan.clone();
            let mut y = plan.clone();
            x.sort_unstable();
            y.sort_unstable();
            prop_assert_eq!(x, y);
            let mut covered = 0;
            for sub in g.subnodes_of(0, 1) {
                prop_assert_eq!(sub.span.bounds().0, covered);
                covered = sub.span.bounds().1;
            }
            prop_assert_eq!(covered, total);
            prop_assert!(g.topological_order().is_ok());
        }

        #[test]
        fn random_rewires_keep_graph_acyclic(
            n in 2usize..10,
            edits in proptest::collection::vec((0usize..10, proptest::collection::btree_set(0usize..10, 0..4)), 1..30)
        ) {
            let mut g = GraphInstance::new();
            let b: Vec<usize> = (0..=n).collect();
            let ids = g.split_node(0, 1, true, &b).unwrap();
            for (who, deps) in edits {
                let who = ids[who % n];
                let deps = deps.into_iter().map(|d| ids[d % n]).collect();
                let _ = g.rewire_dependency(who, deps);
                prop_assert!(g.topological_order().is_ok());
            }
        }
    }
}
