//! Steady-mode heuristics: FIFO, EDF, MDF and the weighted priority score.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::slice_graph::{select_conflict_free, ConstraintGraph, SliceState};
use crate::timeline::{SliceId, Timeline};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicWeights {
    pub w_u: f64,
    pub w_c: f64,
}

impl Default for HeuristicWeights {
    fn default() -> Self {
        Self { w_u: 0.5, w_c: 0.5 }
    }
}

impl HeuristicWeights {
    pub fn new(w_u: f64, w_c: f64) -> Result<Self, String> {
        let w = Self { w_u, w_c };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.w_u >= 0.0 && self.w_c >= 0.0) {
            return Err("weights must be non-negative".into());
        }
        if (self.w_u + self.w_c - 1.0).abs() > 1e-9 {
            return Err("weights must sum to 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SteadyPolicy {
    Fifo,
    Edf,
    Mdf,
    Weighted(HeuristicWeights),
}

/// Layers until the slice's deadline; `None` when there is none.
pub fn deadline_gap(tl: &Timeline, s: SliceId, t_now: usize) -> Option<i64> {
    tl.slice(s)
        .deadline
        .map(|k| tl.layer_position(k) as i64 - t_now as i64)
}

pub fn urgency(gap: Option<i64>) -> f64 {
    match gap {
        Some(g) => 1.0 / g.max(1) as f64,
        None => 0.0,
    }
}

pub fn cost_efficiency(degree: u32) -> f64 {
    1.0 / f64::from(degree + 1)
}

pub fn priority_score(g: &ConstraintGraph, s: SliceId, w: &HeuristicWeights, t_now: usize) -> f64 {
    let gap = deadline_gap(g.timeline(), s, t_now);
    w.w_u * urgency(gap) + w.w_c * cost_efficiency(g.unresolved_degree(s))
}

/// Primary sort key of a policy, ascending. FIFO has no primary key.
///
/// EDF compares the clamped gap so that it coincides with the weighted score
/// at `w = (1, 0)`.
pub fn policy_key(policy: &SteadyPolicy, gap: Option<i64>, degree: u32) -> f64 {
    match policy {
        SteadyPolicy::Fifo => 0.0,
        SteadyPolicy::Edf => gap.map_or(f64::INFINITY, |g| g.max(1) as f64),
        SteadyPolicy::Mdf => f64::from(degree),
        SteadyPolicy::Weighted(w) => -(w.w_u * urgency(gap) + w.w_c * cost_efficiency(degree)),
    }
}

/// Tie-break: ascending layer, then row-major position, then id.
pub fn order_key(tl: &Timeline, s: SliceId) -> (usize, usize, usize, SliceId) {
    let slice = tl.slice(s);
    (tl.t(s), slice.pos.row, slice.pos.col, s)
}

/// Sort-based reference implementation of a steady-mode pass.
pub fn schedule_steady(
    pending: &[SliceId],
    free: usize,
    policy: &SteadyPolicy,
    g: &ConstraintGraph,
    t_now: usize,
) -> Vec<SliceId> {
    if free == 0 {
        return Vec::new();
    }
    let tl = g.timeline();
    let mut keyed: Vec<(f64, (usize, usize, usize, SliceId))> = pending
        .iter()
        .map(|&s| {
            let key = policy_key(policy, deadline_gap(tl, s, t_now), g.unresolved_degree(s));
            (key, order_key(tl, s))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    select_conflict_free(keyed.into_iter().map(|(_, o)| o.3), free, g)
}

const NO_DEADLINE: u32 = u32::MAX;

/// Incrementally maintained set of PENDING slices bucketed by
/// (deadline layer, unresolved degree) so a pass never sorts the backlog.
///
/// `seq` is the generation sequence number, which orders slices exactly like
/// the (layer, row-major position) tie-break.
#[derive(Debug, Default, Clone)]
pub struct PendingIndex {
    buckets: BTreeMap<(u32, u32), BTreeSet<(u64, SliceId)>>,
    fifo: BTreeSet<(u64, SliceId)>,
    seq: Vec<u64>,
    entry: Vec<Option<(u32, u32)>>,
}

impl PendingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn contains(&self, s: SliceId) -> bool {
        self.entry.get(s.index()).is_some_and(|e| e.is_some())
    }

    /// Records the generation order of a slice. Must precede `refresh`.
    pub fn register(&mut self, s: SliceId, seq: u64) {
        let i = s.index();
        if self.seq.len() <= i {
            self.seq.resize(i + 1, u64::MAX);
            self.entry.resize(i + 1, None);
        }
        self.seq[i] = seq;
    }

    pub fn seq(&self, s: SliceId) -> u64 {
        self.seq[s.index()]
    }

    fn remove(&mut self, s: SliceId) {
        if let Some(key) = self.entry[s.index()].take() {
            let seq = self.seq[s.index()];
            let bucket = self.buckets.get_mut(&key).expect("indexed bucket exists");
            bucket.remove(&(seq, s));
            if bucket.is_empty() {
                self.buckets.remove(&key);
            }
            self.fifo.remove(&(seq, s));
        }
    }

    /// Re-reads state, deadline and degree of `s` from the graph.
    pub fn refresh(&mut self, g: &ConstraintGraph, s: SliceId) {
        if s.index() >= self.entry.len() {
            return;
        }
        let want = (g.state(s) == SliceState::Pending).then(|| {
            let deadline = g.timeline().slice(s).deadline.map_or(NO_DEADLINE, |k| k.0);
            (deadline, g.unresolved_degree(s))
        });
        if want == self.entry[s.index()] {
            return;
        }
        self.remove(s);
        if let Some(key) = want {
            let seq = self.seq[s.index()];
            self.buckets.entry(key).or_default().insert((seq, s));
            self.fifo.insert((seq, s));
            self.entry[s.index()] = Some(key);
        }
    }

    /// Smallest deadline gap among indexed slices.
    pub fn min_deadline_gap(&self, tl: &Timeline, t_now: usize) -> Option<i64> {
        self.buckets
            .keys()
            .map(|&(d, _)| d)
            .find(|&d| d != NO_DEADLINE)
            .map(|d| tl.layer_position(crate::timeline::LayerKey(d)) as i64 - t_now as i64)
    }

    /// Distinct deadline layers (as stable keys) with gap at most `tau`.
    pub fn urgent_deadlines(&self, tl: &Timeline, t_now: usize, tau: i64) -> Vec<crate::timeline::LayerKey> {
        let mut out: Vec<crate::timeline::LayerKey> = Vec::new();
        for &(d, _) in self.buckets.keys() {
            if d == NO_DEADLINE {
                break;
            }
            let key = crate::timeline::LayerKey(d);
            if tl.layer_position(key) as i64 - t_now as i64 > tau {
                break;
            }
            if out.last() != Some(&key) {
                out.push(key);
            }
        }
        out
    }

    pub fn iter_fifo(&self) -> impl Iterator<Item = SliceId> + '_ {
        self.fifo.iter().map(|&(_, s)| s)
    }

    /// Visits indexed slices in policy order until `visit` returns `false`.
    pub fn for_each_ordered(
        &self,
        policy: &SteadyPolicy,
        tl: &Timeline,
        t_now: usize,
        mut visit: impl FnMut(SliceId) -> bool,
    ) {
        if let SteadyPolicy::Fifo = policy {
            for s in self.iter_fifo() {
                if !visit(s) {
                    return;
                }
            }
            return;
        }
        let mut keyed: Vec<(f64, &BTreeSet<(u64, SliceId)>)> = self
            .buckets
            .iter()
            .map(|(&(d, deg), set)| {
                let gap = (d != NO_DEADLINE)
                    .then(|| tl.layer_position(crate::timeline::LayerKey(d)) as i64 - t_now as i64);
                (policy_key(policy, gap, deg), set)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut i = 0;
        while i < keyed.len() {
            let mut j = i + 1;
            while j < keyed.len() && keyed[j].0 == keyed[i].0 {
                j += 1;
            }
            if j == i + 1 {
                for &(_, s) in keyed[i].1 {
                    if !visit(s) {
                        return;
                    }
                }
            } else {
                // k-way merge of equal-key buckets by generation order
                let mut iters: Vec<_> = keyed[i..j].iter().map(|(_, set)| set.iter()).collect();
                let mut heap = BinaryHeap::new();
                for (k, it) in iters.iter_mut().enumerate() {
                    if let Some(&(seq, s)) = it.next() {
                        heap.push(Reverse((seq, s, k)));
                    }
                }
                while let Some(Reverse((_, s, k))) = heap.pop() {
                    if !visit(s) {
                        return;
                    }
                    if let Some(&(seq, s2)) = iters[k].next() {
                        heap.push(Reverse((seq, s2, k)));
                    }
                }
            }
            i = j;
        }
    }

    /// Greedy conflict-free selection over the index in policy order.
    /// `admit` can veto candidates (e.g. slices near an emergency scope).
    pub fn select(
        &self,
        policy: &SteadyPolicy,
        g: &ConstraintGraph,
        t_now: usize,
        limit: usize,
        mut admit: impl FnMut(SliceId) -> bool,
    ) -> Vec<SliceId> {
        let mut taken = Vec::new();
        if limit == 0 {
            return taken;
        }
        self.for_each_ordered(policy, g.timeline(), t_now, |s| {
            if admit(s) && g.is_free_of(s, &taken) {
                taken.push(s);
            }
            taken.len() < limit
        });
        taken
    }
}
