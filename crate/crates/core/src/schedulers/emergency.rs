//! Emergency planning: a forward discrete-event simulation over a causal cone
//! that assigns every member a start time and a decoder.

use std::collections::BTreeSet;

use crate::decoder_model::{decode_duration, LatencyModel};
use crate::slice_graph::{ConstraintGraph, SliceState};
use crate::timeline::SliceId;

/// One slice to plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub slice: SliceId,
    /// Earliest time the slice can start (syndrome ready, in-flight neighbours
    /// finished).
    pub ready_at: f64,
    /// Unresolved degree at planning time.
    pub degree: u32,
    /// Deterministic tie-break among equal degrees (smaller first).
    pub order: u64,
}

/// Self-contained planner input; `adjacency[i]` lists node indices adjacent
/// to node `i` inside the scope.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanInput {
    pub now: f64,
    pub nodes: Vec<PlanNode>,
    pub adjacency: Vec<Vec<usize>>,
    pub busy_until: Vec<f64>,
    pub speeds: Vec<f64>,
    pub latency: LatencyModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub start: f64,
    pub finish: f64,
    pub slice: SliceId,
    pub decoder: usize,
    pub degree: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmergencyPlan {
    /// Dispatch table in planned order (non-decreasing start).
    pub entries: Vec<PlanEntry>,
    pub peak_decoders: usize,
    pub scope: Vec<SliceId>,
    pub created_at: f64,
}

impl EmergencyPlan {
    pub fn makespan(&self) -> f64 {
        self.entries.iter().map(|e| e.finish).fold(self.created_at, f64::max)
    }
}

/// Non-negative floats order like their bit patterns.
fn time_key(t: f64) -> u64 {
    debug_assert!(t >= 0.0);
    t.to_bits()
}

/// Greedy min-degree list scheduling of the scope on the pool model.
pub fn plan_emergency(input: &PlanInput) -> EmergencyPlan {
    let n = input.nodes.len();
    let mut start: Vec<f64> = input.nodes.iter().map(|s| s.ready_at.max(input.now)).collect();
    let mut degree: Vec<u32> = input.nodes.iter().map(|s| s.degree).collect();
    let mut queue: BTreeSet<(u64, usize)> = (0..n).map(|i| (time_key(start[i]), i)).collect();
    let mut busy = input.busy_until.clone();
    let mut entries = Vec::with_capacity(n);
    let mut ready: Vec<usize> = Vec::new();
    // neighbours of this round's dispatches
    let mut blocked = vec![false; n];
    let mut blocked_now: Vec<usize> = Vec::new();

    while let Some(&(first, _)) = queue.first() {
        let earliest_free = busy.iter().copied().fold(f64::INFINITY, f64::min);
        let t_sim = f64::from_bits(first).max(earliest_free);
        ready.clear();
        ready.extend(queue.range(..=(time_key(t_sim), usize::MAX)).map(|&(_, i)| i));
        ready.sort_by_key(|&i| (degree[i], input.nodes[i].order, i));
        let mut free: Vec<usize> = (0..busy.len()).filter(|&d| busy[d] <= t_sim).collect();
        free.sort_by(|&a, &b| input.speeds[b].total_cmp(&input.speeds[a]).then(a.cmp(&b)));
        let mut taken = 0;
        for &i in &ready {
            if taken == free.len() {
                break;
            }
            if blocked[i] {
                continue;
            }
            let decoder = free[taken];
            taken += 1;
            let finish = t_sim + decode_duration(degree[i], &input.latency, input.speeds[decoder]);
            busy[decoder] = finish;
            queue.remove(&(time_key(start[i]), i));
            entries.push(PlanEntry {
                start: t_sim,
                finish,
                slice: input.nodes[i].slice,
                decoder,
                degree: degree[i],
            });
            for &nb in &input.adjacency[i] {
                if queue.remove(&(time_key(start[nb]), nb)) {
                    start[nb] = start[nb].max(finish);
                    degree[nb] = degree[nb].saturating_sub(1);
                    queue.insert((time_key(start[nb]), nb));
                    blocked[nb] = true;
                    blocked_now.push(nb);
                }
            }
        }
        for i in blocked_now.drain(..) {
            blocked[i] = false;
        }
    }

    EmergencyPlan {
        peak_decoders: peak_overlap(&entries),
        scope: input.nodes.iter().map(|s| s.slice).collect(),
        created_at: input.now,
        entries,
    }
}

/// Maximum number of simultaneously running entries.
pub fn peak_overlap(entries: &[PlanEntry]) -> usize {
    let mut edges: Vec<(f64, i32)> = Vec::with_capacity(entries.len() * 2);
    for e in entries {
        edges.push((e.start, 1));
        edges.push((e.finish, -1));
    }
    // a finish at t frees its decoder for a start at t
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut cur = 0i32;
    let mut peak = 0i32;
    for (_, d) in edges {
        cur += d;
        peak = peak.max(cur);
    }
    peak as usize
}

/// Planner input for `scope` taken from the live graph.
///
/// ASSIGNED neighbours finishing at `finish_of(n)` push a member's start back
/// and will be resolved by then, so they are subtracted from its degree.
/// UNGENERATED members become ready at `ready_of_layer(t)`.
pub fn plan_input_from_graph(
    g: &ConstraintGraph,
    scope: &[SliceId],
    now: f64,
    busy_until: &[f64],
    speeds: &[f64],
    latency: LatencyModel,
    finish_of: impl Fn(SliceId) -> f64,
    ready_of_layer: impl Fn(usize) -> f64,
) -> PlanInput {
    let tl = g.timeline();
    let cells = (tl.layout().rows() * tl.layout().cols()) as u64;
    let local: std::collections::BTreeMap<SliceId, usize> =
        scope.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut nodes = Vec::with_capacity(scope.len());
    let mut adjacency = Vec::with_capacity(scope.len());
    for &s in scope {
        let slice = tl.slice(s);
        let t = tl.t(s);
        let mut ready_at = if g.state(s) == SliceState::Ungenerated {
            ready_of_layer(t)
        } else {
            now
        };
        let mut degree = g.unresolved_degree(s);
        let mut adj = Vec::new();
        for nb in tl.neighbors(s) {
            if let Some(&j) = local.get(&nb) {
                adj.push(j);
            } else if g.state(nb) == SliceState::Assigned {
                ready_at = ready_at.max(finish_of(nb));
                degree = degree.saturating_sub(1);
            }
        }
        nodes.push(PlanNode {
            slice: s,
            ready_at,
            degree,
            order: t as u64 * cells + (slice.pos.row * tl.layout().cols() + slice.pos.col) as u64,
        });
        adjacency.push(adj);
    }
    PlanInput {
        now,
        nodes,
        adjacency,
        busy_until: busy_until.to_vec(),
        speeds: speeds.to_vec(),
        latency,
    }
}
