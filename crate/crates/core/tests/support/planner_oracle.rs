//! Reference emergency planner and a brute-force plan checker.
//!
//! The oracle re-derives the dispatch sequence one round at a time with plain
//! vector scans; it shares no code with the planner under test beyond the
//! latency formula.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use triage_core::decoder_model::{decode_duration, LatencyModel};
use triage_core::schedulers::{EmergencyPlan, PlanInput, PlanNode};
use triage_core::timeline::SliceId;

/// One dispatch of the oracle: (node index, start, decoder, degree at dispatch).
pub type OracleStep = (usize, f64, usize, u32);

pub fn oracle_plan(input: &PlanInput) -> Vec<OracleStep> {
    let n = input.nodes.len();
    let mut start: Vec<f64> = input.nodes.iter().map(|s| s.ready_at.max(input.now)).collect();
    let mut degree: Vec<u32> = input.nodes.iter().map(|s| s.degree).collect();
    let mut planned = vec![false; n];
    let mut busy = input.busy_until.clone();
    let mut steps = Vec::new();
    while planned.iter().any(|&p| !p) {
        let next_start = (0..n).filter(|&i| !planned[i]).map(|i| start[i]).fold(f64::INFINITY, f64::min);
        let next_free = busy.iter().copied().fold(f64::INFINITY, f64::min);
        let t = next_start.max(next_free);

        let mut ready: Vec<usize> = (0..n).filter(|&i| !planned[i] && start[i] <= t).collect();
        ready.sort_by(|&a, &b| {
            (degree[a], input.nodes[a].order, a).cmp(&(degree[b], input.nodes[b].order, b))
        });
        let mut free: Vec<usize> = (0..busy.len()).filter(|&d| busy[d] <= t).collect();
        free.sort_by(|&a, &b| input.speeds[b].partial_cmp(&input.speeds[a]).unwrap().then(a.cmp(&b)));

        let mut this_round: Vec<usize> = Vec::new();
        let mut free = free.into_iter();
        for i in ready {
            if this_round.iter().any(|&j| input.adjacency[j].contains(&i)) {
                continue;
            }
            let Some(d) = free.next() else { break };
            let finish = t + decode_duration(degree[i], &input.latency, input.speeds[d]);
            busy[d] = finish;
            planned[i] = true;
            steps.push((i, t, d, degree[i]));
            this_round.push(i);
            for &nb in &input.adjacency[i] {
                if !planned[nb] {
                    start[nb] = start[nb].max(finish);
                    degree[nb] = degree[nb].saturating_sub(1);
                }
            }
        }
    }
    steps
}

/// Checks a plan against its input by pairwise comparison. Returns the first
/// violation found.
pub fn check_feasible(input: &PlanInput, plan: &EmergencyPlan) -> Result<(), String> {
    let n = input.nodes.len();
    if plan.entries.len() != n {
        return Err(format!("{} entries for {n} nodes", plan.entries.len()));
    }
    let index_of = |s: SliceId| input.nodes.iter().position(|x| x.slice == s);
    let mut seen = vec![false; n];
    let mut idx = Vec::with_capacity(n);
    for e in &plan.entries {
        let i = index_of(e.slice).ok_or_else(|| format!("slice {} not in scope", e.slice.0))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(format!("slice {} planned twice", e.slice.0));
        }
        idx.push(i);
    }
    for (k, e) in plan.entries.iter().enumerate() {
        let i = idx[k];
        let node = &input.nodes[i];
        if e.start < input.now || e.start < node.ready_at {
            return Err(format!("slice {} starts at {} before it is ready", e.slice.0, e.start));
        }
        if e.decoder >= input.busy_until.len() {
            return Err(format!("decoder {} out of range", e.decoder));
        }
        if e.start < input.busy_until[e.decoder] {
            return Err(format!("slice {} starts on busy decoder {}", e.slice.0, e.decoder));
        }
        let earlier_nbrs = input.adjacency[i].iter().filter(|&&j| idx[..k].contains(&j)).count() as u32;
        if e.degree != node.degree.saturating_sub(earlier_nbrs) {
            return Err(format!("slice {} dispatched with degree {}", e.slice.0, e.degree));
        }
        let expect = e.start + decode_duration(e.degree, &input.latency, input.speeds[e.decoder]);
        if (e.finish - expect).abs() > 1e-9 {
            return Err(format!("slice {} finish {} != {}", e.slice.0, e.finish, expect));
        }
        if k > 0 && e.start < plan.entries[k - 1].start {
            return Err("entries are not in start order".into());
        }
        for (l, f) in plan.entries.iter().enumerate().take(k) {
            let overlap = e.start < f.finish && f.start < e.finish;
            if overlap && e.decoder == f.decoder {
                return Err(format!("decoder {} runs two slices at once", e.decoder));
            }
            if overlap && input.adjacency[i].contains(&idx[l]) {
                return Err(format!("adjacent slices {} and {} overlap", e.slice.0, f.slice.0));
            }
        }
    }
    Ok(())
}

/// `true` when the planner's dispatch sequence equals the oracle's exactly.
pub fn matches_oracle(input: &PlanInput, plan: &EmergencyPlan) -> Result<(), String> {
    let steps = oracle_plan(input);
    if steps.len() != plan.entries.len() {
        return Err(format!("oracle planned {} of {}", steps.len(), plan.entries.len()));
    }
    for (k, (e, &(i, start, d, deg))) in plan.entries.iter().zip(&steps).enumerate() {
        let want = (input.nodes[i].slice, start.to_bits(), d, deg);
        let got = (e.slice, e.start.to_bits(), e.decoder, e.degree);
        if want != got {
            return Err(format!("step {k}: planner {got:?}, oracle {want:?}"));
        }
    }
    Ok(())
}

/// Random planner input of `1..=max_nodes` slices with symmetric adjacency of
/// degree at most 6.
pub fn random_input<R: Rng>(rng: &mut R, max_nodes: usize) -> PlanInput {
    let n = rng.random_range(1..=max_nodes);
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    pairs.shuffle(rng);
    let density = rng.random_range(0.0..0.7);
    for (a, b) in pairs {
        if adjacency[a].len() < 6 && adjacency[b].len() < 6 && rng.random_bool(density) {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
    }
    let now = rng.random_range(0..20) as f64 * 0.5;
    let nodes = (0..n)
        .map(|i| PlanNode {
            slice: SliceId(rng.random_range(0..1000) * 8 + i as u32),
            ready_at: if rng.random_bool(0.4) { now + rng.random_range(0..6) as f64 * 0.5 } else { now },
            degree: (adjacency[i].len() as u32 + rng.random_range(0..=2)).min(6),
            order: rng.random_range(0..4),
        })
        .collect();
    let m = rng.random_range(1..=6);
    let speeds = (0..m).map(|_| [0.5, 0.8, 1.0, 1.2, 2.0][rng.random_range(0..5)]).collect();
    let busy_until = (0..m)
        .map(|_| if rng.random_bool(0.5) { now + rng.random_range(0..4) as f64 * 0.75 } else { 0.0 })
        .collect();
    PlanInput {
        now,
        nodes,
        adjacency,
        busy_until,
        speeds,
        latency: LatencyModel::default(),
    }
}
