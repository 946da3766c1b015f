//! Baseline policies: serial sliding window, time-parallel windows and a
//! speculative successor-based scheduler.

use serde::{Deserialize, Serialize};

use crate::decoder_model::LatencyModel;
use crate::slice_graph::{select_conflict_free, ConstraintGraph, SliceState};
use crate::timeline::{SliceId, Timeline};

/// Members of the instruction that `s` belongs to, in qubit order.
pub fn component_of(tl: &Timeline, s: SliceId) -> Vec<SliceId> {
    let slice = tl.slice(s);
    if slice.group_size == 1 {
        return vec![s];
    }
    tl.layer_by_key(slice.layer)
        .iter()
        .copied()
        .filter(|&m| tl.slice(m).group == slice.group)
        .collect()
}

/// Summed relative volume of a block; only neighbours outside the block
/// contribute buffer slabs.
pub fn block_volume(g: &ConstraintGraph, members: &[SliceId], lm: &LatencyModel) -> f64 {
    let tl = g.timeline();
    members
        .iter()
        .map(|&s| {
            let external = tl
                .neighbors(s)
                .filter(|n| !members.contains(n) && g.state(*n) != SliceState::Completed)
                .count() as u32;
            lm.volume(external)
        })
        .sum()
}

pub fn block_duration(g: &ConstraintGraph, members: &[SliceId], lm: &LatencyModel, speed: f64) -> f64 {
    lm.duration_for_volume(block_volume(g, members, lm), speed)
}

fn block_ready(g: &ConstraintGraph, block: &[SliceId], taken: &[SliceId]) -> bool {
    let tl = g.timeline();
    block.iter().all(|&m| {
        g.state(m) == SliceState::Pending
            && tl
                .neighbors(m)
                .all(|n| block.contains(&n) || (g.state(n) != SliceState::Assigned && !taken.contains(&n)))
    })
}

/// Next block for the serial sliding window: the component of the oldest
/// undecoded slice, and only when nothing else is in flight.
pub fn schedule_sliding(
    fifo: impl IntoIterator<Item = SliceId>,
    in_flight: usize,
    g: &ConstraintGraph,
) -> Option<Vec<SliceId>> {
    if in_flight > 0 {
        return None;
    }
    let first = fifo.into_iter().next()?;
    let block = component_of(g.timeline(), first);
    block_ready(g, &block, &[]).then_some(block)
}

/// Whole-component blocks in FIFO order, at most `free` of them.
pub fn schedule_time_parallel(
    fifo: impl IntoIterator<Item = SliceId>,
    free: usize,
    g: &ConstraintGraph,
) -> Vec<Vec<SliceId>> {
    let mut blocks: Vec<Vec<SliceId>> = Vec::new();
    let mut taken: Vec<SliceId> = Vec::new();
    if free == 0 {
        return blocks;
    }
    let tl = g.timeline();
    for s in fifo {
        if taken.contains(&s) {
            continue;
        }
        let block = component_of(tl, s);
        if block_ready(g, &block, &taken) {
            taken.extend_from_slice(&block);
            blocks.push(block);
            if blocks.len() == free {
                break;
            }
        }
    }
    blocks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeculationParams {
    pub misprediction_rate: f64,
    pub speculation_overhead: f64,
}

impl Default for SpeculationParams {
    fn default() -> Self {
        Self {
            misprediction_rate: 0.10,
            speculation_overhead: 0.10,
        }
    }
}

impl SpeculationParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("misprediction_rate", self.misprediction_rate),
            ("speculation_overhead", self.speculation_overhead),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// FIFO selection followed by speculative starts.
///
/// `speculative` lists OCCUPIED candidates paired with the neighbour they
/// wait on. A candidate is started only when that neighbour is its sole
/// ASSIGNED neighbour, the neighbour is not itself speculative, and the
/// candidate touches nothing picked earlier in the pass.
pub fn schedule_swiper(
    fifo: impl IntoIterator<Item = SliceId>,
    speculative: impl IntoIterator<Item = (SliceId, SliceId)>,
    free: usize,
    g: &ConstraintGraph,
) -> (Vec<SliceId>, Vec<(SliceId, SliceId)>) {
    let normal = select_conflict_free(fifo, free, g);
    let mut spec: Vec<(SliceId, SliceId)> = Vec::new();
    let tl = g.timeline();
    for (s, awaited) in speculative {
        if normal.len() + spec.len() >= free {
            break;
        }
        let eligible = g.state(s) == SliceState::Occupied
            && g.assigned_neighbors(s) == 1
            && g.state(awaited) == SliceState::Assigned
            && !g.is_speculative(awaited)
            && tl.are_adjacent(s, awaited)
            && !spec.iter().any(|&(o, _)| o == s)
            && tl
                .neighbors(s)
                .all(|n| !normal.contains(&n) && !spec.iter().any(|&(o, _)| o == n));
        if eligible {
            spec.push((s, awaited));
        }
    }
    (normal, spec)
}
