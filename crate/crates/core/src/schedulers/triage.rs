//! Mode switching between steady and emergency scheduling, plus the
//! backfilling budget.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::timeline::SliceId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerParams {
    pub tau_emergency: i64,
    /// `None` disables the cap.
    pub scope_cap: Option<usize>,
    pub replan_fraction: f64,
    pub min_replan_interval: f64,
}

impl Default for TriggerParams {
    fn default() -> Self {
        Self {
            tau_emergency: 4,
            scope_cap: Some(100),
            replan_fraction: 0.3,
            min_replan_interval: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Steady,
    Emergency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerState {
    pub mode: Mode,
    pub active_scope: BTreeSet<SliceId>,
    pub last_replan_time: f64,
    pub params: TriggerParams,
}

impl TriggerState {
    pub fn new(params: TriggerParams) -> Self {
        Self {
            mode: Mode::Steady,
            active_scope: BTreeSet::new(),
            last_replan_time: f64::NEG_INFINITY,
            params,
        }
    }

    pub fn enter(&mut self, scope: impl IntoIterator<Item = SliceId>, now: f64) {
        self.mode = Mode::Emergency;
        self.active_scope = scope.into_iter().collect();
        self.last_replan_time = now;
    }

    pub fn leave(&mut self) {
        self.mode = Mode::Steady;
        self.active_scope.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TriggerDecision {
    StaySteady,
    /// Plan the given scope and switch to emergency mode.
    EnterEmergency(Vec<SliceId>),
    /// Re-plan over the given (merged) scope.
    Replan(Vec<SliceId>),
    /// Keep executing the active plan.
    KeepPlan,
    FallbackSteady,
}

/// Outcome of the three re-plan predicates, exposed for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplanCheck {
    pub not_contained: bool,
    pub significant: bool,
    pub interval_elapsed: bool,
}

impl ReplanCheck {
    pub fn all(&self) -> bool {
        self.not_contained && self.significant && self.interval_elapsed
    }
}

pub fn replan_check(ts: &TriggerState, new_scope: &BTreeSet<SliceId>, now: f64) -> ReplanCheck {
    let added = new_scope.difference(&ts.active_scope).count();
    ReplanCheck {
        not_contained: added > 0,
        significant: added as f64 > ts.params.replan_fraction * ts.active_scope.len() as f64,
        interval_elapsed: now - ts.last_replan_time >= ts.params.min_replan_interval,
    }
}

/// Decides the next mode.
///
/// `min_gap` is the smallest deadline gap over PENDING slices, `roots` the
/// critical slices of the urgent deadlines and `cone` returns the plannable
/// members of a root's cone, or `None` once it exceeds the given limit.
pub fn triage_trigger(
    ts: &TriggerState,
    min_gap: Option<i64>,
    roots: &[SliceId],
    mut cone: impl FnMut(SliceId, usize) -> Option<Vec<SliceId>>,
    now: f64,
) -> TriggerDecision {
    let urgent = min_gap.is_some_and(|g| g <= ts.params.tau_emergency);
    if !urgent || roots.is_empty() {
        return match ts.mode {
            Mode::Steady => TriggerDecision::StaySteady,
            Mode::Emergency => TriggerDecision::KeepPlan,
        };
    }
    let cap = ts.params.scope_cap.unwrap_or(usize::MAX);
    let mut scope = BTreeSet::new();
    for &root in roots {
        match cone(root, cap) {
            Some(members) => scope.extend(members),
            None => return TriggerDecision::FallbackSteady,
        }
        if scope.len() > cap {
            return TriggerDecision::FallbackSteady;
        }
    }
    match ts.mode {
        Mode::Steady if scope.is_empty() => TriggerDecision::StaySteady,
        Mode::Steady => TriggerDecision::EnterEmergency(scope.into_iter().collect()),
        Mode::Emergency => {
            if !replan_check(ts, &scope, now).all() {
                return TriggerDecision::KeepPlan;
            }
            let merged: BTreeSet<SliceId> = scope.union(&ts.active_scope).copied().collect();
            if merged.len() > cap {
                return TriggerDecision::FallbackSteady;
            }
            TriggerDecision::Replan(merged.into_iter().collect())
        }
    }
}

/// Decoders available for backfilling in this pass.
pub fn backfill_budget(m: usize, m_peak: usize, running_backfill: usize, free: usize, emergency_now: usize) -> usize {
    let headroom = m.saturating_sub(m_peak).saturating_sub(running_backfill);
    headroom.min(free.saturating_sub(emergency_now))
}
