//! Scheduling policies. Every policy is a decision function over a graph
//! snapshot; the simulation engine applies the decisions.

pub mod baselines;
pub mod emergency;
pub mod steady;
pub mod triage;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{
    block_duration, block_volume, component_of, schedule_sliding, schedule_swiper, schedule_time_parallel,
    SpeculationParams,
};
pub use emergency::{plan_emergency, plan_input_from_graph, EmergencyPlan, PlanEntry, PlanInput, PlanNode};
pub use steady::{priority_score, schedule_steady, HeuristicWeights, PendingIndex, SteadyPolicy};
pub use triage::{backfill_budget, triage_trigger, Mode, TriggerDecision, TriggerParams, TriggerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Sliding,
    TimeParallel,
    StFifo,
    StEdf,
    StMdf,
    StWeighted,
    Swiper,
    Triage,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 8] = [
        SchedulerKind::Sliding,
        SchedulerKind::TimeParallel,
        SchedulerKind::StFifo,
        SchedulerKind::StEdf,
        SchedulerKind::StMdf,
        SchedulerKind::StWeighted,
        SchedulerKind::Swiper,
        SchedulerKind::Triage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Sliding => "sliding",
            SchedulerKind::TimeParallel => "time_parallel",
            SchedulerKind::StFifo => "st_fifo",
            SchedulerKind::StEdf => "st_edf",
            SchedulerKind::StMdf => "st_mdf",
            SchedulerKind::StWeighted => "st_weighted",
            SchedulerKind::Swiper => "swiper",
            SchedulerKind::Triage => "triage",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = SchedulerKind::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown scheduler `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in SchedulerKind::ALL {
            assert_eq!(k.as_str().parse::<SchedulerKind>().unwrap(), k);
        }
        assert!("edf".parse::<SchedulerKind>().unwrap_err().contains("st_edf"));
    }
}
