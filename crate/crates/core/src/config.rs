//! TOML run configuration.
//!
//! Every field has a default, so an empty document is a valid config (the
//! built-in synthetic workload on 8 decoders under Triage). Example:
//!
//! ```toml
//! seed = 7
//! scheduler = "triage"
//!
//! [workload]
//! path = "bell4.lli"          # relative to the config file
//!
//! [pool]
//! decoders = 8
//! speed = 0.8
//!
//! [trigger]
//! tau_emergency = 4
//! scope_cap = 100             # or "none"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder_model::{JitterModel, LatencyModel};
use crate::metrics::LerTable;
use crate::schedulers::{HeuristicWeights, SchedulerKind, SpeculationParams, TriggerParams};
use crate::sim_engine::{DelayModel, SimConfig};
use crate::workload::{generate_synthetic, parse_workload, SyntheticParams, Workload};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("workload: {0}")]
    Workload(String),
}

/// `scope_cap = 100` or `scope_cap = "none"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScopeCap {
    Limit(usize),
    Keyword(NoCap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoCap {
    None,
}

impl ScopeCap {
    pub fn get(self) -> Option<usize> {
        match self {
            ScopeCap::Limit(n) => Some(n),
            ScopeCap::Keyword(NoCap::None) => None,
        }
    }

    pub fn from_option(cap: Option<usize>) -> Self {
        cap.map_or(ScopeCap::Keyword(NoCap::None), ScopeCap::Limit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSection {
    pub tau_emergency: i64,
    pub scope_cap: ScopeCap,
    pub replan_fraction: f64,
    pub min_replan_interval: f64,
}

impl Default for TriggerSection {
    fn default() -> Self {
        let p = TriggerParams::default();
        Self {
            tau_emergency: p.tau_emergency,
            scope_cap: ScopeCap::from_option(p.scope_cap),
            replan_fraction: p.replan_fraction,
            min_replan_interval: p.min_replan_interval,
        }
    }
}

impl TriggerSection {
    pub fn params(&self) -> TriggerParams {
        TriggerParams {
            tau_emergency: self.tau_emergency,
            scope_cap: self.scope_cap.get(),
            replan_fraction: self.replan_fraction,
            min_replan_interval: self.min_replan_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSection {
    pub decoders: usize,
    pub speed: f64,
    /// Per-decoder speeds; overrides `decoders` and `speed` when present.
    pub speeds: Option<Vec<f64>>,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            decoders: 8,
            speed: 1.0,
            speeds: None,
        }
    }
}

impl PoolSection {
    pub fn speeds(&self) -> Vec<f64> {
        self.speeds.clone().unwrap_or_else(|| vec![self.speed; self.decoders])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelaySection {
    pub ratio: f64,
    pub plan_a: f64,
    pub heuristic_cost: f64,
}

impl Default for DelaySection {
    fn default() -> Self {
        let d = DelayModel::default();
        Self {
            ratio: d.ratio,
            plan_a: d.plan_a,
            heuristic_cost: d.heuristic_cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Event log path; no log when absent.
    pub event_log: Option<PathBuf>,
    pub event_log_cap: usize,
    pub check_invariants: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            event_log: None,
            event_log_cap: 100_000,
            check_invariants: false,
        }
    }
}

/// Workload source: an LLI file or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticParams>,
    /// Generator seed; falls back to the run seed.
    pub seed: Option<u64>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: Some(SyntheticParams {
                n_lqubits: 4,
                n_layers: 41,
                critical_density: 5.0 / 41.0,
                merge_probability: 0.3,
                route_length_max: 3,
                rotate_probability: 0.1,
            }),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub termination_factor: f64,
    pub t_meas: f64,
    pub workload: WorkloadSection,
    pub pool: PoolSection,
    pub weights: HeuristicWeights,
    pub trigger: TriggerSection,
    pub latency: LatencyModel,
    pub jitter: JitterModel,
    pub speculation: SpeculationParams,
    pub ler: LerTable,
    pub delay: DelaySection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            scheduler: SchedulerKind::Triage,
            termination_factor: 10.0,
            t_meas: 1e-6,
            workload: WorkloadSection::default(),
            pool: PoolSection::default(),
            weights: HeuristicWeights::default(),
            trigger: TriggerSection::default(),
            latency: LatencyModel::default(),
            jitter: JitterModel::default(),
            speculation: SpeculationParams::default(),
            ler: LerTable::default(),
            delay: DelaySection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.workload.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output.event_log.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            scheduler: self.scheduler,
            weights: self.weights,
            trigger: self.trigger.params(),
            speculation: self.speculation,
            speeds: self.pool.speeds(),
            latency: self.latency,
            jitter: self.jitter,
            ler: self.ler.clone(),
            seed: self.seed,
            termination_factor: self.termination_factor,
            delay: DelayModel {
                ratio: self.delay.ratio,
                plan_a: self.delay.plan_a,
                heuristic_cost: self.delay.heuristic_cost,
            },
            t_meas: self.t_meas,
            check_invariants: self.output.check_invariants,
            event_log: self.output.event_log.is_some(),
            event_log_cap: self.output.event_log_cap,
        }
    }

    /// Schema and cross-field checks without touching the workload file.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.workload.path, &self.workload.synthetic) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "workload: give either `path` or `synthetic`, not both".into(),
                ))
            }
            (None, None) => return Err(ConfigError::Invalid("workload: `path` or `synthetic` is required".into())),
            (None, Some(p)) => p.validate().map_err(|e| ConfigError::Invalid(format!("workload: {e}")))?,
            (Some(_), None) => {}
        }
        if self.pool.speeds.is_none() && self.pool.decoders == 0 {
            return Err(ConfigError::Invalid("pool needs at least one decoder".into()));
        }
        self.sim_config().validate().map_err(ConfigError::Invalid)
    }

    pub fn load_workload(&self) -> Result<Workload, ConfigError> {
        if let Some(path) = &self.workload.path {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            return parse_workload(&text).map_err(|e| ConfigError::Workload(e.to_string()));
        }
        let params = self
            .workload
            .synthetic
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("workload: `path` or `synthetic` is required".into()))?;
        generate_synthetic(params, self.workload.seed.unwrap_or(self.seed))
            .map_err(|e| ConfigError::Workload(e.to_string()))
    }
}
