//! Parameter sweeps: cross-product of axes, repetitions with derived seeds,
//! long-format and winner-map CSV output.
//!
//! ```toml
//! master_seed = 1
//! repetitions = 3
//!
//! [base]
//! workload.path = "bell4.lli"
//!
//! [axes]
//! M = [2, 4, 8]
//! speed = [0.6, 0.8, 1.0]
//! scheduler = ["time_parallel", "st_fifo", "triage"]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::schedulers::SchedulerKind;
use crate::sim_engine::{run, SimError, SimResult};
use crate::workload::Workload;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sweep has {0} runs, above max_runs = {1}")]
    TooLarge(usize, usize),
    #[error("cell {cell}: {source}")]
    Run { cell: String, source: SimError },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    #[serde(rename = "M")]
    pub m: Option<Vec<usize>>,
    pub speed: Option<Vec<f64>>,
    pub scheduler: Option<Vec<SchedulerKind>>,
    pub sigma: Option<Vec<f64>>,
    pub delay_ratio: Option<Vec<f64>>,
    pub buffer_b: Option<Vec<u32>>,
    pub w_u: Option<Vec<f64>>,
    pub tau_emergency: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Cap on cells × repetitions.
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default)]
    pub axes: Axes,
}

fn one() -> usize {
    1
}

fn default_max_runs() -> usize {
    100_000
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec = Self::from_toml(&text)?;
        spec.base.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(spec)
    }

    /// All cells in canonical order (first axis slowest, scheduler fastest).
    pub fn cells(&self) -> Vec<Cell> {
        let base = &self.base;
        let ax = &self.axes;
        let ms = ax.m.clone().unwrap_or_else(|| vec![base.pool.speeds().len()]);
        let speeds = ax.speed.clone().unwrap_or_else(|| vec![base.pool.speeds().iter().copied().fold(0.0, f64::max)]);
        let scheds = ax.scheduler.clone().unwrap_or_else(|| vec![base.scheduler]);
        let opt = |v: &Option<Vec<f64>>| v.clone().map_or(vec![None], |v| v.into_iter().map(Some).collect());
        let sigmas = opt(&ax.sigma);
        let delays = opt(&ax.delay_ratio);
        let wus = opt(&ax.w_u);
        let bufs: Vec<Option<u32>> = ax.buffer_b.clone().map_or(vec![None], |v| v.into_iter().map(Some).collect());
        let taus: Vec<Option<i64>> = ax.tau_emergency.clone().map_or(vec![None], |v| v.into_iter().map(Some).collect());

        let mut out = Vec::new();
        for &m in &ms {
            for &speed in &speeds {
                for &sigma in &sigmas {
                    for &delay_ratio in &delays {
                        for &buffer_b in &bufs {
                            for &w_u in &wus {
                                for &tau in &taus {
                                    for &scheduler in &scheds {
                                        out.push(Cell {
                                            m,
                                            speed,
                                            sigma,
                                            delay_ratio,
                                            buffer_b,
                                            w_u,
                                            tau_emergency: tau,
                                            scheduler,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn extra_axes(&self) -> Vec<&'static str> {
        let ax = &self.axes;
        [
            ("sigma", ax.sigma.is_some()),
            ("delay_ratio", ax.delay_ratio.is_some()),
            ("buffer_b", ax.buffer_b.is_some()),
            ("w_u", ax.w_u.is_some()),
            ("tau_emergency", ax.tau_emergency.is_some()),
        ]
        .into_iter()
        .filter_map(|(n, on)| on.then_some(n))
        .collect()
    }
}

/// One point of the cross-product. `None` keeps the base value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub m: usize,
    pub speed: f64,
    pub sigma: Option<f64>,
    pub delay_ratio: Option<f64>,
    pub buffer_b: Option<u32>,
    pub w_u: Option<f64>,
    pub tau_emergency: Option<i64>,
    pub scheduler: SchedulerKind,
}

impl Cell {
    /// Axis values without the scheduler, as `name=value` pairs.
    pub fn coords(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![("M", self.m.to_string()), ("speed", self.speed.to_string())];
        if let Some(x) = self.sigma {
            v.push(("sigma", x.to_string()));
        }
        if let Some(x) = self.delay_ratio {
            v.push(("delay_ratio", x.to_string()));
        }
        if let Some(x) = self.buffer_b {
            v.push(("buffer_b", x.to_string()));
        }
        if let Some(x) = self.w_u {
            v.push(("w_u", x.to_string()));
        }
        if let Some(x) = self.tau_emergency {
            v.push(("tau_emergency", x.to_string()));
        }
        v
    }

    fn label(&self) -> String {
        let mut s: Vec<String> = self.coords().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push(format!("scheduler={}", self.scheduler));
        s.join(",")
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.pool.speeds = None;
        c.pool.decoders = self.m;
        c.pool.speed = self.speed;
        c.scheduler = self.scheduler;
        if let Some(s) = self.sigma {
            c.jitter.enabled = s > 0.0;
            c.jitter.sigma = Some(s);
        }
        if let Some(r) = self.delay_ratio {
            c.delay.ratio = r;
        }
        if let Some(b) = self.buffer_b {
            c.latency.buffer_b = b;
        }
        if let Some(w) = self.w_u {
            c.weights.w_u = w;
            c.weights.w_c = 1.0 - w;
        }
        if let Some(t) = self.tau_emergency {
            c.trigger.tau_emergency = t;
        }
        c
    }
}

fn digest_seed(text: &str) -> u64 {
    let hash = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(hash[..8].try_into().expect("digest has 32 bytes"))
}

/// Simulation seed of one repetition of a cell. The scheduler is not part of
/// the key, so every scheduler in a cell sees the same jitter stream.
pub fn cell_seed(master: u64, coords: &[(&str, String)], rep: usize) -> u64 {
    let key: Vec<String> = coords.iter().map(|(k, v)| format!("{k}={v}")).collect();
    digest_seed(&format!("cell|{master}|{}|{rep}", key.join(";")))
}

/// Synthetic-workload seed of a repetition, shared by all cells.
pub fn workload_seed(master: u64, rep: usize) -> u64 {
    digest_seed(&format!("workload|{master}|{rep}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(xs: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            n += 1;
            sum += x;
            min = min.min(x);
            max = max.max(x);
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            mean: sum / n as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub reps: usize,
    pub idle: Stat,
    pub total_layers: Stat,
    pub ler: Stat,
    pub utilization: Stat,
    pub terminated: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub extra_axes: Vec<&'static str>,
    pub cells: Vec<CellSummary>,
}

/// Runs every cell × repetition on `workers` threads (all cores when `None`).
pub fn run_sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<SweepOutput, SweepError> {
    spec.base.validate()?;
    let cells = spec.cells();
    let reps = spec.repetitions.max(1);
    let total = cells.len() * reps;
    if total > spec.max_runs {
        return Err(SweepError::TooLarge(total, spec.max_runs));
    }
    let workloads: Vec<Arc<Workload>> = if spec.base.workload.path.is_some() || spec.base.workload.seed.is_some() {
        vec![Arc::new(spec.base.load_workload()?); reps]
    } else {
        (0..reps)
            .map(|r| {
                let mut b = spec.base.clone();
                b.workload.seed = Some(workload_seed(spec.master_seed, r));
                b.load_workload().map(Arc::new)
            })
            .collect::<Result<_, _>>()?
    };
    for cell in &cells {
        cell.apply(&spec.base).validate()?;
    }

    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let exec = |&(c, r): &(usize, usize)| -> Result<SimResult, SweepError> {
        let cell = &cells[c];
        let mut cfg = cell.apply(&spec.base).sim_config();
        cfg.seed = cell_seed(spec.master_seed, &cell.coords(), r);
        cfg.event_log = false;
        run(&workloads[r], &cfg).map_err(|source| SweepError::Run {
            cell: cell.label(),
            source,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| SweepError::Pool(e.to_string()))?;
    let results: Vec<SimResult> = pool.install(|| jobs.par_iter().map(exec).collect::<Result<_, _>>())?;

    let summaries = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let rs = &results[c * reps..(c + 1) * reps];
            CellSummary {
                cell: *cell,
                reps,
                idle: Stat::of(rs.iter().map(|r| r.idle_layers_inserted as f64)),
                total_layers: Stat::of(rs.iter().map(|r| r.total_layers as f64)),
                ler: Stat::of(rs.iter().map(|r| r.metrics.aggregated_ler)),
                utilization: Stat::of(rs.iter().map(|r| r.metrics.mean_utilization)),
                terminated: rs.iter().filter(|r| r.terminated_early).count(),
            }
        })
        .collect();
    Ok(SweepOutput {
        extra_axes: spec.extra_axes(),
        cells: summaries,
    })
}

fn coord_values(cell: &Cell, extra: &[&str]) -> Vec<String> {
    let coords = cell.coords();
    let get = |name: &str| coords.iter().find(|(k, _)| *k == name).map(|(_, v)| v.clone()).unwrap_or_default();
    let mut v = vec![get("M"), get("speed")];
    v.extend(extra.iter().map(|n| get(n)));
    v
}

impl SweepOutput {
    pub fn long_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["M", "speed"];
        header.extend(&self.extra_axes);
        header.extend([
            "scheduler",
            "reps",
            "idle_mean",
            "idle_min",
            "idle_max",
            "total_layers_mean",
            "ler_mean",
            "ler_min",
            "ler_max",
            "util_mean",
            "util_min",
            "util_max",
            "terminated",
        ]);
        let _ = writeln!(out, "{}", header.join(","));
        for s in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{},{},{:.4},{:.6e},{:.6e},{:.6e},{:.6},{:.6},{:.6},{}",
                coord_values(&s.cell, &self.extra_axes).join(","),
                s.cell.scheduler,
                s.reps,
                s.idle.mean,
                s.idle.min,
                s.idle.max,
                s.total_layers.mean,
                s.ler.mean,
                s.ler.min,
                s.ler.max,
                s.utilization.mean,
                s.utilization.min,
                s.utilization.max,
                s.terminated
            );
        }
        out
    }

    /// Best scheduler per cell: fewest mean idle layers, then higher mean
    /// utilization, then scheduler name.
    pub fn winners(&self) -> Vec<&CellSummary> {
        let mut groups: Vec<(Vec<String>, &CellSummary)> = Vec::new();
        for s in &self.cells {
            let key = coord_values(&s.cell, &self.extra_axes);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, best)) => {
                    if beats(s, best) {
                        *best = s;
                    }
                }
                None => groups.push((key, s)),
            }
        }
        groups.into_iter().map(|(_, s)| s).collect()
    }

    pub fn winner_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["M", "speed"];
        header.extend(&self.extra_axes);
        header.extend(["winner", "idle_mean", "util_mean"]);
        let _ = writeln!(out, "{}", header.join(","));
        for s in self.winners() {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.6}",
                coord_values(&s.cell, &self.extra_axes).join(","),
                s.cell.scheduler,
                s.idle.mean,
                s.utilization.mean
            );
        }
        out
    }

    /// Matrix CSVs (rows M, columns speed): mean idle layers per scheduler
    /// and the winner map, one file per combination of the other axes.
    pub fn pivots(&self) -> Vec<(String, String)> {
        let mut idle: BTreeMap<String, Vec<&CellSummary>> = BTreeMap::new();
        for s in &self.cells {
            let name = format!("pivot_idle_{}{}.csv", s.cell.scheduler, self.suffix(&s.cell));
            idle.entry(name).or_default().push(s);
        }
        let mut winner: BTreeMap<String, Vec<&CellSummary>> = BTreeMap::new();
        for s in self.winners() {
            winner.entry(format!("pivot_winner{}.csv", self.suffix(&s.cell))).or_default().push(s);
        }
        let mut out: Vec<(String, String)> = idle
            .into_iter()
            .map(|(n, v)| (n, matrix(&v, |s| format!("{:.4}", s.idle.mean))))
            .collect();
        out.extend(winner.into_iter().map(|(n, v)| (n, matrix(&v, |s| s.cell.scheduler.to_string()))));
        out
    }

    fn suffix(&self, cell: &Cell) -> String {
        cell.coords()
            .into_iter()
            .filter(|(k, _)| self.extra_axes.contains(k))
            .map(|(k, v)| format!("_{k}={v}"))
            .collect()
    }

    /// Writes `sweep.csv`, `winners.csv` and optionally the pivot files.
    pub fn write(&self, dir: &Path, pivot: bool) -> std::io::Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut files = vec![
            ("sweep.csv".to_string(), self.long_csv()),
            ("winners.csv".to_string(), self.winner_csv()),
        ];
        if pivot {
            files.extend(self.pivots());
        }
        for (name, body) in &files {
            fs::write(dir.join(name), body)?;
        }
        Ok(files.into_iter().map(|(n, _)| n).collect())
    }
}

fn beats(a: &CellSummary, b: &CellSummary) -> bool {
    a.idle
        .mean
        .total_cmp(&b.idle.mean)
        .then(b.utilization.mean.total_cmp(&a.utilization.mean))
        .then(a.cell.scheduler.as_str().cmp(b.cell.scheduler.as_str()))
        .is_lt()
}

fn matrix(cells: &[&CellSummary], value: impl Fn(&CellSummary) -> String) -> String {
    let mut ms: Vec<usize> = cells.iter().map(|s| s.cell.m).collect();
    ms.dedup();
    let mut speeds: Vec<f64> = Vec::new();
    for s in cells {
        if !speeds.contains(&s.cell.speed) {
            speeds.push(s.cell.speed);
        }
    }
    let mut out = String::from("M");
    for sp in &speeds {
        let _ = write!(out, ",{sp}");
    }
    out.push('\n');
    for &m in &ms {
        let _ = write!(out, "{m}");
        for &sp in &speeds {
            let v = cells
                .iter()
                .find(|s| s.cell.m == m && s.cell.speed == sp)
                .map_or(String::new(), |s| value(s));
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
