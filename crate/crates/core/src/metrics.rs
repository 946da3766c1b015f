//! Run metrics: aggregated logical error rate, utilization, wall-clock
//! estimate and the per-run CSV row.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::timeline::Timeline;
use crate::workload::OpKind;

/// Per patch-layer logical error probabilities.
///
/// Keys are `IDLE`, `ROTATE`, `MERGE` or `MERGE<k>` for a k-patch merge; the
/// most specific key wins and `default` covers everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LerTable {
    pub default: f64,
    #[serde(default)]
    pub entries: BTreeMap<String, f64>,
}

impl Default for LerTable {
    fn default() -> Self {
        Self::uniform(1e-3)
    }
}

impl LerTable {
    pub fn uniform(p: f64) -> Self {
        Self {
            default: p,
            entries: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, p: f64) -> Self {
        self.entries.insert(key.to_string(), p);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |p: f64| (0.0..1.0).contains(&p);
        if !ok(self.default) {
            return Err(format!("ler default {} outside [0, 1)", self.default));
        }
        for (k, &p) in &self.entries {
            if !ok(p) {
                return Err(format!("ler entry {k} = {p} outside [0, 1)"));
            }
            let valid = matches!(k.as_str(), "IDLE" | "ROTATE" | "MERGE")
                || k.strip_prefix("MERGE").is_some_and(|n| n.parse::<usize>().is_ok_and(|n| n >= 2));
            if !valid {
                return Err(format!("unknown ler key `{k}`"));
            }
        }
        Ok(())
    }

    pub fn probability(&self, op: OpKind, patches: usize) -> f64 {
        let specific = match op {
            OpKind::Merge => self.entries.get(&format!("MERGE{patches}")),
            _ => None,
        };
        specific
            .or_else(|| self.entries.get(op.as_str()))
            .copied()
            .unwrap_or(self.default)
    }
}

/// `1 - Π(1 - p)` over the cells of the first `executed_layers` layers.
pub fn aggregate_ler(tl: &Timeline, executed_layers: usize, table: &LerTable) -> f64 {
    // Neumaier summation of ln(1 - p)
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for t in 0..executed_layers.min(tl.n_layers()) {
        for &s in tl.layer(t) {
            let slice = tl.slice(s);
            let x = (-table.probability(slice.op, slice.group_size)).ln_1p();
            let next = sum + x;
            comp += if sum.abs() >= x.abs() { (sum - next) + x } else { (x - next) + sum };
            sum = next;
        }
    }
    ler_from_log_survival(sum + comp)
}

pub fn ler_from_log_survival(log_survival: f64) -> f64 {
    -log_survival.exp_m1()
}

/// Step function of busy decoders: each point holds until the next one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UtilizationTrace {
    points: Vec<(f64, u32)>,
}

impl UtilizationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(f64, u32)>) -> Self {
        Self { points }
    }

    /// Records the number of active decoders from time `t` on.
    pub fn record(&mut self, t: f64, active: u32) {
        match self.points.last_mut() {
            Some(last) if last.0 == t => last.1 = active,
            Some(last) if last.1 == active => {}
            _ => self.points.push((t, active)),
        }
    }

    pub fn points(&self) -> &[(f64, u32)] {
        &self.points
    }

    pub fn peak(&self) -> u32 {
        self.points.iter().map(|p| p.1).max().unwrap_or(0)
    }
}

/// Time-weighted mean of `active / m` over `[0, end]`.
pub fn utilization(trace: &UtilizationTrace, m: usize, end: f64) -> f64 {
    if end <= 0.0 || m == 0 {
        return 0.0;
    }
    let pts = trace.points();
    let mut area = 0.0;
    for (i, &(t, active)) in pts.iter().enumerate() {
        let next = pts.get(i + 1).map_or(end, |p| p.0).min(end);
        if next > t {
            area += f64::from(active) * (next - t);
        }
    }
    (area / (m as f64 * end)).clamp(0.0, 1.0)
}

/// `total_layers * d * t_meas`, in the unit of `t_meas`.
pub fn wall_clock(total_layers: usize, d: u32, t_meas: f64) -> f64 {
    total_layers as f64 * f64::from(d) * t_meas
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub idle_layers: usize,
    pub total_layers: usize,
    pub aggregated_ler: f64,
    pub mean_utilization: f64,
    pub peak_decoders_used: u32,
    pub wall_clock_estimate: f64,
}

pub const METRICS_CSV_HEADER: &str = "run_id,scheduler,M,speed,idle_layers,total_layers,ler,utilization,terminated";

/// One metrics CSV line (no trailing newline).
#[allow(clippy::too_many_arguments)]
pub fn metrics_csv_row(
    run_id: &str,
    scheduler: &str,
    m: usize,
    speed: f64,
    metrics: &Metrics,
    terminated: bool,
) -> String {
    let mut row = String::new();
    let _ = write!(
        row,
        "{run_id},{scheduler},{m},{speed},{},{},{:.6e},{:.6},{terminated}",
        metrics.idle_layers, metrics.total_layers, metrics.aggregated_ler, metrics.mean_utilization
    );
    row
}
