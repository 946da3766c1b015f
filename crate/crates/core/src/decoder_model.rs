//! Decoder pool bookkeeping, the power-law decode latency and lognormal jitter.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::SliceId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("decoder {decoder} is busy until {busy_until} (requested start {start})")]
    Busy { decoder: usize, busy_until: f64, start: f64 },
    #[error("decoder index {0} out of range")]
    NoSuchDecoder(usize),
    #[error("task must finish after it starts ({start} >= {finish})")]
    EmptyInterval { start: f64, finish: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderPool {
    speeds: Vec<f64>,
    busy_until: Vec<f64>,
}

impl DecoderPool {
    /// Homogeneous pool of `m` decoders at relative speed `speed`.
    pub fn new(m: usize, speed: f64) -> Self {
        Self::with_speeds(vec![speed; m])
    }

    pub fn with_speeds(speeds: Vec<f64>) -> Self {
        assert!(!speeds.is_empty(), "pool needs at least one decoder");
        assert!(speeds.iter().all(|&r| r > 0.0), "decoder speeds must be positive");
        let busy_until = vec![0.0; speeds.len()];
        Self { speeds, busy_until }
    }

    pub fn size(&self) -> usize {
        self.speeds.len()
    }

    pub fn speed(&self, i: usize) -> f64 {
        self.speeds[i]
    }

    pub fn busy_until(&self) -> &[f64] {
        &self.busy_until
    }

    pub fn is_free(&self, i: usize, t: f64) -> bool {
        self.busy_until[i] <= t
    }

    pub fn num_free(&self, t: f64) -> usize {
        self.busy_until.iter().filter(|&&b| b <= t).count()
    }

    /// Free decoders at `t`, fastest first, ties by index.
    pub fn free_decoders(&self, t: f64) -> Vec<usize> {
        let mut free: Vec<usize> = (0..self.size()).filter(|&i| self.is_free(i, t)).collect();
        free.sort_by(|&a, &b| self.speeds[b].total_cmp(&self.speeds[a]).then(a.cmp(&b)));
        free
    }

    /// Earliest instant at which some decoder is free.
    pub fn earliest_free(&self) -> f64 {
        self.busy_until.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn assign(&mut self, i: usize, start: f64, finish: f64) -> Result<(), PoolError> {
        let busy = *self.busy_until.get(i).ok_or(PoolError::NoSuchDecoder(i))?;
        if busy > start {
            return Err(PoolError::Busy {
                decoder: i,
                busy_until: busy,
                start,
            });
        }
        if finish <= start {
            return Err(PoolError::EmptyInterval { start, finish });
        }
        self.busy_until[i] = finish;
        Ok(())
    }

    /// Frees a decoder early (cancelled work).
    pub fn release(&mut self, i: usize, t: f64) {
        self.busy_until[i] = self.busy_until[i].min(t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub alpha: f64,
    pub d: u32,
    pub buffer_b: u32,
}

pub const DEFAULT_ALPHA: f64 = 1.17;

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            d: 7,
            buffer_b: 3,
        }
    }
}

impl LatencyModel {
    pub fn new(alpha: f64, d: u32, buffer_b: u32) -> Self {
        Self { alpha, d, buffer_b }
    }

    pub fn buffer_ratio(&self) -> f64 {
        f64::from(self.buffer_b) / f64::from(self.d)
    }

    /// Relative window volume of a slice with `deg` unresolved neighbours.
    pub fn volume(&self, deg: u32) -> f64 {
        1.0 + f64::from(deg) * self.buffer_ratio()
    }

    pub fn duration_for_volume(&self, volume: f64, speed: f64) -> f64 {
        volume.powf(self.alpha) / speed
    }
}

pub fn decode_duration(deg: u32, lm: &LatencyModel, speed: f64) -> f64 {
    lm.duration_for_volume(lm.volume(deg), speed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterModel {
    pub enabled: bool,
    pub sigma_base: f64,
    pub alpha_d: f64,
    pub alpha_p: f64,
    pub p_ref: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p_phys: f64,
    /// Fixed σ bypassing the calibrated fit.
    pub sigma: Option<f64>,
}

impl Default for JitterModel {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma_base: 0.3447,
            alpha_d: 0.0041,
            alpha_p: 15.03,
            p_ref: 1e-3,
            sigma_min: 0.30,
            sigma_max: 0.70,
            p_phys: 1e-3,
            sigma: None,
        }
    }
}

impl JitterModel {
    /// σ in effect for a run at distance `d`; zero when disabled.
    pub fn effective_sigma(&self, d: u32) -> f64 {
        if !self.enabled {
            0.0
        } else {
            self.sigma.unwrap_or_else(|| sigma(d, self.p_phys, self))
        }
    }
}

/// Calibrated lognormal spread, clamped to `[sigma_min, sigma_max]`.
pub fn sigma(d: u32, p: f64, jm: &JitterModel) -> f64 {
    let raw = jm.sigma_base + jm.alpha_d * (f64::from(d) / 5.0).log2() + jm.alpha_p * (p - jm.p_ref);
    raw.clamp(jm.sigma_min, jm.sigma_max)
}

/// Mean-one lognormal factor `exp(-σ²/2 + σz)`.
pub fn sample_jitter_factor<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    (-0.5 * sigma * sigma + sigma * z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Steady,
    Emergency,
    Backfill,
    Speculative,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Steady => "steady",
            TaskKind::Emergency => "emergency",
            TaskKind::Backfill => "backfill",
            TaskKind::Speculative => "speculative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTask {
    /// One slice, or a whole block for the monolithic baselines.
    pub slices: Vec<SliceId>,
    pub decoder: usize,
    pub t_start: f64,
    pub t_finish: f64,
    pub kind: TaskKind,
}
