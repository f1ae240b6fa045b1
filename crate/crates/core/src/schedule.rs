//! DDPM noise schedule: per-step β tables and the cumulative signal factor ᾱ.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Configuration that fully determines a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Discrete β/α/ᾱ tables, indexed by step.
///
/// `betas[i]` and `alphas[i]` describe step `i + 1`; `alpha_bars[k]` is the
/// running product ∏ α over the first k steps, with `alpha_bars[0] = 1`.
/// All tables are computed and stored in double precision.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Build the linear schedule: β interpolated from `beta_start` to `beta_end`
/// inclusive over `num_steps` steps.
pub fn make_linear_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::InvalidConfig(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(Error::InvalidConfig(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if num_steps == 1 {
        vec![beta_start]
    } else {
        (0..num_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0f64;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            num_steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_linear_schedule(cfg.num_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of steps T.
    pub fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    /// β for step k (1-based, k in 1..=T).
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// α = 1 − β for step k (1-based).
    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative ᾱ after k steps; ᾱ_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k > self.num_steps() {
            return Err(Error::StepOutOfRange {
                step: k,
                max: self.num_steps(),
            });
        }
        Ok(())
    }
}

/// A continuous noise level t in [0, 1]; maps to the step index round(t·T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeFraction(f64);

impl TimeFraction {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "time fraction must lie in [0, 1], got {t}"
            )));
        }
        Ok(TimeFraction(t))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Map a time fraction to its step index: k = round(t·T), clamped to [0, T].
pub fn fraction_to_step(t: TimeFraction, schedule: &NoiseSchedule) -> usize {
    let steps = schedule.num_steps() as f64;
    ((t.value() * steps).round() as usize).min(schedule.num_steps())
}
