//! Discrete diffusion noise schedules.
//!
//! A [`NoiseSchedule`] stores the per-step `beta_t`, `alpha_t = 1 - beta_t`
//! and the cumulative `alpha_bar_t = prod_{s <= t} alpha_s` for `t = 1..=T`,
//! with `alpha_bar_0 = 1`. Samplers run on a [`SamplingGrid`], a uniformly
//! strided subset of `N` timesteps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Length `T + 1`; index 0 holds `alpha_bar_0 = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`, both endpoints included.
    /// With `T = 1` the single beta is `beta_start`.
    pub fn build_linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::Schedule("beta endpoints must be finite".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + span * (i as f64) / last)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas; every beta must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::Schedule(format!(
                "beta[{i}] = {b} is outside (0, 1)"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().expect("seeded with alpha_bar_0");
            alpha_bars.push(prev * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Assembles a schedule without any validation. Used to inject corrupted
    /// schedules into the invariant checks.
    #[doc(hidden)]
    pub fn from_parts_unchecked(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative products indexed `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index: t,
                max: self.num_steps(),
            })
    }

    /// Checks the schedule invariants: `alpha_bar_0 = 1`, entries in (0, 1],
    /// strict decrease, and the running-product identity to relative 1e-12.
    pub fn verify(&self) -> Result<()> {
        let t_max = self.betas.len();
        if self.alphas.len() != t_max || self.alpha_bars.len() != t_max + 1 {
            return Err(Error::Schedule("inconsistent array lengths".into()));
        }
        if self.alpha_bars[0] != 1.0 {
            return Err(Error::Schedule("alpha_bar_0 must equal 1".into()));
        }
        for t in 1..=t_max {
            let (prev, cur) = (self.alpha_bars[t - 1], self.alpha_bars[t]);
            if !(cur > 0.0 && cur <= 1.0) {
                return Err(Error::Schedule(format!(
                    "alpha_bar[{t}] = {cur} outside (0, 1]"
                )));
            }
            if cur >= prev {
                return Err(Error::Schedule(format!(
                    "alpha_bar not strictly decreasing at t = {t}"
                )));
            }
            let expected = prev * self.alphas[t - 1];
            if ((cur - expected) / expected).abs() > 1e-12 {
                return Err(Error::Schedule(format!(
                    "running-product identity broken at t = {t}"
                )));
            }
            if (self.alphas[t - 1] - (1.0 - self.betas[t - 1])).abs() > 1e-15 {
                return Err(Error::Schedule(format!("alpha[{t}] != 1 - beta[{t}]")));
            }
        }
        Ok(())
    }
}

/// Parameters of the default linear schedule and its sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub num_steps: usize,
    /// Sampler step count; when present it must agree with `sampler.steps`.
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub sampler_steps: Option<usize>,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            sampler_steps: None,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build_linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// `N` sampler steps strided over a `T`-step schedule. Step `i` maps to
/// diffusion timestep `round(i * T / N)`; step 0 is the clean end.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    timesteps: Vec<usize>,
    alpha_bars: Vec<f64>,
}

impl SamplingGrid {
    pub fn new(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        let t_max = schedule.num_steps();
        if steps == 0 || steps > t_max {
            return Err(Error::Schedule(format!(
                "sampler steps must lie in 1..={t_max}, got {steps}"
            )));
        }
        // round-half-up of i*T/N in integer arithmetic
        let timesteps: Vec<usize> = (0..=steps)
            .map(|i| (2 * i * t_max + steps) / (2 * steps))
            .collect();
        let alpha_bars = timesteps
            .iter()
            .map(|&t| schedule.alpha_bar(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            timesteps,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// Diffusion timestep of sampler step `i` (0..=N).
    pub fn timestep(&self, i: usize) -> usize {
        self.timesteps[i]
    }

    /// `alpha_bar` at sampler step `i` (0..=N); step 0 gives 1.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i]
    }
}
