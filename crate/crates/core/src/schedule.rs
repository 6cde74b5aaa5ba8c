//! Diffusion noise schedule and the per-step coefficients derived from it.
//!
//! Timesteps are zero-based: `t = 0` is the least noisy step and `t = T - 1`
//! the noisiest. The sampler walks `t` from `T - 1` down to `0`; the DDIM step
//! out of `t = 0` targets the clean sample (`alpha_bar = 1`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    /// Short schedule used by the toy denoiser: 50 steps, final alpha_bar around 0.02.
    pub fn toy() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.15,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas between `beta_start` and `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas_with_params(
            betas,
            ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
        )
    }

    /// Schedule from an explicit beta table.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let params = ScheduleParams {
            steps: betas.len(),
            beta_start: betas.first().copied().unwrap_or(0.0),
            beta_end: betas.last().copied().unwrap_or(0.0),
        };
        Self::from_betas_with_params(betas, params)
    }

    fn from_betas_with_params(betas: Vec<f64>, params: ScheduleParams) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |prod, a| {
                *prod *= a;
                Some(*prod)
            })
            .collect();
        if alpha_bars.last().is_some_and(|&a| a <= 0.0) {
            return Err(Error::Numeric("alpha_bar underflowed to zero".into()));
        }
        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
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

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Index {
            what: "timestep",
            index: t,
            len: self.len(),
        })
    }

    /// `alpha_bar` of the step the DDIM update out of `t` lands on; 1 below `t = 0`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.alpha_bar(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// Stable identifier of the beta table, stored alongside model checkpoints.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"linear-beta-schedule");
        for b in &self.betas {
            hasher.update(b.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Drift and noise coefficients of one intrinsic-denoising update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TidCoefficients {
    pub eta_l: f64,
    pub eta_k: f64,
    pub gamma: f64,
}

pub fn tid_coefficients(schedule: &NoiseSchedule, t: usize, gamma: f64) -> Result<TidCoefficients> {
    let alpha_bar = schedule.alpha_bar(t)?;
    coefficients_for(alpha_bar, gamma)
}

/// Coefficients for an explicit `alpha_bar`, mostly useful at the `alpha_bar = 1` endpoint.
pub fn coefficients_for(alpha_bar: f64, gamma: f64) -> Result<TidCoefficients> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let noise_var = 1.0 - alpha_bar;
    Ok(TidCoefficients {
        eta_l: gamma * noise_var,
        eta_k: (gamma * (2.0 - gamma)).sqrt() * noise_var.sqrt(),
        gamma,
    })
}
