//! Run configuration shared by the CLI flags and JSON config files.
//!
//! Every field is optional so a file (or the command line) only needs to name
//! what it changes. Layers are merged with [`RunConfig::merge`], later layers
//! winning, and resolved against the mode defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ResultExt};
use crate::sampler::{GuidanceConfig, SamplingMode, GRAD_NORM_CG};
use crate::schedule::ScheduleParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub mode: Option<SamplingMode>,
    pub gamma: Option<f64>,
    pub inner_steps: Option<usize>,
    pub cg: Option<f64>,
    pub omega: Option<f64>,
    pub frozen_steps: Option<usize>,
    pub grad_norm: Option<bool>,
    pub masks: Option<bool>,
    pub mask_norm: Option<bool>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

macro_rules! merge_fields {
    ($base:expr, $over:expr, $($f:ident),*) => {
        RunConfig { $($f: $over.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).context_with(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).context_with(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        merge_fields!(
            self, over, mode, gamma, inner_steps, cg, omega, frozen_steps, grad_norm, masks, mask_norm, seed, steps, beta_start,
            beta_end
        )
    }

    /// Mode defaults (TID when unset) with the explicit fields applied.
    /// Turning on `grad_norm` without an explicit `cg` selects the scale
    /// paired with unit-norm gradients.
    pub fn guidance(&self) -> Result<GuidanceConfig> {
        let base = GuidanceConfig::for_mode(self.mode.unwrap_or(SamplingMode::Tid));
        let grad_norm = self.grad_norm.unwrap_or(base.grad_norm);
        let default_cg = if grad_norm && base.cg > 0.0 { GRAD_NORM_CG } else { base.cg };
        let g = GuidanceConfig {
            gamma: self.gamma.unwrap_or(base.gamma),
            inner_steps: self.inner_steps.unwrap_or(base.inner_steps),
            cg: self.cg.unwrap_or(default_cg),
            omega: self.omega.unwrap_or(base.omega),
            frozen_steps: self.frozen_steps.unwrap_or(base.frozen_steps),
            grad_norm,
            seed: self.seed.unwrap_or(base.seed),
            masks: self.masks.unwrap_or(base.masks),
            mask_norm: self.mask_norm.unwrap_or(base.mask_norm),
            ..base
        };
        g.validate()?;
        Ok(g)
    }

    /// Schedule with unset fields taken from `base`.
    pub fn schedule(&self, base: ScheduleParams) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps.unwrap_or(base.steps),
            beta_start: self.beta_start.unwrap_or(base.beta_start),
            beta_end: self.beta_end.unwrap_or(base.beta_end),
        }
    }

    /// Every field filled in from the mode defaults and `schedule`.
    pub fn resolved(&self, schedule: ScheduleParams) -> Result<RunConfig> {
        let g = self.guidance()?;
        let s = self.schedule(schedule);
        Ok(RunConfig {
            mode: Some(self.mode.unwrap_or(SamplingMode::Tid)),
            gamma: Some(g.gamma),
            inner_steps: Some(g.inner_steps),
            cg: Some(g.cg),
            omega: Some(g.omega),
            frozen_steps: Some(g.frozen_steps),
            grad_norm: Some(g.grad_norm),
            masks: Some(g.masks),
            mask_norm: Some(g.mask_norm),
            seed: Some(g.seed),
            steps: Some(s.steps),
            beta_start: Some(s.beta_start),
            beta_end: Some(s.beta_end),
        })
    }
}
