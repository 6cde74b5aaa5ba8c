//! Activation variance across the reverse loop, with and without masks.
//!
//! Each configuration is generated from the same seed. Right before every DDIM
//! step the chosen attention block is evaluated on the current latent (with
//! the masks that are active at that step) and the variance over all of its
//! output entries is recorded.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::toy::{ToyDenoiser, ToyLayer};
use crate::error::{Error, Result, ResultExt};
use crate::sampler::{generate_with_observer, AttentionControl, Conditioning, GuidanceConfig, SamplerObserver};
use crate::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceConfig {
    /// No masks, no inner steps.
    Baseline,
    /// Masks without normalization, no inner steps.
    Masked,
    /// Masks with normalization, no inner steps.
    Masknorm,
    /// Masks with normalization and the inner loop of the given config.
    MasknormTid,
}

impl TraceConfig {
    pub const ALL: [Self; 4] = [Self::Baseline, Self::Masked, Self::Masknorm, Self::MasknormTid];

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Masked => "masked",
            Self::Masknorm => "masknorm",
            Self::MasknormTid => "masknorm_tid",
        }
    }

    /// Sampler settings for this trace; seed, `omega`, frozen steps and the
    /// TID coefficients come from `base`.
    pub fn guidance(self, base: &GuidanceConfig) -> GuidanceConfig {
        let plain = GuidanceConfig {
            inner_steps: 0,
            cg: 0.0,
            ..*base
        };
        match self {
            Self::Baseline => GuidanceConfig { masks: false, ..plain },
            Self::Masked => GuidanceConfig {
                masks: true,
                mask_norm: false,
                ..plain
            },
            Self::Masknorm => GuidanceConfig {
                masks: true,
                mask_norm: true,
                ..plain
            },
            Self::MasknormTid => GuidanceConfig {
                masks: true,
                mask_norm: true,
                ..*base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTrace {
    pub config: TraceConfig,
    /// Timestep of each entry; entry 0 is the noisiest step.
    pub timesteps: Vec<usize>,
    pub variance: Vec<f64>,
}

impl VarianceTrace {
    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }
}

/// Population variance over every entry.
pub fn activation_variance<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for &v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n == 0 {
        0.0
    } else {
        m2 / n as f64
    }
}

struct Probe<'a> {
    model: &'a ToyDenoiser,
    layer: ToyLayer,
    cond: &'a Conditioning,
    timesteps: Vec<usize>,
    variance: Vec<f64>,
}

impl SamplerObserver for Probe<'_> {
    fn before_ddim(&mut self, t: usize, z: &LatentVideo, control: Option<&AttentionControl>) -> Result<()> {
        let act = self.model.collect_activations(self.layer, z, t, Some(self.cond), control)?;
        self.timesteps.push(t);
        self.variance.push(activation_variance(act.iter()));
        Ok(())
    }
}

/// One generation under `config`, recording the variance of `layer`.
pub fn trace_variance(
    model: &ToyDenoiser,
    cond: &Conditioning,
    config: &GuidanceConfig,
    label: TraceConfig,
    layer: ToyLayer,
) -> Result<(VarianceTrace, LatentVideo)> {
    let mut probe = Probe {
        model,
        layer,
        cond,
        timesteps: Vec::new(),
        variance: Vec::new(),
    };
    let z = generate_with_observer(model, cond, config, model.schedule(), model.config.latent_shape(), &mut probe)
        .context_with(|| format!("variance study, {} run", label.label()))?;
    let trace = VarianceTrace {
        config: label,
        timesteps: probe.timesteps,
        variance: probe.variance,
    };
    Ok((trace, z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudy {
    pub layer: ToyLayer,
    pub seed: u64,
    /// One trace per [`TraceConfig`], baseline first.
    pub traces: Vec<VarianceTrace>,
}

impl VarianceStudy {
    pub fn trace(&self, config: TraceConfig) -> Option<&VarianceTrace> {
        self.traces.iter().find(|t| t.config == config)
    }

    pub fn baseline(&self) -> &VarianceTrace {
        self.trace(TraceConfig::Baseline).expect("study always holds a baseline trace")
    }

    /// Mean of the per-step squared error against the baseline.
    pub fn mean_mse(&self, config: TraceConfig) -> Result<f64> {
        let trace = self
            .trace(config)
            .ok_or_else(|| Error::Config(format!("study has no `{}` trace", config.label())))?;
        Ok(variance_mse(trace, self.baseline())?.mean())
    }
}

/// Runs every configuration from the seed in `config`, in parallel.
pub fn run_variance_study(model: &ToyDenoiser, cond: &Conditioning, config: &GuidanceConfig, layer: ToyLayer) -> Result<VarianceStudy> {
    config.validate()?;
    let traces = TraceConfig::ALL
        .par_iter()
        .map(|&c| trace_variance(model, cond, &c.guidance(config), c, layer).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    Ok(VarianceStudy {
        layer,
        seed: config.seed,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub per_step: Vec<f64>,
    /// Mean of `per_step[..=i]`.
    pub running_mean: Vec<f64>,
}

impl MseCurve {
    pub fn mean(&self) -> f64 {
        self.running_mean.last().copied().unwrap_or(0.0)
    }
}

pub fn variance_mse(trace: &VarianceTrace, baseline: &VarianceTrace) -> Result<MseCurve> {
    if trace.len() != baseline.len() {
        return Err(Error::shape("variance trace length", baseline.len(), trace.len()));
    }
    let per_step: Vec<f64> = trace.variance.iter().zip(&baseline.variance).map(|(a, b)| (a - b).powi(2)).collect();
    let mut sum = 0.0;
    let running_mean = per_step
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect();
    Ok(MseCurve { per_step, running_mean })
}

/// Rows `step,config,variance,mse_vs_baseline`, step counted from the noisiest.
pub fn study_csv(study: &VarianceStudy) -> Result<String> {
    let mut out = String::from("step,config,variance,mse_vs_baseline\n");
    for trace in &study.traces {
        let mse = variance_mse(trace, study.baseline())?;
        for (i, (v, e)) in trace.variance.iter().zip(&mse.per_step).enumerate() {
            writeln!(out, "{i},{},{v:.9e},{e:.9e}", trace.config.label()).expect("writing to a String");
        }
    }
    Ok(out)
}

/// Plot script for the CSV written by [`write_study`].
pub fn gnuplot_script(csv_name: &str) -> String {
    let mut s = String::from("set datafile separator ','\nset key outside\nset multiplot layout 2,1\n");
    for (col, title) in [(3, "variance"), (4, "squared error vs baseline")] {
        writeln!(s, "set title '{title}'\nset xlabel 'step'").expect("writing to a String");
        let plots: Vec<String> = TraceConfig::ALL
            .iter()
            .map(|c| format!("'{csv_name}' using ($2 eq '{0}' ? $1 : 1/0):{col} with lines title '{0}'", c.label()))
            .collect();
        writeln!(s, "plot {}", plots.join(", \\\n     ")).expect("writing to a String");
    }
    s.push_str("unset multiplot\n");
    s
}

/// Writes `path` and a `.gp` script next to it.
pub fn write_study(study: &VarianceStudy, path: &Path) -> Result<()> {
    fs::write(path, study_csv(study)?).context_with(|| format!("writing {}", path.display()))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let gp = path.with_extension("gp");
    fs::write(&gp, gnuplot_script(&name)).context_with(|| format!("writing {}", gp.display()))?;
    Ok(())
}
