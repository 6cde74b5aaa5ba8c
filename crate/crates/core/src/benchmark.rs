//! Ablation sweep on the blob benchmark: every configuration generates one
//! video per seed for the same trajectories, and each video is scored by blob
//! detection against its boxes.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::dataset::BlobSpec;
use crate::error::{Error, Result, ResultExt};
use crate::eval::{score_video, summarize, DetectConfig, EvalReport, VideoScore};
use crate::sampler::{generate, Conditioning, Denoiser, GuidanceConfig};
use crate::schedule::NoiseSchedule;

const CASE_STREAM: u64 = 0xb10b;

/// Trajectory and identity used for one seed, shared by every configuration.
#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub seed: u64,
    pub identity: usize,
    pub cond: Conditioning,
}

impl BenchmarkCase {
    pub fn new(spec: &BlobSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CASE_STREAM);
        let trajectory = spec.sample_trajectory(&mut rng);
        let identity = rng.random_range(0..spec.identities);
        Ok(Self {
            seed,
            identity,
            cond: Conditioning {
                prompt: spec.prompt(Some(identity))?,
                trajectory,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub config: GuidanceConfig,
}

impl NamedConfig {
    pub fn new(name: &str, config: GuidanceConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

pub const NAIVE: &str = "naive";
pub const MASKNORM: &str = "masknorm";
pub const MASKNORM_ID: &str = "masknorm_id";
pub const MASKNORM_TID: &str = "masknorm_tid";
pub const MASKNORM_TID_GRAD_NORM: &str = "masknorm_tid_gradnorm";

/// The ablation ladder at the shipped defaults, plus the unit-norm
/// gradient variant.
pub fn standard_configs() -> Vec<NamedConfig> {
    vec![
        NamedConfig::new(
            NAIVE,
            GuidanceConfig {
                mask_norm: false,
                ..GuidanceConfig::plain()
            },
        ),
        NamedConfig::new(MASKNORM, GuidanceConfig::plain()),
        NamedConfig::new(MASKNORM_ID, GuidanceConfig::id()),
        NamedConfig::new(MASKNORM_TID, GuidanceConfig::tid()),
        NamedConfig::new(MASKNORM_TID_GRAD_NORM, GuidanceConfig::tid().with_grad_norm()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub seed: u64,
    pub identity: usize,
    pub score: VideoScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: String,
    pub settings: GuidanceConfig,
    pub report: EvalReport,
}

impl ConfigSummary {
    /// mIoU with "no detections" counted as 0.
    pub fn miou(&self) -> f64 {
        self.report.miou.unwrap_or(0.0)
    }

    pub fn coverage(&self) -> f64 {
        self.report.coverage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<ConfigSummary>,
}

impl SweepResults {
    pub fn summary(&self, config: &str) -> Option<&ConfigSummary> {
        self.summaries.iter().find(|s| s.config == config)
    }

    /// One row per (config, seed).
    pub fn csv(&self) -> String {
        let mut out = String::from("config,seed,identity,detected_frames,frames,covered,miou\n");
        for r in &self.rows {
            let miou = r.score.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{miou}",
                r.config, r.seed, r.identity, r.score.detected_frames, r.score.frames, r.score.covered
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Runs every (config, seed) pair in parallel. Rows come back ordered by
/// config, then seed.
pub fn run_sweep(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    spec: &BlobSpec,
    configs: &[NamedConfig],
    seeds: &[u64],
    detect: &DetectConfig,
) -> Result<SweepResults> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one config and one seed".into()));
    }
    let cases = seeds.iter().map(|&s| BenchmarkCase::new(spec, s)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&NamedConfig, &BenchmarkCase)> = configs.iter().flat_map(|c| cases.iter().map(move |k| (c, k))).collect();
    let rows = jobs
        .par_iter()
        .map(|(nc, case)| {
            let config = nc.config.with_seed(case.seed);
            let z = generate(denoiser, &case.cond, &config, schedule, spec.latent_shape())
                .context_with(|| format!("sweep {} seed {}", nc.name, case.seed))?;
            Ok(SweepRow {
                config: nc.name.clone(),
                seed: case.seed,
                identity: case.identity,
                score: score_video(&z, &case.cond.trajectory, detect)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = configs
        .iter()
        .map(|nc| ConfigSummary {
            config: nc.name.clone(),
            settings: nc.config,
            report: summarize(rows.iter().filter(|r| r.config == nc.name).map(|r| r.score.clone()).collect()),
        })
        .collect();
    Ok(SweepResults { rows, summaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Miou,
    Coverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub metric: Metric,
    pub lhs: String,
    pub relation: Relation,
    pub rhs: String,
    pub lhs_value: f64,
    pub rhs_value: f64,
    pub holds: bool,
}

/// Which expected orderings held; serialized as the deviation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub seeds: usize,
    pub checks: Vec<OrderingCheck>,
    pub deviations: Vec<String>,
}

impl DeviationReport {
    pub fn all_hold(&self) -> bool {
        self.deviations.is_empty()
    }
}

/// Checks `masknorm_tid` against `masknorm_id` and `naive`.
pub fn check_orderings(results: &SweepResults) -> Result<DeviationReport> {
    let get = |name: &str| {
        results
            .summary(name)
            .ok_or_else(|| Error::Config(format!("sweep has no `{name}` config")))
    };
    let expected = [
        (Metric::Miou, MASKNORM_TID, Relation::Greater, MASKNORM_ID),
        (Metric::Miou, MASKNORM_TID, Relation::Greater, NAIVE),
        (Metric::Coverage, MASKNORM_TID, Relation::AtLeast, NAIVE),
    ];
    let mut checks = Vec::new();
    let mut deviations = Vec::new();
    for (metric, lhs, relation, rhs) in expected {
        let value = |s: &ConfigSummary| match metric {
            Metric::Miou => s.miou(),
            Metric::Coverage => s.coverage(),
        };
        let (a, b) = (value(get(lhs)?), value(get(rhs)?));
        let holds = match relation {
            Relation::Greater => a > b,
            Relation::AtLeast => a >= b,
        };
        let check = OrderingCheck {
            metric,
            lhs: lhs.into(),
            relation,
            rhs: rhs.into(),
            lhs_value: a,
            rhs_value: b,
            holds,
        };
        if !holds {
            deviations.push(format!("expected {metric:?}({lhs}) {relation:?} {metric:?}({rhs}), got {a:.4} vs {b:.4}"));
        }
        checks.push(check);
    }
    let seeds = results.summaries.first().map_or(0, |s| s.report.videos);
    Ok(DeviationReport { seeds, checks, deviations })
}
