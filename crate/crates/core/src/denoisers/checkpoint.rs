//! Toy model checkpoints: raw little-endian `f32` weights plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::toy::{ToyConfig, ToyDenoiser, ToyParams};
use crate::error::{Error, Result, ResultExt};
use crate::schedule::ScheduleParams;

pub const FORMAT: &str = "traj-diffuse-toy/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ToyConfig,
    pub schedule: ScheduleParams,
    pub schedule_hash: String,
    /// Layers in the order they appear in the weight file.
    pub layers: Vec<LayerEntry>,
}

/// `model.bin` -> `model.json`.
pub fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save(model: &ToyDenoiser, weights: &Path) -> Result<()> {
    let params = &model.params;
    let mut bytes = Vec::with_capacity(params.count() * 4);
    let mut layers = Vec::new();
    for (name, t) in ToyParams::NAMES.iter().zip(params.tensors()) {
        for v in t.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        layers.push(LayerEntry {
            name: (*name).to_string(),
            shape: [t.nrows(), t.ncols()],
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config,
        schedule: model.schedule().params(),
        schedule_hash: model.schedule().hash(),
        layers,
    };
    fs::write(weights, bytes).context_with(|| format!("writing {}", weights.display()))?;
    let mpath = manifest_path(weights);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).context_with(|| format!("writing {}", mpath.display()))?;
    Ok(())
}

pub fn load(weights: &Path) -> Result<ToyDenoiser> {
    let mpath = manifest_path(weights);
    let text = fs::read_to_string(&mpath).context_with(|| format!("reading {}", mpath.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).context_with(|| format!("parsing {}", mpath.display()))?;
    if manifest.format != FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format `{}`", manifest.format)));
    }
    let schedule = manifest.schedule.build()?;
    if schedule.hash() != manifest.schedule_hash {
        return Err(Error::Config(format!(
            "checkpoint schedule hash {} does not match its schedule parameters ({})",
            manifest.schedule_hash,
            schedule.hash()
        )));
    }
    let names: Vec<&str> = manifest.layers.iter().map(|l| l.name.as_str()).collect();
    if names != ToyParams::NAMES {
        return Err(Error::Config("checkpoint layer order does not match this build".into()));
    }
    let bytes = fs::read(weights).context_with(|| format!("reading {}", weights.display()))?;
    let expected: usize = manifest.layers.iter().map(|l| l.shape[0] * l.shape[1]).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::shape("checkpoint size", expected * 4, bytes.len()));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let tensors = manifest
        .layers
        .iter()
        .map(|l| Array2::from_shape_simple_fn((l.shape[0], l.shape[1]), || values.next().expect("size checked")))
        .collect();
    let params = ToyParams::from_tensors(&manifest.config, tensors)?;
    ToyDenoiser::from_params(manifest.config, &schedule, params)
}

/// Validates the manifest against an expected schedule without loading weights.
pub fn check_schedule(weights: &Path, expected: &ScheduleParams) -> Result<()> {
    let text = fs::read_to_string(manifest_path(weights))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let hash = expected.build()?.hash();
    if manifest.schedule_hash != hash {
        return Err(Error::Config(format!(
            "checkpoint was trained with schedule {} but {} was requested",
            manifest.schedule_hash, hash
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;

    #[test]
    fn round_trip_within_f32_precision() {
        let cfg = ToyConfig {
            frames: 2,
            height: 4,
            width: 4,
            hidden: 4,
            time_dim: 4,
            ..ToyConfig::default()
        };
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let model = ToyDenoiser::new(cfg, &s, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.schedule().hash(), s.hash());
        for (a, b) in model.params.tensors().iter().zip(loaded.params.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
        check_schedule(&path, &s.params()).unwrap();
        assert!(check_schedule(&path, &ScheduleParams::default()).is_err());

        std::fs::write(&path, [0u8; 12]).unwrap();
        assert!(matches!(load(&path), Err(Error::Shape { .. })));
    }
}
