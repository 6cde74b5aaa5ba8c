//! Noise-prediction training for [`ToyDenoiser`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::BlobDataset;
use super::toy::{ToyConfig, ToyDenoiser, ToyParams};
use crate::error::{Error, Result};
use crate::sampler::standard_normal;
use crate::schedule::NoiseSchedule;
use crate::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate decays linearly to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    /// Probability of replacing the prompt with the null prompt.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 3e-3,
            final_lr_fraction: 0.1,
            cond_dropout: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

struct Adam {
    m: ToyParams,
    v: ToyParams,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &ToyConfig) -> Self {
        Self {
            m: ToyParams::zeros(cfg),
            v: ToyParams::zeros(cfg),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ToyParams, grads: &ToyParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

/// One noised training example.
struct Example {
    video: usize,
    t: usize,
    drop_prompt: bool,
    noise_seed: u64,
}

fn noised(x0: &LatentVideo, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<(LatentVideo, LatentVideo)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(x0.dim(), &mut rng);
    let ab = schedule.alpha_bar(t)?;
    let z = x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
    Ok((z, eps))
}

fn example_grad(model: &ToyDenoiser, data: &BlobDataset, ex: &Example) -> Result<(f64, ToyParams)> {
    let video = &data.videos[ex.video];
    let (z, eps) = noised(&video.latent, ex.t, model.schedule(), ex.noise_seed)?;
    let prompt = if ex.drop_prompt {
        model.prompt_tokens(None)?
    } else {
        data.spec.prompt(video.identity)?.tokens
    };
    let fwd = model.forward(&z, ex.t, prompt.view(), None, true, None)?;
    let diff = &fwd.noise - &eps;
    let loss = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
    let dout = diff * (2.0 / fwd.noise.len() as f64);
    let mut grads = ToyParams::zeros(&model.config);
    model.backward(fwd.tape.as_ref().expect("tape requested"), &dout, &mut grads);
    Ok((loss, grads))
}

/// Regresses the injected noise at uniformly drawn timesteps. No attention
/// masks are ever used. Deterministic for a fixed config.
pub fn train_toy_denoiser(model: &mut ToyDenoiser, data: &BlobDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    if data.spec.latent_shape() != model.config.latent_shape() {
        return Err(Error::shape(
            "dataset latent",
            format!("{:?}", model.config.latent_shape()),
            format!("{:?}", data.spec.latent_shape()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = model.schedule().len();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches_per_epoch).max(1);
    let mut adam = Adam::new(&model.config);
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let iteration = epoch * batches_per_epoch + b;
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&video| Example {
                    video,
                    t: rng.random_range(0..steps),
                    drop_prompt: rng.random_bool(cfg.cond_dropout),
                    noise_seed: rng.random(),
                })
                .collect();
            let results: Vec<(f64, ToyParams)> = batch
                .par_iter()
                .map(|ex| example_grad(model, data, ex))
                .collect::<Result<_>>()?;
            let mut grads = ToyParams::zeros(&model.config);
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g);
            }
            let k = 1.0 / results.len() as f64;
            loss *= k;
            grads.scale(k);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Training { iteration, loss });
            }
            let frac = iteration as f64 / total as f64;
            let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
            adam.update(&mut model.params, &grads, lr);
            losses.push(loss);
            if iteration % 100 == 0 {
                log::debug!("iteration {iteration}/{total}: loss {loss:.5}");
            }
        }
    }
    let tail = losses.len().min(batches_per_epoch.max(10));
    let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    log::info!("trained {} iterations, final loss {final_loss:.5}", losses.len());
    Ok(TrainReport { losses, final_loss })
}

/// Builds and trains a fresh model.
pub fn train_new(
    data: &BlobDataset,
    schedule: &NoiseSchedule,
    config: ToyConfig,
    train: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    let mut model = ToyDenoiser::new(config, schedule, train.seed ^ 0x1417)?;
    let report = train_toy_denoiser(&mut model, data, train)?;
    Ok((model, report))
}

/// Mean squared noise-prediction error over `samples` freshly noised examples.
pub fn noise_mse(model: &ToyDenoiser, data: &BlobDataset, samples: usize, seed: u64) -> Result<f64> {
    if data.is_empty() || samples == 0 {
        return Err(Error::Config("noise_mse needs data and at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = model.schedule().len();
    let examples: Vec<Example> = (0..samples)
        .map(|i| Example {
            video: i % data.len(),
            t: rng.random_range(0..steps),
            drop_prompt: false,
            noise_seed: rng.random(),
        })
        .collect();
    let errs = examples
        .par_iter()
        .map(|ex| {
            let video = &data.videos[ex.video];
            let (z, eps) = noised(&video.latent, ex.t, model.schedule(), ex.noise_seed)?;
            let prompt = data.spec.prompt(video.identity)?.tokens;
            let out = model.forward(&z, ex.t, prompt.view(), None, false, None)?.noise;
            Ok((&out - &eps).mapv(|v| v * v).mean().unwrap_or(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::dataset::BlobSpec;

    fn tiny() -> (BlobDataset, NoiseSchedule, ToyConfig) {
        let spec = BlobSpec {
            frames: 3,
            height: 8,
            width: 8,
            min_size: 3,
            max_size: 4,
            ..BlobSpec::default()
        };
        let cfg = ToyConfig {
            frames: 3,
            height: 8,
            width: 8,
            hidden: 8,
            time_dim: 8,
            ..ToyConfig::default()
        };
        let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        (BlobDataset::generate(spec, 1, 5).unwrap(), s, cfg)
    }

    #[test]
    fn loss_decreases_on_a_single_sample() {
        let (data, s, cfg) = tiny();
        let mut model = ToyDenoiser::new(cfg, &s, 1).unwrap();
        let ex = Example {
            video: 0,
            t: 10,
            drop_prompt: false,
            noise_seed: 3,
        };
        let mut adam = Adam::new(&cfg);
        let mut losses = Vec::new();
        for _ in 0..5 {
            let (loss, grads) = example_grad(&model, &data, &ex).unwrap();
            losses.push(loss);
            adam.update(&mut model.params, &grads, 1e-3);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (data, s, cfg) = tiny();
        let train = TrainConfig {
            epochs: 3,
            batch_size: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, ra) = train_new(&data, &s, cfg, &train).unwrap();
        let (b, rb) = train_new(&data, &s, cfg, &train).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        assert_eq!(ra.losses.len(), 3);
    }

    #[test]
    fn rejects_empty_data() {
        let (mut data, s, cfg) = tiny();
        data.videos.clear();
        let mut model = ToyDenoiser::new(cfg, &s, 1).unwrap();
        assert!(matches!(train_toy_denoiser(&mut model, &data, &TrainConfig::default()), Err(Error::Config(_))));
    }
}
