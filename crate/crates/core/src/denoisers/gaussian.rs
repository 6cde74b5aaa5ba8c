//! Gaussian video law with a closed-form optimal denoiser.
//!
//! Every `(channel, row, col)` position carries an independent frame sequence
//! with mean `mean[:, c, y, x]` and AR(1) covariance `s2 * r^|i - j|`.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::masks::BoxTrajectory;
use crate::sampler::{AttentionControl, Conditioning, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::LatentVideo;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVideoModel {
    mean: LatentVideo,
    r: f64,
    s2: f64,
}

impl GaussianVideoModel {
    /// `s2 = 0` is accepted and gives a point mass at `mean`.
    pub fn new(mean: LatentVideo, r: f64, s2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("frame correlation must lie in [0, 1), got {r}")));
        }
        if !(s2 >= 0.0 && s2.is_finite()) {
            return Err(Error::Config(format!("marginal variance must be finite and >= 0, got {s2}")));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model mean".into()));
        }
        if mean.dim().0 == 0 {
            return Err(Error::shape("Gaussian model frames", ">= 1", 0));
        }
        Ok(Self { mean, r, s2 })
    }

    /// Mean `fg` inside each frame's box (channel 0 only) and `bg` elsewhere.
    pub fn box_mean(traj: &BoxTrajectory, shape: (usize, usize, usize, usize), fg: f64, bg: f64) -> Result<LatentVideo> {
        traj.validate()?;
        let (n, _, h, w) = shape;
        if traj.frames != n {
            return Err(Error::shape("box mean frames", n, traj.frames));
        }
        let mut mean = LatentVideo::from_elem(shape, bg);
        for (i, b) in traj.to_grid(h, w).into_iter().enumerate() {
            for y in b.r0..b.r1 {
                for x in b.c0..b.c1 {
                    mean[[i, 0, y, x]] = fg;
                }
            }
        }
        Ok(mean)
    }

    pub fn mean(&self) -> &LatentVideo {
        &self.mean
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.mean.dim()
    }

    /// `frames x frames` covariance shared by every position.
    pub fn frame_covariance(&self) -> DMatrix<f64> {
        let n = self.mean.dim().0;
        DMatrix::from_fn(n, n, |i, j| self.s2 * self.r.powi(i.abs_diff(j) as i32))
    }

    /// `E[x0 | z_t] = mu + sqrt(a) S (a S + (1 - a) I)^-1 (z - sqrt(a) mu)` as the
    /// matrix `S (a S + (1 - a) I)^-1`.
    pub fn posterior_gain(&self, alpha_bar: f64) -> Result<DMatrix<f64>> {
        let n = self.mean.dim().0;
        let sigma = self.frame_covariance();
        let a = &sigma * alpha_bar + DMatrix::identity(n, n) * (1.0 - alpha_bar);
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("marginal covariance at alpha_bar={alpha_bar} is not positive definite")))?;
        // S A^-1 = (A^-1 S)^T because both are symmetric
        Ok(chol.solve(&sigma).transpose())
    }

    pub fn posterior_mean(&self, z: &LatentVideo, alpha_bar: f64) -> Result<LatentVideo> {
        self.check(z)?;
        let gain = to_ndarray(&self.posterior_gain(alpha_bar)?);
        let sa = alpha_bar.sqrt();
        let centered = z - &(&self.mean * sa);
        let mut out = apply_frames(gain.view(), &centered) * sa;
        out += &self.mean;
        Ok(out)
    }

    fn check(&self, z: &LatentVideo) -> Result<()> {
        if z.dim() != self.mean.dim() {
            return Err(Error::shape("Gaussian model latent", format!("{:?}", self.mean.dim()), format!("{:?}", z.dim())));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentVideo {
        let (n, c, h, w) = self.mean.dim();
        let s = self.s2.sqrt();
        let innov = s * (1.0 - self.r * self.r).sqrt();
        let mut x = LatentVideo::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for col in 0..w {
                        let e: f64 = rng.sample(StandardNormal);
                        x[[i, ch, y, col]] = if i == 0 { s * e } else { self.r * x[[i - 1, ch, y, col]] + innov * e };
                    }
                }
            }
        }
        x + &self.mean
    }
}

fn to_ndarray(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Applies a `frames x frames` matrix to every position's frame sequence.
fn apply_frames(m: ArrayView2<'_, f64>, z: &LatentVideo) -> LatentVideo {
    let (n, c, h, w) = z.dim();
    let flat = z
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .expect("standard layout reshape");
    m.dot(&flat)
        .into_shape_with_order((n, c, h, w))
        .expect("standard layout reshape")
}

/// Per-timestep linear maps from `z - sqrt(a) mu` to the optimal noise.
#[derive(Debug, Clone)]
struct NoiseOperators {
    model: GaussianVideoModel,
    ops: Vec<Array2<f64>>,
}

impl NoiseOperators {
    fn new(model: GaussianVideoModel, schedule: &NoiseSchedule) -> Result<Self> {
        let n = model.shape().0;
        let ops = schedule
            .alpha_bars()
            .iter()
            .map(|&ab| {
                // eps = (z - sqrt(a) E[x0|z]) / sqrt(1 - a) = (I - a K) (z - sqrt(a) mu) / sqrt(1 - a)
                let k = model.posterior_gain(ab)?;
                let b = (DMatrix::identity(n, n) - k * ab) / (1.0 - ab).sqrt();
                Ok(to_ndarray(&b))
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, ops })
    }

    fn centered(&self, z: &LatentVideo, ab: f64) -> LatentVideo {
        z - &(self.model.mean() * ab.sqrt())
    }
}

/// Optimal noise predictor for a [`GaussianVideoModel`], optionally with a
/// separate law for unconditional calls.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    schedule: NoiseSchedule,
    conditional: NoiseOperators,
    unconditional: Option<NoiseOperators>,
}

impl GaussianDenoiser {
    pub fn new(model: GaussianVideoModel, schedule: &NoiseSchedule) -> Result<Self> {
        Ok(Self {
            schedule: schedule.clone(),
            conditional: NoiseOperators::new(model, schedule)?,
            unconditional: None,
        })
    }

    /// Law used when no conditioning is given; defaults to the conditional one.
    pub fn with_unconditional(mut self, model: GaussianVideoModel) -> Result<Self> {
        if model.shape() != self.conditional.model.shape() {
            return Err(Error::shape(
                "unconditional model",
                format!("{:?}", self.conditional.model.shape()),
                format!("{:?}", model.shape()),
            ));
        }
        self.unconditional = Some(NoiseOperators::new(model, &self.schedule)?);
        Ok(self)
    }

    pub fn model(&self) -> &GaussianVideoModel {
        &self.conditional.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn operators(&self, cond: Option<&Conditioning>) -> &NoiseOperators {
        match (cond, &self.unconditional) {
            (None, Some(u)) => u,
            _ => &self.conditional,
        }
    }
}

/// `eps* = (z - sqrt(a) E[x0 | z]) / sqrt(1 - a)` under the model's marginal at `t`.
pub fn gaussian_predict_noise(model: &GaussianVideoModel, z: &LatentVideo, t: usize, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    let ab = schedule.alpha_bar(t)?;
    let x0 = model.posterior_mean(z, ab)?;
    let sa = ab.sqrt();
    let inv = 1.0 / (1.0 - ab).sqrt();
    Ok((z - &(x0 * sa)) * inv)
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(&self, z: &LatentVideo, t: usize, cond: Option<&Conditioning>, _control: Option<&AttentionControl>) -> Result<LatentVideo> {
        let ops = self.operators(cond);
        ops.model.check(z)?;
        let ab = self.schedule.alpha_bar(t)?;
        Ok(apply_frames(ops.ops[t].view(), &ops.centered(z, ab)))
    }

    fn noise_vjp(
        &self,
        z: &LatentVideo,
        t: usize,
        cond: Option<&Conditioning>,
        _control: Option<&AttentionControl>,
        v: &LatentVideo,
    ) -> Result<LatentVideo> {
        let ops = self.operators(cond);
        ops.model.check(z)?;
        ops.model.check(v)?;
        self.schedule.alpha_bar(t)?;
        Ok(apply_frames(ops.ops[t].t(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::score_from_noise;
    use crate::sampler::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-3, 0.2).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, r: f64, s2: f64) -> GaussianVideoModel {
        let mean = standard_normal((4, 2, 3, 3), rng);
        GaussianVideoModel::new(mean, r, s2).unwrap()
    }

    #[test]
    fn independent_model_posterior_mean_is_scalar_shrinkage() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GaussianVideoModel::new(LatentVideo::zeros((3, 1, 2, 2)), 0.0, 0.7).unwrap();
        let z = standard_normal((3, 1, 2, 2), &mut rng);
        for t in [0, 7, 19] {
            let ab = s.alpha_bars()[t];
            let x0 = model.posterior_mean(&z, ab).unwrap();
            let k = 0.7 * ab.sqrt() / (ab * 0.7 + 1.0 - ab);
            for (a, b) in x0.iter().zip(z.iter()) {
                assert!((a - k * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_at_the_mean_vanishes() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 0.6, 0.5);
        let d = GaussianDenoiser::new(model.clone(), &s).unwrap();
        let z = model.mean() * s.alpha_bars()[0].sqrt();
        let eps = d.predict_noise(&z, 0, None, None).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 0.8, 1.3);
        let d = GaussianDenoiser::new(model.clone(), &s).unwrap();
        let z = standard_normal(model.shape(), &mut rng);
        for t in [0, 5, 19] {
            let ab = s.alpha_bars()[t];
            let score = score_from_noise(&d.predict_noise(&z, t, None, None).unwrap(), t, &s).unwrap();
            // -(a S + (1 - a) I)^-1 (z - sqrt(a) mu), by explicit inverse
            let n = 4;
            let cov = DMatrix::from_fn(n, n, |i, j| ab * 1.3 * 0.8f64.powi(i.abs_diff(j) as i32) + if i == j { 1.0 - ab } else { 0.0 });
            let prec = cov.try_inverse().unwrap();
            let (_, c, h, w) = model.shape();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = nalgebra::DVector::from_fn(n, |i, _| z[[i, ch, y, x]] - ab.sqrt() * model.mean()[[i, ch, y, x]]);
                        let g = -(&prec * v);
                        for i in 0..n {
                            assert!((score[[i, ch, y, x]] - g[i]).abs() < 1e-6);
                        }
                    }
                }
            }
            let direct = gaussian_predict_noise(&model, &z, t, &s).unwrap();
            let fast = d.predict_noise(&z, t, None, None).unwrap();
            for (a, b) in direct.iter().zip(fast.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 0.5, 0.9);
        let d = GaussianDenoiser::new(model.clone(), &s).unwrap();
        let z = standard_normal(model.shape(), &mut rng);
        let v = standard_normal(model.shape(), &mut rng);
        let t = 9;
        let vjp = d.noise_vjp(&z, t, None, None, &v).unwrap();
        let f = |z: &LatentVideo| (d.predict_noise(z, t, None, None).unwrap() * &v).sum();
        let h = 1e-5;
        for idx in [[0, 0, 0, 0], [3, 1, 2, 2], [1, 0, 2, 1]] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - vjp[idx]).abs() < 1e-6, "{fd} vs {}", vjp[idx]);
        }
    }

    #[test]
    fn sampler_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = GaussianVideoModel::new(LatentVideo::zeros((2, 1, 100, 100)), 0.6, 2.0).unwrap();
        let x = model.sample(&mut rng);
        let (a, b) = (x.index_axis(ndarray::Axis(0), 0), x.index_axis(ndarray::Axis(0), 1));
        let var = a.iter().map(|v| v * v).sum::<f64>() / 1e4;
        let cov = a.iter().zip(b.iter()).map(|(p, q)| p * q).sum::<f64>() / 1e4;
        assert!((var - 2.0).abs() < 0.1);
        assert!((cov / 2.0 - 0.6).abs() < 0.05);
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = LatentVideo::zeros((2, 1, 1, 1));
        assert!(GaussianVideoModel::new(m.clone(), 1.0, 1.0).is_err());
        assert!(GaussianVideoModel::new(m.clone(), 0.5, -1.0).is_err());
        let d = GaussianDenoiser::new(GaussianVideoModel::new(m, 0.5, 0.0).unwrap(), &schedule()).unwrap();
        assert!(d.predict_noise(&LatentVideo::zeros((3, 1, 1, 1)), 0, None, None).is_err());
        assert!(d.predict_noise(&LatentVideo::zeros((2, 1, 1, 1)), 20, None, None).is_err());
    }
}
