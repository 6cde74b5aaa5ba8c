//! Diffusion sampling with temporal intrinsic denoising (TID).
//!
//! Before every DDIM step the latent is refined `inner_steps` times by
//!
//! ```text
//! z <- z + eta_l * (c_g * grad tau(b, z0_hat) + score) + eta_k * noise
//! ```
//!
//! where `score` comes from the classifier-free-guided noise prediction and
//! `z0_hat` is the one-shot Tweedie estimate of the clean latent. With
//! `c_g = 0` this is plain intrinsic denoising (ID); with `inner_steps = 0`
//! it is ordinary DDIM sampling.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::error::{Error, Result, ResultExt};
use crate::masks::{masks_active, AttentionMaskSet, BoxTrajectory, TokenMask};
use crate::schedule::{tid_coefficients, NoiseSchedule};
use crate::temporal_prior::{TauEval, TemporalPrior};
use crate::LatentVideo;

/// Synthetic prompt: a short sequence of token embeddings, some of which name the subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Array2<f64>,
    pub subject: TokenMask,
}

impl PromptEmbedding {
    /// One-hot identity plus one-hot position. Token 0 is the subject token;
    /// the remaining tokens only carry their position.
    pub fn for_identity(identity: usize, identities: usize, prompt_len: usize) -> Result<Self> {
        if identity >= identities {
            return Err(Error::Index {
                what: "identity",
                index: identity,
                len: identities,
            });
        }
        Self::build(Some(identity), identities, prompt_len)
    }

    /// Prompt describing a scene without a subject: the subject token carries
    /// only its position.
    pub fn empty(identities: usize, prompt_len: usize) -> Result<Self> {
        Self::build(None, identities, prompt_len)
    }

    fn build(identity: Option<usize>, identities: usize, prompt_len: usize) -> Result<Self> {
        if prompt_len < 2 {
            return Err(Error::Config("prompt needs a subject token and at least one context token".into()));
        }
        let mut tokens = Array2::zeros((prompt_len, identities + prompt_len));
        if let Some(id) = identity {
            tokens[[0, id]] = 1.0;
        }
        for p in 0..prompt_len {
            tokens[[p, identities + p]] = 1.0;
        }
        let mut subject = vec![0u8; prompt_len];
        subject[0] = 1;
        Ok(Self {
            tokens,
            subject: TokenMask::new(subject)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct Conditioning {
    pub prompt: PromptEmbedding,
    pub trajectory: BoxTrajectory,
}

/// Masks handed to a denoiser's attention layers for one call.
#[derive(Debug, Clone)]
pub struct AttentionControl {
    pub masks: AttentionMaskSet,
    pub mode: MaskMode,
    /// Rank-match masked outputs onto unmasked ones before the residual add.
    pub normalize: bool,
}

/// Noise predictor `eps_theta(z, t | y, b)`.
pub trait Denoiser: Sync {
    fn predict_noise(
        &self,
        z: &LatentVideo,
        t: usize,
        cond: Option<&Conditioning>,
        control: Option<&AttentionControl>,
    ) -> Result<LatentVideo>;

    /// Token grid of the attention layers, if the denoiser has any.
    fn attention_grid(&self) -> Option<(usize, usize)> {
        None
    }

    /// `J^T v` where `J` is the Jacobian of `predict_noise` with respect to `z`.
    fn noise_vjp(
        &self,
        _z: &LatentVideo,
        _t: usize,
        _cond: Option<&Conditioning>,
        _control: Option<&AttentionControl>,
        _v: &LatentVideo,
    ) -> Result<LatentVideo> {
        Err(Error::Config("denoiser does not provide noise Jacobians".into()))
    }
}

/// How the guidance gradient treats the noise prediction inside the Tweedie estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceGradient {
    /// Treat the predicted noise as a constant: `grad_z tau(z0_hat) = grad tau / sqrt(alpha_bar)`.
    #[default]
    StopGradient,
    /// Differentiate through the denoiser (requires [`Denoiser::noise_vjp`]).
    ExactVjp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Plain,
    Id,
    Tid,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "id" => Ok(Self::Id),
            "tid" => Ok(Self::Tid),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_INNER_STEPS: usize = 2;
pub const DEFAULT_TID_CG: f64 = 10000.0;
pub const DEFAULT_OMEGA: f64 = 9.0;
pub const DEFAULT_FROZEN_STEPS: usize = 4;
/// Guidance scale paired with unit-norm gradients.
pub const GRAD_NORM_CG: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub inner_steps: usize,
    pub cg: f64,
    pub omega: f64,
    pub frozen_steps: usize,
    pub grad_norm: bool,
    pub seed: u64,
    /// Apply trajectory masks during the frozen steps.
    pub masks: bool,
    pub mask_mode: MaskMode,
    pub mask_norm: bool,
    pub gradient: GuidanceGradient,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::tid()
    }
}

impl GuidanceConfig {
    /// Mask normalization with temporal intrinsic denoising.
    pub fn tid() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            inner_steps: DEFAULT_INNER_STEPS,
            cg: DEFAULT_TID_CG,
            omega: DEFAULT_OMEGA,
            frozen_steps: DEFAULT_FROZEN_STEPS,
            grad_norm: false,
            seed: 0,
            masks: true,
            mask_mode: MaskMode::Additive,
            mask_norm: true,
            gradient: GuidanceGradient::StopGradient,
        }
    }

    /// Intrinsic denoising without the temporal prior.
    pub fn id() -> Self {
        Self { cg: 0.0, ..Self::tid() }
    }

    /// Masked DDIM sampling with no inner loop.
    pub fn plain() -> Self {
        Self {
            inner_steps: 0,
            cg: 0.0,
            ..Self::tid()
        }
    }

    pub fn for_mode(mode: SamplingMode) -> Self {
        match mode {
            SamplingMode::Plain => Self::plain(),
            SamplingMode::Id => Self::id(),
            SamplingMode::Tid => Self::tid(),
        }
    }

    /// Unit-L2 guidance gradients with their matching scale.
    pub fn with_grad_norm(self) -> Self {
        Self {
            grad_norm: true,
            cg: GRAD_NORM_CG,
            ..self
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.cg >= 0.0 && self.cg.is_finite()) {
            return Err(Error::Config(format!("c_g must be finite and >= 0, got {}", self.cg)));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        Ok(())
    }
}

fn check_finite(x: &LatentVideo, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// `(1 + omega) * eps(z | y, b) - omega * eps(z)`. Masks only reach the conditional call.
pub fn cfg_noise(
    denoiser: &dyn Denoiser,
    z: &LatentVideo,
    t: usize,
    cond: Option<&Conditioning>,
    control: Option<&AttentionControl>,
    omega: f64,
) -> Result<LatentVideo> {
    if !(omega >= 0.0) {
        return Err(Error::Config(format!("omega must be >= 0, got {omega}")));
    }
    let conditional = denoiser.predict_noise(z, t, cond, control)?;
    check_finite(&conditional, "conditional noise prediction")?;
    if conditional.dim() != z.dim() {
        return Err(Error::shape("noise prediction", format!("{:?}", z.dim()), format!("{:?}", conditional.dim())));
    }
    if omega == 0.0 {
        return Ok(conditional);
    }
    let unconditional = denoiser.predict_noise(z, t, None, None)?;
    check_finite(&unconditional, "unconditional noise prediction")?;
    let mut out = conditional;
    Zip::from(&mut out)
        .and(&unconditional)
        .for_each(|c, &u| *c = (1.0 + omega) * *c - omega * u);
    Ok(out)
}

/// One-shot clean estimate `(z - sqrt(1 - a) eps) / sqrt(a)` with `a = alpha_bar[t]`.
pub fn tweedie_estimate(z: &LatentVideo, t: usize, eps_hat: &LatentVideo, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar[{t}] = 0, clean estimate undefined")));
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z.clone();
    Zip::from(&mut out).and(eps_hat).for_each(|x, &e| *x = (*x - sn * e) / sa);
    Ok(out)
}

/// Score of the noisy marginal from a noise prediction: `-eps / sqrt(1 - alpha_bar[t])`.
pub fn score_from_noise(eps_hat: &LatentVideo, t: usize, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    let ab = schedule.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::Numeric(format!("alpha_bar[{t}] = 1, noise-based score undefined")));
    }
    let inv = 1.0 / (1.0 - ab).sqrt();
    Ok(eps_hat.mapv(|e| -e * inv))
}

/// Everything a single inner update needs besides the latent itself.
pub struct InnerStepContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a GuidanceConfig,
    pub cond: &'a Conditioning,
    pub control: Option<&'a AttentionControl>,
    pub prior: Option<&'a TemporalPrior>,
}

#[derive(Debug, Clone)]
pub struct InnerStepOutput {
    pub z: LatentVideo,
    /// Temporal prior evaluated on the clean estimate, when guidance is on.
    pub tau: Option<TauEval>,
}

/// Guidance gradient `grad_z tau(z0_hat(z))` and the prior's value at `z0_hat`.
pub fn guidance_gradient(
    ctx: &InnerStepContext<'_>,
    z: &LatentVideo,
    t: usize,
    eps_hat: &LatentVideo,
) -> Result<(TauEval, LatentVideo)> {
    let prior = ctx
        .prior
        .ok_or_else(|| Error::Config("temporal guidance requested without a temporal prior".into()))?;
    let ab = ctx.schedule.alpha_bar(t)?;
    let z0 = tweedie_estimate(z, t, eps_hat, ctx.schedule)?;
    let (eval, g0) = prior.gradient(&z0)?;
    let inv_sa = 1.0 / ab.sqrt();
    let grad = match ctx.config.gradient {
        GuidanceGradient::StopGradient => g0.mapv(|g| g * inv_sa),
        GuidanceGradient::ExactVjp => {
            // d z0_hat / dz = (I - sqrt(1 - a) d eps_hat / dz) / sqrt(a)
            let omega = ctx.config.omega;
            let mut jt = ctx
                .denoiser
                .noise_vjp(z, t, Some(ctx.cond), ctx.control, &g0)?
                .mapv(|v| v * (1.0 + omega));
            if omega != 0.0 {
                let ju = ctx.denoiser.noise_vjp(z, t, None, None, &g0)?;
                Zip::from(&mut jt).and(&ju).for_each(|a, &b| *a -= omega * b);
            }
            let sn = (1.0 - ab).sqrt();
            let mut out = g0;
            Zip::from(&mut out).and(&jt).for_each(|g, &j| *g = (*g - sn * j) * inv_sa);
            out
        }
    };
    Ok((eval, grad))
}

/// One intrinsic-denoising update with explicit injected noise.
pub fn tid_inner_step_with_noise(
    ctx: &InnerStepContext<'_>,
    z: &LatentVideo,
    t: usize,
    noise: &LatentVideo,
) -> Result<InnerStepOutput> {
    let config = ctx.config;
    let coeffs = tid_coefficients(ctx.schedule, t, config.gamma)?;
    let eps_hat = cfg_noise(ctx.denoiser, z, t, Some(ctx.cond), ctx.control, config.omega)?;
    let mut drift = score_from_noise(&eps_hat, t, ctx.schedule)?;
    let mut tau = None;
    if config.cg != 0.0 {
        let (eval, mut grad) = guidance_gradient(ctx, z, t, &eps_hat)?;
        if config.grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > 0.0 {
                grad.mapv_inplace(|g| g / norm);
            }
        }
        Zip::from(&mut drift).and(&grad).for_each(|d, &g| *d += config.cg * g);
        tau = Some(eval);
    }
    let mut out = z.clone();
    Zip::from(&mut out)
        .and(&drift)
        .and(noise)
        .for_each(|x, &d, &e| *x += coeffs.eta_l * d + coeffs.eta_k * e);
    check_finite(&out, "intrinsic denoising update")?;
    Ok(InnerStepOutput { z: out, tau })
}

pub fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize, usize, usize), rng: &mut R) -> LatentVideo {
    LatentVideo::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// One intrinsic-denoising update with fresh Gaussian noise from `rng`.
pub fn tid_inner_step<R: Rng + ?Sized>(
    ctx: &InnerStepContext<'_>,
    z: &LatentVideo,
    t: usize,
    rng: &mut R,
) -> Result<InnerStepOutput> {
    let noise = standard_normal(z.dim(), rng);
    tid_inner_step_with_noise(ctx, z, t, &noise)
}

/// Deterministic DDIM update from `t` to the next less noisy step (the clean
/// sample when `t = 0`).
pub fn ddim_step(
    denoiser: &dyn Denoiser,
    z: &LatentVideo,
    t: usize,
    cond: Option<&Conditioning>,
    control: Option<&AttentionControl>,
    schedule: &NoiseSchedule,
    omega: f64,
) -> Result<LatentVideo> {
    let eps_hat = cfg_noise(denoiser, z, t, cond, control, omega)?;
    ddim_update(z, t, &eps_hat, schedule)
}

/// DDIM update given the noise prediction at `t`.
pub fn ddim_update(z: &LatentVideo, t: usize, eps_hat: &LatentVideo, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    let z0 = tweedie_estimate(z, t, eps_hat, schedule)?;
    let ab_prev = schedule.alpha_bar_prev(t)?;
    let (sa, sn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let mut out = z0;
    Zip::from(&mut out).and(eps_hat).for_each(|x, &e| *x = sa * *x + sn * e);
    check_finite(&out, "DDIM update")?;
    Ok(out)
}

/// Hooks into the sampling loop, used for diagnostics.
pub trait SamplerObserver {
    fn inner_step(&mut self, _t: usize, _m: usize, _tau: Option<&TauEval>) {}

    /// Called with the refined latent right before the DDIM step at `t`.
    fn before_ddim(&mut self, _t: usize, _z: &LatentVideo, _control: Option<&AttentionControl>) -> Result<()> {
        Ok(())
    }
}

impl SamplerObserver for () {}

/// Masks for the denoiser's attention grid, if the configuration asks for them.
pub fn attention_control(denoiser: &dyn Denoiser, cond: &Conditioning, config: &GuidanceConfig) -> Result<Option<AttentionControl>> {
    if !config.masks {
        return Ok(None);
    }
    let Some((gh, gw)) = denoiser.attention_grid() else {
        return Ok(None);
    };
    let masks = AttentionMaskSet::build(&cond.trajectory, gh, gw, &cond.prompt.subject)?;
    Ok(Some(AttentionControl {
        masks,
        mode: config.mask_mode,
        normalize: config.mask_norm,
    }))
}

pub fn generate(
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    config: &GuidanceConfig,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
) -> Result<LatentVideo> {
    generate_with_observer(denoiser, cond, config, schedule, shape, &mut ())
}

/// Full reverse loop from `z_T ~ N(0, I)` drawn with `config.seed`.
pub fn generate_with_observer(
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    config: &GuidanceConfig,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
    observer: &mut dyn SamplerObserver,
) -> Result<LatentVideo> {
    config.validate()?;
    cond.trajectory.validate()?;
    if cond.trajectory.frames != shape.0 {
        return Err(Error::shape("generate: trajectory frames", shape.0, cond.trajectory.frames));
    }
    let control = attention_control(denoiser, cond, config)?;
    let guided = config.cg != 0.0 && config.inner_steps > 0;
    let prior = if guided {
        Some(TemporalPrior::new(&cond.trajectory, shape)?)
    } else {
        None
    };
    let total = schedule.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = standard_normal(shape, &mut rng);
    for t in (0..total).rev() {
        let active = control
            .as_ref()
            .filter(|_| masks_active(t, total, config.frozen_steps));
        let ctx = InnerStepContext {
            denoiser,
            schedule,
            config,
            cond,
            control: active,
            prior: prior.as_ref(),
        };
        for m in 0..config.inner_steps {
            let out = tid_inner_step(&ctx, &z, t, &mut rng).context_with(|| format!("t={t}, inner step {m}"))?;
            observer.inner_step(t, m, out.tau.as_ref());
            z = out.z;
        }
        observer.before_ddim(t, &z, active)?;
        z = ddim_step(denoiser, &z, t, Some(cond), active, schedule, config.omega).context_with(|| format!("t={t}, DDIM step"))?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BBox, Canvas};
    use ndarray::Array4;

    pub(crate) struct ConstDenoiser {
        pub value: f64,
        pub uncond: f64,
    }

    impl Denoiser for ConstDenoiser {
        fn predict_noise(&self, z: &LatentVideo, _t: usize, cond: Option<&Conditioning>, _c: Option<&AttentionControl>) -> Result<LatentVideo> {
            Ok(Array4::from_elem(z.dim(), if cond.is_some() { self.value } else { self.uncond }))
        }
    }

    fn cond(frames: usize) -> Conditioning {
        let boxes = (0..frames).map(|i| BBox::new(i as f64, 0.0, i as f64 + 2.0, 2.0)).collect();
        Conditioning {
            prompt: PromptEmbedding::for_identity(0, 2, 3).unwrap(),
            trajectory: BoxTrajectory::new(Canvas { h: 4, w: 8 }, boxes).unwrap(),
        }
    }

    #[test]
    fn cfg_examples() {
        let z = Array4::zeros((2, 1, 4, 8));
        let c = cond(2);
        let d = ConstDenoiser { value: 0.7, uncond: -0.2 };
        let e = cfg_noise(&d, &z, 0, Some(&c), None, 0.0).unwrap();
        assert!(e.iter().all(|&v| v == 0.7));
        let e = cfg_noise(&d, &z, 0, Some(&c), None, 9.0).unwrap();
        assert!(e.iter().all(|&v| (v - (10.0 * 0.7 + 9.0 * 0.2)).abs() < 1e-12));
        let same = ConstDenoiser { value: 0.3, uncond: 0.3 };
        let e = cfg_noise(&same, &z, 0, Some(&c), None, 9.0).unwrap();
        assert!(e.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let nan = ConstDenoiser { value: f64::NAN, uncond: 0.0 };
        assert!(matches!(cfg_noise(&nan, &z, 0, Some(&c), None, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn tweedie_examples() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal((2, 1, 3, 3), &mut rng);
        let eps = standard_normal((2, 1, 3, 3), &mut rng);
        let t = 6;
        let ab = s.alpha_bars()[t];
        let z = &x * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let x0 = tweedie_estimate(&z, t, &eps, &s).unwrap();
        for (a, b) in x0.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = Array4::zeros(z.dim());
        let x0 = tweedie_estimate(&z, t, &zero, &s).unwrap();
        for (a, b) in x0.iter().zip(z.iter()) {
            assert!((a - b / ab.sqrt()).abs() < 1e-12);
        }
        assert!(tweedie_estimate(&z, 10, &eps, &s).is_err());
    }

    #[test]
    fn score_examples() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = standard_normal((1, 1, 2, 2), &mut rng);
        let a = score_from_noise(&eps, 4, &s).unwrap();
        let b = score_from_noise(&(&eps * 2.0), 4, &s).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let zero = score_from_noise(&Array4::zeros((1, 1, 2, 2)), 4, &s).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = standard_normal((1, 1, 2, 2), &mut rng);
        let eps = standard_normal((1, 1, 2, 2), &mut rng);
        // out of t = 0 the target is the clean estimate
        let out = ddim_update(&z, 0, &eps, &s).unwrap();
        let z0 = tweedie_estimate(&z, 0, &eps, &s).unwrap();
        assert_eq!(out, z0);
        let zero = Array4::zeros(z.dim());
        let out = ddim_update(&z, 5, &zero, &s).unwrap();
        let ratio = (s.alpha_bars()[4] / s.alpha_bars()[5]).sqrt();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - ratio * b).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_step_without_drift_only_injects_noise() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let c = cond(2);
        let config = GuidanceConfig { cg: 0.0, ..GuidanceConfig::id() };
        let d = ConstDenoiser { value: 0.0, uncond: 0.0 };
        let ctx = InnerStepContext {
            denoiser: &d,
            schedule: &s,
            config: &config,
            cond: &c,
            control: None,
            prior: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = standard_normal((2, 1, 4, 8), &mut rng);
        let noise = standard_normal((2, 1, 4, 8), &mut rng);
        let out = tid_inner_step_with_noise(&ctx, &z, 7, &noise).unwrap();
        let k = tid_coefficients(&s, 7, config.gamma).unwrap().eta_k;
        for ((a, b), e) in out.z.iter().zip(z.iter()).zip(noise.iter()) {
            assert!((a - (b + k * e)).abs() < 1e-14);
        }
        assert!(out.tau.is_none());
    }

    #[test]
    fn vanishing_gamma_leaves_latent_unchanged() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let c = cond(2);
        let config = GuidanceConfig {
            gamma: 1e-300,
            ..GuidanceConfig::id()
        };
        let d = ConstDenoiser { value: 0.4, uncond: 0.1 };
        let ctx = InnerStepContext {
            denoiser: &d,
            schedule: &s,
            config: &config,
            cond: &c,
            control: None,
            prior: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = standard_normal((2, 1, 4, 8), &mut rng);
        let out = tid_inner_step(&ctx, &z, 3, &mut rng).unwrap();
        assert_eq!(out.z, z);
    }

    #[test]
    fn guidance_without_prior_is_a_config_error() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let c = cond(2);
        let config = GuidanceConfig::tid();
        let d = ConstDenoiser { value: 0.4, uncond: 0.1 };
        let ctx = InnerStepContext {
            denoiser: &d,
            schedule: &s,
            config: &config,
            cond: &c,
            control: None,
            prior: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = standard_normal((2, 1, 4, 8), &mut rng);
        assert!(matches!(tid_inner_step(&ctx, &z, 3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn generate_is_seed_deterministic_and_checks_frames() {
        let s = NoiseSchedule::linear(12, 0.01, 0.2).unwrap();
        let c = cond(3);
        let d = ConstDenoiser { value: 0.1, uncond: 0.0 };
        let config = GuidanceConfig { cg: 3.0, ..GuidanceConfig::tid() }.with_seed(42);
        let a = generate(&d, &c, &config, &s, (3, 1, 4, 8)).unwrap();
        let b = generate(&d, &c, &config, &s, (3, 1, 4, 8)).unwrap();
        assert_eq!(a, b);
        let other = generate(&d, &c, &config.with_seed(43), &s, (3, 1, 4, 8)).unwrap();
        assert_ne!(a, other);
        let err = generate(&d, &c, &config, &s, (2, 1, 4, 8)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn presets() {
        let tid = GuidanceConfig::default();
        assert_eq!((tid.gamma, tid.inner_steps, tid.cg, tid.omega, tid.frozen_steps), (0.05, 2, 10000.0, 9.0, 4));
        assert_eq!(GuidanceConfig::id().cg, 0.0);
        assert_eq!(GuidanceConfig::plain().inner_steps, 0);
        let n = GuidanceConfig::tid().with_grad_norm();
        assert!(n.grad_norm && n.cg == 0.2);
        assert!(GuidanceConfig { gamma: 1.0, ..tid }.validate().is_err());
        assert!(GuidanceConfig { omega: -1.0, ..tid }.validate().is_err());
    }
}
