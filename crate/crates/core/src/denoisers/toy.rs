//! Small conv + attention noise predictor with hand-written backprop.
//!
//! Per frame, two 3x3 convs encode the latent into `hidden` features. The
//! features are average-pooled by `pool` onto the attention token grid, where
//! a spatial self-attention block (within each frame), a temporal
//! self-attention block (per token across frames) and a cross-attention block
//! against the prompt tokens run, each single-head with a residual. The result
//! is upsampled, added to the encoder features and decoded by two 3x3 convs.
//! The network output `F` is combined with the input as
//! `eps = sqrt(1 - a) z + sqrt(a) F`, so the identity path at high noise is
//! built in.
//!
//! Attention masks and mask normalization only exist at inference; training
//! runs the unmasked path.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, attention_pair, attention_weights, AttentionInputs, MaskMode};
use crate::error::{Error, Result};
use crate::masknorm::mask_normalize;
use crate::sampler::{AttentionControl, Conditioning, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pooling factor between the latent and the attention token grid.
    pub pool: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub prompt_len: usize,
    pub identities: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 2,
            height: 16,
            width: 16,
            pool: 2,
            hidden: 16,
            time_dim: 16,
            prompt_len: 4,
            identities: 2,
        }
    }
}

impl ToyConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Attention token grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.pool, self.width / self.pool)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn prompt_dim(&self) -> usize {
        self.identities + self.prompt_len
    }

    pub fn latent_shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.channels, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.pool,
            self.hidden,
            self.prompt_len,
            self.identities,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("toy model dimensions must be positive: {self:?}")));
        }
        if self.height % self.pool != 0 || self.width % self.pool != 0 {
            return Err(Error::Config(format!(
                "latent {}x{} is not divisible by the pooling factor {}",
                self.height, self.width, self.pool
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time embedding width must be even and positive, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Attention block whose activations can be inspected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyLayer {
    Spatial,
    Temporal,
    Cross,
}

impl std::str::FromStr for ToyLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "temporal" => Ok(Self::Temporal),
            "cross" => Ok(Self::Cross),
            other => Err(Error::Config(format!("unknown layer `{other}` (expected spatial, temporal or cross)"))),
        }
    }
}

macro_rules! toy_params {
    ($($name:ident),* $(,)?) => {
        /// Every weight is stored as a matrix; biases are `1 x n`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ToyParams {
            $(pub $name: Array2<f64>,)*
        }

        impl ToyParams {
            /// Fixed layer order used by checkpoints and the optimizer.
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn tensors(&self) -> Vec<&Array2<f64>> {
                vec![$(&self.$name),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
                vec![$(&mut self.$name),*]
            }

            fn from_iter(mut it: impl Iterator<Item = Array2<f64>>) -> Self {
                Self { $($name: it.next().expect("one tensor per layer"),)* }
            }
        }
    };
}

toy_params!(
    enc1_w, enc1_b, time1_w, enc2_w, enc2_b, pos, frame_pos, sp_q, sp_k, sp_v, sp_o, tm_q, tm_k, tm_v, tm_o, cr_q, cr_k, cr_v,
    cr_o, dec1_w, dec1_b, time2_w, dec2_w, dec2_b,
);

impl ToyParams {
    pub fn shape_of(name: &str, cfg: &ToyConfig) -> Result<(usize, usize)> {
        let (c, d, e, p) = (cfg.channels, cfg.hidden, cfg.time_dim, cfg.prompt_dim());
        Ok(match name {
            "enc1_w" => (c * 9, d),
            "enc2_w" | "dec1_w" => (d * 9, d),
            "enc1_b" | "enc2_b" | "dec1_b" => (1, d),
            "time1_w" | "time2_w" => (e, d),
            "pos" => (cfg.tokens(), d),
            "frame_pos" => (cfg.frames, d),
            "sp_q" | "sp_k" | "sp_v" | "sp_o" | "tm_q" | "tm_k" | "tm_v" | "tm_o" | "cr_q" | "cr_o" => (d, d),
            "cr_k" | "cr_v" => (p, d),
            "dec2_w" => (d * 9, c),
            "dec2_b" => (1, c),
            other => return Err(Error::Config(format!("unknown toy layer `{other}`"))),
        })
    }

    pub fn shapes(cfg: &ToyConfig) -> Vec<(usize, usize)> {
        Self::NAMES
            .iter()
            .map(|n| Self::shape_of(n, cfg).expect("every listed layer has a shape"))
            .collect()
    }

    pub fn zeros(cfg: &ToyConfig) -> Self {
        Self::from_iter(Self::shapes(cfg).into_iter().map(Array2::zeros))
    }

    pub fn from_tensors(cfg: &ToyConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::shape("toy parameter count", shapes.len(), tensors.len()));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(Self::NAMES) {
            if t.dim() != *s {
                return Err(Error::Config(format!("layer {name}: expected shape {s:?}, got {:?}", t.dim())));
            }
        }
        Ok(Self::from_iter(tensors.into_iter()))
    }

    /// Scaled Gaussian init; residual branches and the output conv start small.
    pub fn init(cfg: &ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        for (name, t) in Self::NAMES.iter().zip(p.tensors_mut()) {
            let fan_in = t.nrows() as f64;
            let std = match *name {
                "enc1_b" | "enc2_b" | "dec1_b" | "dec2_b" => 0.0,
                "pos" | "frame_pos" => 0.1,
                "sp_o" | "tm_o" | "cr_o" | "dec2_w" => 0.2 / fan_in.sqrt(),
                _ => 1.0 / fan_in.sqrt(),
            };
            t.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        }
        p
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn silu_backward(dy: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|g, &v| *g *= silu_grad(v));
    out
}

/// Mean over `p x p` cells: `(h * w) x d` -> `(h / p * w / p) x d`.
fn pool(x: ArrayView2<'_, f64>, h: usize, w: usize, p: usize) -> Array2<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, x.ncols()));
    let k = 1.0 / (p * p) as f64;
    for y in 0..h {
        for xx in 0..w {
            out.row_mut((y / p) * gw + xx / p).scaled_add(k, &x.row(y * w + xx));
        }
    }
    out
}

/// Adjoint of [`pool`].
fn pool_adjoint(dx: ArrayView2<'_, f64>, h: usize, w: usize, p: usize) -> Array2<f64> {
    let gw = w / p;
    let k = 1.0 / (p * p) as f64;
    Array2::from_shape_fn((h * w, dx.ncols()), |(i, c)| k * dx[[(i / w / p) * gw + (i % w) / p, c]])
}

/// Nearest-neighbour upsampling, the transpose of summing over cells.
fn upsample(x: ArrayView2<'_, f64>, h: usize, w: usize, p: usize) -> Array2<f64> {
    let gw = w / p;
    Array2::from_shape_fn((h * w, x.ncols()), |(i, c)| x[[(i / w / p) * gw + (i % w) / p, c]])
}

fn upsample_adjoint(du: ArrayView2<'_, f64>, h: usize, w: usize, p: usize) -> Array2<f64> {
    pool(du, h, w, p) * (p * p) as f64
}

/// `3x3` zero-padded patches: row = token `y * w + x`, column = `ch * 9 + ky * 3 + kx`.
fn im2col(tokens: ArrayView2<'_, f64>, h: usize, w: usize) -> Array2<f64> {
    let ch = tokens.ncols();
    let mut out = Array2::zeros((h * w, ch * 9));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                for kx in 0..3 {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                    let src = sy * w + sx;
                    for c in 0..ch {
                        out[[row, c * 9 + ky * 3 + kx]] = tokens[[src, c]];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(patches: ArrayView2<'_, f64>, h: usize, w: usize, ch: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h * w, ch));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                for kx in 0..3 {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                    let dst = sy * w + sx;
                    for c in 0..ch {
                        out[[dst, c]] += patches[[row, c * 9 + ky * 3 + kx]];
                    }
                }
            }
        }
    }
    out
}

/// Frame `n` of a latent as `tokens x channels`.
fn frame_tokens(z: &LatentVideo, n: usize) -> Array2<f64> {
    let (_, c, h, w) = z.dim();
    let frame = z.index_axis(Axis(0), n);
    let flat = frame.to_shape((c, h * w)).expect("frame reshape");
    flat.t().to_owned()
}

#[derive(Clone, Copy)]
struct Block<'a> {
    q: &'a Array2<f64>,
    k: &'a Array2<f64>,
    v: &'a Array2<f64>,
    o: &'a Array2<f64>,
}

struct AttnTape {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    a: Array2<f64>,
}

struct BlockGrads<'a> {
    q: &'a mut Array2<f64>,
    k: &'a mut Array2<f64>,
    v: &'a mut Array2<f64>,
    o: &'a mut Array2<f64>,
}

/// Attention output projected by `Wo` (the residual is added by the caller).
fn attn_forward(
    xq: ArrayView2<'_, f64>,
    xkv: ArrayView2<'_, f64>,
    w: Block<'_>,
    mask: Option<(ArrayView2<'_, u8>, &AttentionControl)>,
    tape: bool,
) -> Result<(Array2<f64>, Option<AttnTape>)> {
    let q = xq.dot(w.q);
    let k = xkv.dot(w.k);
    let v = xkv.dot(w.v);
    let inputs = AttentionInputs::new(q.view(), k.view(), v.view());
    match mask {
        None => {
            let p = attention_weights(&inputs, None, MaskMode::Additive)?;
            let a = p.dot(&v);
            let out = a.dot(w.o);
            let tape = tape.then(|| AttnTape {
                xq: xq.to_owned(),
                xkv: xkv.to_owned(),
                q,
                k,
                v,
                p,
                a,
            });
            Ok((out, tape))
        }
        Some((m, ctl)) => {
            debug_assert!(!tape, "masked attention is inference-only");
            let a = if ctl.normalize {
                mask_normalize(&attention_pair(&inputs, m, ctl.mode)?)?
            } else {
                attention(&inputs, Some(m), ctl.mode)?
            };
            Ok((a.dot(w.o), None))
        }
    }
}

/// Accumulates weight gradients and returns `(d xq, d xkv)`.
fn attn_backward(tape: &AttnTape, w: Block<'_>, g: BlockGrads<'_>, dout: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (tape.q.ncols() as f64).sqrt();
    *g.o += &tape.a.t().dot(&dout);
    let da = dout.dot(&w.o.t());
    let dp = da.dot(&tape.v.t());
    let dv = tape.p.t().dot(&da);
    let mut ds = &tape.p * &dp;
    for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(tape.p.axis_iter(Axis(0))) {
        let dot = row.sum();
        row.zip_mut_with(&prow, |d, &p| *d -= p * dot);
    }
    let dq = ds.dot(&tape.k) * scale;
    let dk = ds.t().dot(&tape.q) * scale;
    *g.q += &tape.xq.t().dot(&dq);
    *g.k += &tape.xkv.t().dot(&dk);
    *g.v += &tape.xkv.t().dot(&dv);
    let dxq = dq.dot(&w.q.t());
    let dxkv = dk.dot(&w.k.t()) + dv.dot(&w.v.t());
    (dxq, dxkv)
}


struct EncTape {
    p0: Array2<f64>,
    h0: Array2<f64>,
    p1: Array2<f64>,
    h1: Array2<f64>,
}

struct DecTape {
    p2: Array2<f64>,
    h2: Array2<f64>,
    p3: Array2<f64>,
}

/// Intermediate values kept for backprop.
pub struct Tape {
    gain: f64,
    emb: Array1<f64>,
    enc: Vec<EncTape>,
    spatial: Vec<AttnTape>,
    temporal: Vec<AttnTape>,
    cross: Vec<AttnTape>,
    dec: Vec<DecTape>,
}

pub struct ForwardOutput {
    pub noise: LatentVideo,
    pub tape: Option<Tape>,
    /// `frames x grid tokens x hidden` output of the requested attention block.
    pub activation: Option<Array3<f64>>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub config: ToyConfig,
    pub params: ToyParams,
    schedule: NoiseSchedule,
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: ToyParams::init(&config, seed),
            schedule: schedule.clone(),
        })
    }

    pub fn from_params(config: ToyConfig, schedule: &NoiseSchedule, params: ToyParams) -> Result<Self> {
        config.validate()?;
        let params = ToyParams::from_tensors(&config, params.tensors().into_iter().cloned().collect())?;
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite toy parameters".into()));
        }
        Ok(Self {
            config,
            params,
            schedule: schedule.clone(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Sinusoidal embedding of `t / T`.
    pub fn time_embedding(&self, t: usize) -> Array1<f64> {
        let half = self.config.time_dim / 2;
        let pos = 1000.0 * t as f64 / self.schedule.len() as f64;
        let mut e = Array1::zeros(self.config.time_dim);
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            e[k] = (pos * freq).sin();
            e[half + k] = (pos * freq).cos();
        }
        e
    }

    /// Prompt tokens for `cond`, or the all-zero null prompt.
    pub fn prompt_tokens(&self, cond: Option<&Conditioning>) -> Result<Array2<f64>> {
        let (l, p) = (self.config.prompt_len, self.config.prompt_dim());
        match cond {
            None => Ok(Array2::zeros((l, p))),
            Some(c) if c.prompt.tokens.dim() == (l, p) => Ok(c.prompt.tokens.clone()),
            Some(c) => Err(Error::shape("prompt tokens", format!("{:?}", (l, p)), format!("{:?}", c.prompt.tokens.dim()))),
        }
    }

    fn check_control(&self, control: &AttentionControl) -> Result<()> {
        let cfg = &self.config;
        let m = &control.masks;
        if m.resolution != cfg.grid() {
            return Err(Error::shape("attention mask grid", format!("{:?}", cfg.grid()), format!("{:?}", m.resolution)));
        }
        if m.frames() != cfg.frames {
            return Err(Error::shape("attention mask frames", cfg.frames, m.frames()));
        }
        if m.prompt_mask.len() != cfg.prompt_len {
            return Err(Error::shape("prompt mask length", cfg.prompt_len, m.prompt_mask.len()));
        }
        Ok(())
    }

    fn block(&self, layer: ToyLayer) -> Block<'_> {
        let p = &self.params;
        match layer {
            ToyLayer::Spatial => Block {
                q: &p.sp_q,
                k: &p.sp_k,
                v: &p.sp_v,
                o: &p.sp_o,
            },
            ToyLayer::Temporal => Block {
                q: &p.tm_q,
                k: &p.tm_k,
                v: &p.tm_v,
                o: &p.tm_o,
            },
            ToyLayer::Cross => Block {
                q: &p.cr_q,
                k: &p.cr_k,
                v: &p.cr_v,
                o: &p.cr_o,
            },
        }
    }

    /// Full forward pass. A tape is only available without masks.
    pub fn forward(
        &self,
        z: &LatentVideo,
        t: usize,
        prompt: ArrayView2<'_, f64>,
        control: Option<&AttentionControl>,
        want_tape: bool,
        capture: Option<ToyLayer>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (n, c, h, w) = cfg.latent_shape();
        if z.dim() != (n, c, h, w) {
            return Err(Error::shape("toy denoiser input", format!("{:?}", (n, c, h, w)), format!("{:?}", z.dim())));
        }
        if want_tape && control.is_some() {
            return Err(Error::Config("backprop through masked attention is not supported".into()));
        }
        if let Some(ctl) = control {
            self.check_control(ctl)?;
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (lp, d, pf) = (cfg.tokens(), cfg.hidden, cfg.pool);
        let p = &self.params;
        let emb = self.time_embedding(t);
        let tb1 = emb.dot(&p.time1_w);
        let tb2 = emb.dot(&p.time2_w);

        let mut enc = Vec::with_capacity(if want_tape { n } else { 0 });
        let mut feats = Vec::with_capacity(n);
        let mut x = Array3::zeros((n, lp, d));
        for f in 0..n {
            let p0 = im2col(frame_tokens(z, f).view(), h, w);
            let mut h0 = p0.dot(&p.enc1_w);
            h0 += &p.enc1_b.row(0);
            h0 += &tb1;
            let a0 = h0.mapv(silu);
            let p1 = im2col(a0.view(), h, w);
            let mut h1 = p1.dot(&p.enc2_w);
            h1 += &p.enc2_b.row(0);
            let e = a0 + h1.mapv(silu);
            let mut xf = pool(e.view(), h, w, pf);
            xf += &p.pos;
            xf += &p.frame_pos.row(f);
            x.index_axis_mut(Axis(0), f).assign(&xf);
            feats.push(e);
            if want_tape {
                enc.push(EncTape { p0, h0, p1, h1 });
            }
        }

        let mut activation = capture.map(|_| Array3::zeros((n, lp, d)));
        let mut spatial = Vec::new();
        let blk = self.block(ToyLayer::Spatial);
        for f in 0..n {
            let xf = x.index_axis(Axis(0), f).to_owned();
            let mask = control.map(|ctl| (ctl.masks.self_masks[f].view(), ctl));
            let (delta, tape) = attn_forward(xf.view(), xf.view(), blk, mask, want_tape)?;
            if capture == Some(ToyLayer::Spatial) {
                activation.as_mut().unwrap().index_axis_mut(Axis(0), f).assign(&delta);
            }
            x.index_axis_mut(Axis(0), f).scaled_add(1.0, &delta);
            spatial.extend(tape);
        }

        let mut temporal = Vec::new();
        let blk = self.block(ToyLayer::Temporal);
        for j in 0..lp {
            let seq = x.slice(s![.., j, ..]).to_owned();
            let mask = control.map(|ctl| (ctl.masks.temporal_masks[j].view(), ctl));
            let (delta, tape) = attn_forward(seq.view(), seq.view(), blk, mask, want_tape)?;
            if capture == Some(ToyLayer::Temporal) {
                activation.as_mut().unwrap().slice_mut(s![.., j, ..]).assign(&delta);
            }
            x.slice_mut(s![.., j, ..]).scaled_add(1.0, &delta);
            temporal.extend(tape);
        }

        let mut cross = Vec::new();
        let blk = self.block(ToyLayer::Cross);
        for f in 0..n {
            let xf = x.index_axis(Axis(0), f).to_owned();
            let mask = control.map(|ctl| (ctl.masks.cross_masks[f].view(), ctl));
            let (delta, tape) = attn_forward(xf.view(), prompt, blk, mask, want_tape)?;
            if capture == Some(ToyLayer::Cross) {
                activation.as_mut().unwrap().index_axis_mut(Axis(0), f).assign(&delta);
            }
            x.index_axis_mut(Axis(0), f).scaled_add(1.0, &delta);
            cross.extend(tape);
        }

        let (skip, gain) = ((1.0 - ab).sqrt(), ab.sqrt());
        let mut noise = LatentVideo::zeros((n, c, h, w));
        let mut dec = Vec::with_capacity(if want_tape { n } else { 0 });
        for (f, e) in feats.into_iter().enumerate() {
            let u = e + upsample(x.index_axis(Axis(0), f), h, w, pf);
            let p2 = im2col(u.view(), h, w);
            let mut h2 = p2.dot(&p.dec1_w);
            h2 += &p.dec1_b.row(0);
            h2 += &tb2;
            let p3 = im2col(h2.mapv(silu).view(), h, w);
            let mut o = p3.dot(&p.dec2_w);
            o += &p.dec2_b.row(0);
            let mut out = noise.index_axis_mut(Axis(0), f);
            for ch in 0..c {
                let col = o.column(ch);
                let zc = z.slice(s![f, ch, .., ..]);
                Zip::from(out.index_axis_mut(Axis(0), ch))
                    .and(col.to_shape((h, w)).expect("token column reshape").view())
                    .and(zc)
                    .for_each(|dst, &v, &zz| *dst = gain * v + skip * zz);
            }
            if want_tape {
                dec.push(DecTape { p2, h2, p3 });
            }
        }
        if noise.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("toy denoiser produced non-finite output".into()));
        }
        let tape = want_tape.then(|| Tape {
            gain,
            emb,
            enc,
            spatial,
            temporal,
            cross,
            dec,
        });
        Ok(ForwardOutput { noise, tape, activation })
    }

    /// Adds `d loss / d params` to `grads` given `d loss / d output`.
    pub fn backward(&self, tape: &Tape, dout: &LatentVideo, grads: &mut ToyParams) {
        let cfg = &self.config;
        let (n, _, h, w) = cfg.latent_shape();
        let (d, pf) = (cfg.hidden, cfg.pool);
        let p = &self.params;

        let dout = dout * tape.gain;
        let mut dx = Array3::<f64>::zeros((n, cfg.tokens(), d));
        let mut dfeats = Vec::with_capacity(n);
        let mut dtime2 = Array1::<f64>::zeros(d);
        for (f, dt) in tape.dec.iter().enumerate() {
            let d_o = frame_tokens(&dout, f);
            grads.dec2_b.row_mut(0).scaled_add(1.0, &d_o.sum_axis(Axis(0)));
            grads.dec2_w += &dt.p3.t().dot(&d_o);
            let da2 = col2im(d_o.dot(&p.dec2_w.t()).view(), h, w, d);
            let dh2 = silu_backward(&da2, &dt.h2);
            let colsum = dh2.sum_axis(Axis(0));
            grads.dec1_b.row_mut(0).scaled_add(1.0, &colsum);
            dtime2 += &colsum;
            grads.dec1_w += &dt.p2.t().dot(&dh2);
            let du = col2im(dh2.dot(&p.dec1_w.t()).view(), h, w, d);
            dx.index_axis_mut(Axis(0), f).assign(&upsample_adjoint(du.view(), h, w, pf));
            dfeats.push(du);
        }

        let blk = self.block(ToyLayer::Cross);
        for f in 0..n {
            let g = BlockGrads {
                q: &mut grads.cr_q,
                k: &mut grads.cr_k,
                v: &mut grads.cr_v,
                o: &mut grads.cr_o,
            };
            let dxf = dx.index_axis(Axis(0), f).to_owned();
            let (dq, _) = attn_backward(&tape.cross[f], blk, g, dxf.view());
            dx.index_axis_mut(Axis(0), f).scaled_add(1.0, &dq);
        }

        let blk = self.block(ToyLayer::Temporal);
        for j in 0..cfg.tokens() {
            let g = BlockGrads {
                q: &mut grads.tm_q,
                k: &mut grads.tm_k,
                v: &mut grads.tm_v,
                o: &mut grads.tm_o,
            };
            let dseq = dx.slice(s![.., j, ..]).to_owned();
            let (dq, dkv) = attn_backward(&tape.temporal[j], blk, g, dseq.view());
            let mut dst = dx.slice_mut(s![.., j, ..]);
            dst += &dq;
            dst += &dkv;
        }

        let blk = self.block(ToyLayer::Spatial);
        for f in 0..n {
            let g = BlockGrads {
                q: &mut grads.sp_q,
                k: &mut grads.sp_k,
                v: &mut grads.sp_v,
                o: &mut grads.sp_o,
            };
            let dxf = dx.index_axis(Axis(0), f).to_owned();
            let (dq, dkv) = attn_backward(&tape.spatial[f], blk, g, dxf.view());
            let mut dst = dx.index_axis_mut(Axis(0), f);
            dst += &dq;
            dst += &dkv;
        }

        let mut dtime1 = Array1::<f64>::zeros(d);
        for ((f, et), mut de) in tape.enc.iter().enumerate().zip(dfeats) {
            let dxf = dx.index_axis(Axis(0), f);
            grads.pos += &dxf;
            grads.frame_pos.row_mut(f).scaled_add(1.0, &dxf.sum_axis(Axis(0)));
            de += &pool_adjoint(dxf, h, w, pf);
            // e = a0 + silu(h1), h1 = conv(a0)
            let dh1 = silu_backward(&de, &et.h1);
            grads.enc2_b.row_mut(0).scaled_add(1.0, &dh1.sum_axis(Axis(0)));
            grads.enc2_w += &et.p1.t().dot(&dh1);
            de += &col2im(dh1.dot(&p.enc2_w.t()).view(), h, w, d);
            let dh0 = silu_backward(&de, &et.h0);
            let colsum = dh0.sum_axis(Axis(0));
            grads.enc1_b.row_mut(0).scaled_add(1.0, &colsum);
            dtime1 += &colsum;
            grads.enc1_w += &et.p0.t().dot(&dh0);
        }
        grads.time1_w += &outer(&tape.emb, &dtime1);
        grads.time2_w += &outer(&tape.emb, &dtime2);
    }

    /// Output of one attention block for the given inputs, without residual.
    pub fn collect_activations(
        &self,
        layer: ToyLayer,
        z: &LatentVideo,
        t: usize,
        cond: Option<&Conditioning>,
        control: Option<&AttentionControl>,
    ) -> Result<Array3<f64>> {
        let prompt = self.prompt_tokens(cond)?;
        let out = self.forward(z, t, prompt.view(), control, false, Some(layer))?;
        Ok(out.activation.expect("capture requested"))
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&self, z: &LatentVideo, t: usize, cond: Option<&Conditioning>, control: Option<&AttentionControl>) -> Result<LatentVideo> {
        let prompt = self.prompt_tokens(cond)?;
        Ok(self.forward(z, t, prompt.view(), control, false, None)?.noise)
    }

    fn attention_grid(&self) -> Option<(usize, usize)> {
        Some(self.config.grid())
    }
}
