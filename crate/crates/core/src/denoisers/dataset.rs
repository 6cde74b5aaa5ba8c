//! Synthetic videos of a bright elliptical blob moving over a static texture.
//!
//! Channel 0 carries visible intensity; channel 1 carries an identity
//! signature whose sign inside the blob depends on the blob identity.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{BBox, BoxTrajectory, Canvas};
use crate::sampler::{Conditioning, PromptEmbedding};
use crate::LatentVideo;

const TEXTURE_SEED: u64 = 0x7e47_0b1b;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub identities: usize,
    pub prompt_len: usize,
    /// Box side lengths are drawn uniformly from `min_size..=max_size`.
    pub min_size: usize,
    pub max_size: usize,
    pub blob_level: f64,
    pub signature: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// Fraction of videos without a blob, paired with the empty prompt.
    pub empty_fraction: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            identities: 2,
            prompt_len: 4,
            min_size: 4,
            max_size: 6,
            blob_level: 1.5,
            signature: 1.0,
            background_level: -0.3,
            texture_amplitude: 0.4,
            empty_fraction: 0.25,
        }
    }
}

impl BlobSpec {
    pub const CHANNELS: usize = 2;

    pub fn latent_shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, Self::CHANNELS, self.height, self.width)
    }

    pub fn canvas(&self) -> Canvas {
        Canvas {
            h: self.height,
            w: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return Err(Error::Config(format!("empty fraction must lie in [0, 1), got {}", self.empty_fraction)));
        }
        if self.frames < 2 || self.identities == 0 || self.prompt_len < 2 {
            return Err(Error::Config(format!("blob spec needs >= 2 frames, >= 1 identity and >= 2 prompt tokens: {self:?}")));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "blob sizes {}..={} do not fit a {}x{} canvas",
                self.min_size, self.max_size, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Static low-frequency texture, `channels x h x w`, identical for every video.
    pub fn background(&self) -> ndarray::Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED);
        let coarse = 5;
        let mut out = ndarray::Array3::zeros((Self::CHANNELS, self.height, self.width));
        for ch in 0..Self::CHANNELS {
            let knots = Array2::from_shape_simple_fn((coarse, coarse), || rng.random_range(-1.0..1.0));
            let offset = if ch == 0 { self.background_level } else { 0.0 };
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = bilinear(&knots, y as f64 / (self.height - 1).max(1) as f64, x as f64 / (self.width - 1).max(1) as f64);
                    out[[ch, y, x]] = offset + self.texture_amplitude * v;
                }
            }
        }
        out
    }

    /// Integer box of random size moving linearly between two random placements.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> BoxTrajectory {
        let bw = rng.random_range(self.min_size..=self.max_size);
        let bh = rng.random_range(self.min_size..=self.max_size);
        let start = (rng.random_range(0..=self.width - bw), rng.random_range(0..=self.height - bh));
        let end = (rng.random_range(0..=self.width - bw), rng.random_range(0..=self.height - bh));
        let last = (self.frames - 1) as f64;
        let boxes = (0..self.frames)
            .map(|i| {
                let s = i as f64 / last;
                let x0 = (start.0 as f64 + s * (end.0 as f64 - start.0 as f64)).round();
                let y0 = (start.1 as f64 + s * (end.1 as f64 - start.1 as f64)).round();
                BBox::new(x0, y0, x0 + bw as f64, y0 + bh as f64)
            })
            .collect();
        BoxTrajectory::new(self.canvas(), boxes).expect("sampled boxes lie inside the canvas")
    }

    /// Renders an ellipse inscribed in each frame's box, or only the
    /// background when `identity` is `None`.
    pub fn render(&self, traj: &BoxTrajectory, identity: Option<usize>) -> Result<LatentVideo> {
        if traj.frames != self.frames || traj.canvas != self.canvas() {
            return Err(Error::Config("trajectory does not match the blob canvas".into()));
        }
        if let Some(id) = identity.filter(|&id| id >= self.identities) {
            return Err(Error::Index {
                what: "identity",
                index: id,
                len: self.identities,
            });
        }
        let bg = self.background();
        let sign = if identity.unwrap_or(0) % 2 == 0 { 1.0 } else { -1.0 };
        let mut out = LatentVideo::zeros(self.latent_shape());
        for (f, b) in traj.boxes.iter().enumerate() {
            let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
            let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
            for y in 0..self.height {
                for x in 0..self.width {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let inside = identity.is_some() && dx * dx + dy * dy <= 1.0;
                    for ch in 0..BlobSpec::CHANNELS {
                        out[[f, ch, y, x]] = match (inside, ch) {
                            (true, 0) => self.blob_level,
                            (true, _) => sign * self.signature,
                            (false, _) => bg[[ch, y, x]],
                        };
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn prompt(&self, identity: Option<usize>) -> Result<PromptEmbedding> {
        match identity {
            Some(id) => PromptEmbedding::for_identity(id, self.identities, self.prompt_len),
            None => PromptEmbedding::empty(self.identities, self.prompt_len),
        }
    }
}

fn bilinear(knots: &Array2<f64>, u: f64, v: f64) -> f64 {
    let (kr, kc) = knots.dim();
    let fy = u * (kr - 1) as f64;
    let fx = v * (kc - 1) as f64;
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(kr - 1), (x0 + 1).min(kc - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let top = knots[[y0, x0]] * (1.0 - tx) + knots[[y0, x1]] * tx;
    let bottom = knots[[y1, x0]] * (1.0 - tx) + knots[[y1, x1]] * tx;
    top * (1.0 - ty) + bottom * ty
}

#[derive(Debug, Clone)]
pub struct BlobVideo {
    pub latent: LatentVideo,
    pub trajectory: BoxTrajectory,
    /// `None` for blob-free videos.
    pub identity: Option<usize>,
}

impl BlobVideo {
    pub fn conditioning(&self, spec: &BlobSpec) -> Result<Conditioning> {
        Ok(Conditioning {
            prompt: spec.prompt(self.identity)?,
            trajectory: self.trajectory.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BlobDataset {
    pub spec: BlobSpec,
    pub videos: Vec<BlobVideo>,
}

impl BlobDataset {
    /// Video `i` depends only on `(seed, i)`.
    pub fn generate(spec: BlobSpec, count: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let videos = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let trajectory = spec.sample_trajectory(&mut rng);
                let identity = if rng.random_bool(spec.empty_fraction) {
                    None
                } else {
                    Some(rng.random_range(0..spec.identities))
                };
                Ok(BlobVideo {
                    latent: spec.render(&trajectory, identity)?,
                    trajectory,
                    identity,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}
