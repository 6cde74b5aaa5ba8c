//! Temporal consistency score: mean Pearson correlation between sampled
//! foreground crops of consecutive frames, and its analytic gradient.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::masks::{BoxTrajectory, GridBox};
use crate::LatentVideo;

/// Evenly spaced (rounded-down) sample positions, expressed relative to the
/// crop so the same grid applies to both crops of a frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingGrid {
    pub rows: usize,
    pub cols: usize,
}

impl SamplingGrid {
    /// Grid shared by two crops: `min` of their heights and widths.
    pub fn for_pair(a: (usize, usize), b: (usize, usize)) -> Self {
        Self {
            rows: a.0.min(b.0),
            cols: a.1.min(b.1),
        }
    }

    fn indices(count: usize, extent: usize, what: &'static str) -> Result<Vec<usize>> {
        if count == 0 || count > extent {
            return Err(Error::Index {
                what,
                index: count,
                len: extent,
            });
        }
        Ok((0..count).map(|k| k * extent / count).collect())
    }

    pub fn row_indices(&self, crop_h: usize) -> Result<Vec<usize>> {
        Self::indices(self.rows, crop_h, "sampling grid rows")
    }

    pub fn col_indices(&self, crop_w: usize) -> Result<Vec<usize>> {
        Self::indices(self.cols, crop_w, "sampling grid cols")
    }
}

/// Region of one frame under its box, laid out `h x w x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundCrop {
    pub frame: usize,
    pub region: Array3<f64>,
}

impl ForegroundCrop {
    pub fn extract(z: &LatentVideo, frame: usize, b: GridBox) -> Result<Self> {
        let (n, c, h, w) = z.dim();
        if frame >= n {
            return Err(Error::Index {
                what: "frame",
                index: frame,
                len: n,
            });
        }
        if b.r1 > h || b.c1 > w || b.height() == 0 || b.width() == 0 {
            return Err(Error::Degenerate(format!("frame {frame}: box {b:?} is empty or outside the {h}x{w} latent")));
        }
        let region = Array3::from_shape_fn((b.height(), b.width(), c), |(r, col, ch)| z[[frame, ch, b.r0 + r, b.c0 + col]]);
        Ok(Self { frame, region })
    }
}

/// Gathers the grid positions of a crop, flattened row-major over `(row, col, channel)`.
pub fn sample_crop(crop: &ForegroundCrop, grid: SamplingGrid) -> Result<Vec<f64>> {
    let (h, w, c) = crop.region.dim();
    let rows = grid.row_indices(h)?;
    let cols = grid.col_indices(w)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len() * c);
    for &r in &rows {
        for &col in &cols {
            out.extend((0..c).map(|ch| crop.region[[r, col, ch]]));
        }
    }
    Ok(out)
}

fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let xc: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = xc.iter().map(|v| v * v).sum::<f64>();
    (xc, ss)
}

fn is_flat(x: &[f64], centered_ss: f64) -> bool {
    let ss = x.iter().map(|v| v * v).sum::<f64>();
    centered_ss <= 1e-24 * ss || centered_ss == 0.0
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("pearson needs at least two samples".into()));
    }
    Ok(())
}

/// Pearson correlation; a constant input is an error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(pearson_with_grad(x, y)?.0)
}

/// Correlation and its gradients with respect to `x` and `y`.
pub fn pearson_with_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(x, y)?;
    let (xc, sxx) = centered(x);
    let (yc, syy) = centered(y);
    if is_flat(x, sxx) || is_flat(y, syy) {
        return Err(Error::Degenerate("constant vector has no correlation".into()));
    }
    let (nx, ny) = (sxx.sqrt(), syy.sqrt());
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let rho = (sxy / (nx * ny)).clamp(-1.0, 1.0);
    // d rho / dx = yc / (|xc||yc|) - rho * xc / |xc|^2, already centered
    let gx = xc
        .iter()
        .zip(&yc)
        .map(|(a, b)| b / (nx * ny) - rho * a / sxx)
        .collect();
    let gy = xc
        .iter()
        .zip(&yc)
        .map(|(a, b)| a / (nx * ny) - rho * b / syy)
        .collect();
    Ok((rho, gx, gy))
}

/// What to do when a sampled crop is constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegenerateCrops {
    /// Count the pair as correlation 0 with zero gradient and log a warning.
    #[default]
    ZeroWithWarning,
    /// Fail with the index of the offending pair.
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauEval {
    pub tau: f64,
    /// Correlation of each consecutive pair `(i, i + 1)`.
    pub rhos: Vec<f64>,
    /// Pairs treated as degenerate.
    pub degenerate_pairs: Vec<usize>,
}

#[derive(Debug, Clone)]
struct PairSampling {
    /// Latent `(channel, row, col)` of each sampled entry, for frames `i` and `i + 1`.
    first: Vec<(usize, usize, usize)>,
    second: Vec<(usize, usize, usize)>,
}

/// Precomputed sampling positions for one trajectory over one latent shape.
#[derive(Debug, Clone)]
pub struct TemporalPrior {
    shape: (usize, usize, usize, usize),
    pairs: Vec<PairSampling>,
    pub degenerate: DegenerateCrops,
}

fn positions(b: GridBox, grid: SamplingGrid, channels: usize) -> Result<Vec<(usize, usize, usize)>> {
    let rows = grid.row_indices(b.height())?;
    let cols = grid.col_indices(b.width())?;
    let mut out = Vec::with_capacity(rows.len() * cols.len() * channels);
    for &r in &rows {
        for &c in &cols {
            out.extend((0..channels).map(|ch| (ch, b.r0 + r, b.c0 + c)));
        }
    }
    Ok(out)
}

impl TemporalPrior {
    /// Boxes are snapped to the latent grid with the any-overlap rule.
    pub fn new(traj: &BoxTrajectory, shape: (usize, usize, usize, usize)) -> Result<Self> {
        traj.validate()?;
        let (n, c, h, w) = shape;
        if traj.frames != n {
            return Err(Error::shape("temporal prior frames", traj.frames, n));
        }
        if n < 2 {
            return Err(Error::Degenerate("temporal prior needs at least two frames".into()));
        }
        let boxes = traj.to_grid(h, w);
        for (i, b) in boxes.iter().enumerate() {
            if b.height() == 0 || b.width() == 0 {
                return Err(Error::Degenerate(format!("box {i} vanishes at latent resolution {h}x{w}")));
            }
        }
        let pairs = boxes
            .windows(2)
            .map(|bw| {
                let grid = SamplingGrid::for_pair((bw[0].height(), bw[0].width()), (bw[1].height(), bw[1].width()));
                Ok(PairSampling {
                    first: positions(bw[0], grid, c)?,
                    second: positions(bw[1], grid, c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            shape,
            pairs,
            degenerate: DegenerateCrops::default(),
        })
    }

    pub fn with_degenerate(mut self, policy: DegenerateCrops) -> Self {
        self.degenerate = policy;
        self
    }

    fn check_shape(&self, z: &LatentVideo) -> Result<()> {
        if z.dim() != self.shape {
            return Err(Error::shape("temporal prior latent", format!("{:?}", self.shape), format!("{:?}", z.dim())));
        }
        Ok(())
    }

    fn gather(z: &LatentVideo, frame: usize, pos: &[(usize, usize, usize)]) -> Vec<f64> {
        pos.iter().map(|&(c, r, col)| z[[frame, c, r, col]]).collect()
    }

    fn run(&self, z: &LatentVideo, mut grad: Option<&mut Array4<f64>>) -> Result<TauEval> {
        self.check_shape(z)?;
        let mut rhos = Vec::with_capacity(self.pairs.len());
        let mut degenerate_pairs = Vec::new();
        let scale = 1.0 / self.pairs.len() as f64;
        for (i, p) in self.pairs.iter().enumerate() {
            let x = Self::gather(z, i, &p.first);
            let y = Self::gather(z, i + 1, &p.second);
            match pearson_with_grad(&x, &y) {
                Ok((rho, gx, gy)) => {
                    rhos.push(rho);
                    if let Some(g) = grad.as_deref_mut() {
                        for (&(c, r, col), d) in p.first.iter().zip(&gx) {
                            g[[i, c, r, col]] += scale * d;
                        }
                        for (&(c, r, col), d) in p.second.iter().zip(&gy) {
                            g[[i + 1, c, r, col]] += scale * d;
                        }
                    }
                }
                Err(Error::Degenerate(msg)) => match self.degenerate {
                    DegenerateCrops::Fail => {
                        return Err(Error::Degenerate(format!("frame pair {i}: {msg}")));
                    }
                    DegenerateCrops::ZeroWithWarning => {
                        log::warn!("temporal prior: frame pair {i} has a constant crop, counted as 0");
                        rhos.push(0.0);
                        degenerate_pairs.push(i);
                    }
                },
                Err(e) => return Err(e),
            }
        }
        let tau = rhos.iter().sum::<f64>() * scale;
        Ok(TauEval {
            tau,
            rhos,
            degenerate_pairs,
        })
    }

    pub fn evaluate(&self, z: &LatentVideo) -> Result<TauEval> {
        self.run(z, None)
    }

    /// Value and gradient with respect to every latent entry.
    pub fn gradient(&self, z: &LatentVideo) -> Result<(TauEval, Array4<f64>)> {
        let mut g = Array4::zeros(self.shape);
        let eval = self.run(z, Some(&mut g))?;
        Ok((eval, g))
    }
}

pub fn tau(traj: &BoxTrajectory, z: &LatentVideo) -> Result<f64> {
    Ok(TemporalPrior::new(traj, z.dim())?.evaluate(z)?.tau)
}

pub fn tau_gradient(traj: &BoxTrajectory, z: &LatentVideo) -> Result<Array4<f64>> {
    Ok(TemporalPrior::new(traj, z.dim())?.gradient(z)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BBox, Canvas};
    use ndarray::{s, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(h: usize, w: usize, boxes: &[[f64; 4]]) -> BoxTrajectory {
        BoxTrajectory::new(Canvas { h, w }, boxes.iter().map(|&b| BBox::from(b)).collect()).unwrap()
    }

    fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson(&x, &[2.0, 4.0, 7.0]).unwrap();
        assert!((r - textbook_pearson(&x, &[2.0, 4.0, 7.0])).abs() < 1e-14);
        assert!((r - 0.993_399_267_8).abs() < 1e-9);
        assert!(matches!(pearson(&x, &[2.0, 2.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&[0.1; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&x, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn sample_crop_identity_and_stride() {
        let region = Array3::from_shape_fn((2, 2, 2), |(r, c, ch)| (r * 100 + c * 10 + ch) as f64);
        let crop = ForegroundCrop { frame: 0, region };
        let flat = sample_crop(&crop, SamplingGrid { rows: 2, cols: 2 }).unwrap();
        assert_eq!(flat, vec![0.0, 1.0, 10.0, 11.0, 100.0, 101.0, 110.0, 111.0]);

        let region = Array3::from_shape_fn((4, 2, 1), |(r, c, _)| (r * 10 + c) as f64);
        let crop = ForegroundCrop { frame: 0, region };
        let flat = sample_crop(&crop, SamplingGrid { rows: 2, cols: 2 }).unwrap();
        assert_eq!(flat, vec![0.0, 1.0, 20.0, 21.0]);
        assert!(sample_crop(&crop, SamplingGrid { rows: 5, cols: 1 }).is_err());
    }

    #[test]
    fn identical_frames_give_one() {
        let t = traj(6, 6, &[[1.0, 1.0, 4.0, 4.0], [1.0, 1.0, 4.0, 4.0], [1.0, 1.0, 4.0, 4.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = Array3::from_shape_fn((2, 6, 6), |_| rng.random::<f64>());
        let mut z = Array4::zeros((3, 2, 6, 6));
        for i in 0..3 {
            z.slice_mut(s![i, .., .., ..]).assign(&frame);
        }
        assert!((tau(&t, &z).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_crop_gives_minus_one() {
        let t = traj(4, 4, &[[0.0, 0.0, 2.0, 2.0], [2.0, 2.0, 4.0, 4.0]]);
        let mut z = Array4::zeros((2, 1, 4, 4));
        let vals = [0.3, -1.2, 2.0, 0.7];
        for (k, v) in vals.iter().enumerate() {
            z[[0, 0, k / 2, k % 2]] = *v;
            z[[1, 0, 2 + k / 2, 2 + k % 2]] = -*v;
        }
        assert!((tau(&t, &z).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_frame_average_matches_scalar_oracle() {
        // boxes of different sizes: pair grids come from the smaller box
        let t = traj(8, 8, &[[0.0, 0.0, 4.0, 2.0], [2.0, 2.0, 4.0, 4.0], [4.0, 4.0, 8.0, 8.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array4::from_shape_fn((3, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
        // pair 0: 2x4 crop vs 2x2 crop, grid 2x2; cols of the wider crop at {0, 2}
        let x0 = [z[[0, 0, 0, 0]], z[[0, 0, 0, 2]], z[[0, 0, 1, 0]], z[[0, 0, 1, 2]]];
        let y0 = [z[[1, 0, 2, 2]], z[[1, 0, 2, 3]], z[[1, 0, 3, 2]], z[[1, 0, 3, 3]]];
        // pair 1: 2x2 vs 4x4, grid 2x2; rows/cols of the larger crop at {4, 6}
        let x1 = y0;
        let y1 = [z[[2, 0, 4, 4]], z[[2, 0, 4, 6]], z[[2, 0, 6, 4]], z[[2, 0, 6, 6]]];
        let expect = (textbook_pearson(&x0, &y0) + textbook_pearson(&x1, &y1)) / 2.0;
        assert!((tau(&t, &z).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = traj(4, 4, &[[0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0], [2.0, 1.0, 4.0, 3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array4::from_shape_fn((3, 1, 4, 4), |_| rng.random_range(-1.0..1.0));
        let g = tau_gradient(&t, &z).unwrap();
        let h = 1e-5;
        for (idx, &gv) in g.indexed_iter() {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (tau(&t, &zp).unwrap() - tau(&t, &zm).unwrap()) / (2.0 * h);
            assert!((fd - gv).abs() <= 1e-4 * fd.abs().max(1e-3), "{idx:?}: fd {fd} analytic {gv}");
        }
    }

    #[test]
    fn gradient_sums_to_zero_per_crop_and_outside_is_zero() {
        let t = traj(6, 6, &[[0.0, 0.0, 3.0, 3.0], [3.0, 3.0, 6.0, 6.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.random_range(-1.0..1.0));
        let g = tau_gradient(&t, &z).unwrap();
        let s0: f64 = g.slice(s![0, .., 0..3, 0..3]).sum();
        let s1: f64 = g.slice(s![1, .., 3..6, 3..6]).sum();
        assert!(s0.abs() < 1e-12 && s1.abs() < 1e-12);
        assert_eq!(g.slice(s![0, .., 3.., ..]).iter().filter(|v| **v != 0.0).count(), 0);
        assert_eq!(g.slice(s![1, .., 0..3, ..]).iter().filter(|v| **v != 0.0).count(), 0);
        // degree-0 homogeneity
        let dot: f64 = g.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-10);
        let g2 = tau_gradient(&t, &(&z * 2.0)).unwrap();
        for (a, b) in g2.iter().zip(g.iter()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_crops() {
        let t = traj(4, 4, &[[0.0, 0.0, 2.0, 2.0], [2.0, 2.0, 4.0, 4.0]]);
        let z = Array4::zeros((2, 1, 4, 4));
        let prior = TemporalPrior::new(&t, z.dim()).unwrap();
        let (eval, g) = prior.gradient(&z).unwrap();
        assert_eq!(eval.tau, 0.0);
        assert_eq!(eval.degenerate_pairs, vec![0]);
        assert!(g.iter().all(|v| *v == 0.0));
        let strict = prior.with_degenerate(DegenerateCrops::Fail);
        let err = strict.evaluate(&z).unwrap_err();
        assert!(err.to_string().contains("frame pair 0"));
    }

    #[test]
    fn shape_and_frame_checks() {
        let t = traj(4, 4, &[[0.0, 0.0, 2.0, 2.0]]);
        assert!(TemporalPrior::new(&t, (1, 1, 4, 4)).is_err());
        let t = traj(4, 4, &[[0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]]);
        assert!(TemporalPrior::new(&t, (3, 1, 4, 4)).is_err());
        let prior = TemporalPrior::new(&t, (2, 1, 4, 4)).unwrap();
        assert!(prior.evaluate(&Array4::zeros((2, 1, 5, 4))).is_err());
    }
}
