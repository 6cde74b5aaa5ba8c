//! Blob detection and trajectory-following scores for generated latents.

use std::collections::VecDeque;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{BBox, BoxTrajectory};
use crate::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Latent channel carrying visible intensity.
    pub channel: usize,
    /// Pixels above `mean + k_std * std` of the frame are foreground...
    pub k_std: f64,
    /// ...provided they also exceed this absolute level.
    pub min_level: f64,
    /// Smallest component that counts as a detection.
    pub min_pixels: usize,
    /// Fixed threshold replacing the per-frame statistic.
    pub fixed_level: Option<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            channel: 0,
            k_std: 2.0,
            min_level: 0.6,
            min_pixels: 3,
            fixed_level: None,
        }
    }
}

/// Bounding box of the largest 4-connected bright component, in pixel units.
pub fn detect_blob(frame: ArrayView2<'_, f64>, cfg: &DetectConfig) -> Option<BBox> {
    let (h, w) = frame.dim();
    let n = (h * w) as f64;
    if h == 0 || w == 0 {
        return None;
    }
    let mean = frame.sum() / n;
    let std = (frame.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let level = cfg.fixed_level.unwrap_or_else(|| (mean + cfg.k_std * std).max(cfg.min_level));
    let fg = frame.mapv(|v| v > level);
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if !fg[[sy, sx]] || seen[sy * w + sx] {
                continue;
            }
            seen[sy * w + sx] = true;
            queue.push_back((sy, sx));
            let (mut size, mut y0, mut y1, mut x0, mut x1) = (0, sy, sy, sx, sx);
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
                let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && fg[[ny, nx]] && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            if size >= cfg.min_pixels && best.as_ref().is_none_or(|(s, _)| size > *s) {
                let b = BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64);
                best = Some((size, b));
            }
        }
    }
    best.map(|(_, b)| b)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box in `h x w` pixel units.
fn rescale(b: &BBox, traj: &BoxTrajectory, h: usize, w: usize) -> BBox {
    let sx = w as f64 / traj.canvas.w as f64;
    let sy = h as f64 / traj.canvas.h as f64;
    BBox::new(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub detected_frames: usize,
    pub frames: usize,
    /// IoU per frame; `None` where nothing was detected.
    pub ious: Vec<Option<f64>>,
    /// Mean IoU over detected frames; `None` without detections.
    pub miou: Option<f64>,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    /// Fraction of videos with a detection in at least half the frames.
    pub coverage: f64,
    /// Mean IoU over all frames with a detection; `None` when there are none.
    pub miou: Option<f64>,
    pub detected_frames: usize,
    pub per_video: Vec<VideoScore>,
}

pub fn score_video(z: &LatentVideo, traj: &BoxTrajectory, cfg: &DetectConfig) -> Result<VideoScore> {
    let (n, c, h, w) = z.dim();
    if traj.frames != n {
        return Err(Error::shape("evaluated frames", traj.frames, n));
    }
    if cfg.channel >= c {
        return Err(Error::Index {
            what: "detection channel",
            index: cfg.channel,
            len: c,
        });
    }
    let ious: Vec<Option<f64>> = (0..n)
        .map(|f| {
            let frame = z.slice(ndarray::s![f, cfg.channel, .., ..]);
            detect_blob(frame, cfg).map(|d| iou(&d, &rescale(&traj.boxes[f], traj, h, w)))
        })
        .collect();
    let detected_frames = ious.iter().flatten().count();
    Ok(VideoScore {
        detected_frames,
        miou: mean(ious.iter().flatten().copied()),
        frames: n,
        covered: detected_frames >= n.div_ceil(2),
        ious,
    })
}

pub fn evaluate(videos: &[(LatentVideo, BoxTrajectory)], cfg: &DetectConfig) -> Result<EvalReport> {
    let per_video = videos
        .iter()
        .map(|(z, traj)| score_video(z, traj, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_video))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(per_video: Vec<VideoScore>) -> EvalReport {
    let detected_frames = per_video.iter().map(|v| v.detected_frames).sum();
    let covered = per_video.iter().filter(|v| v.covered).count();
    let videos = per_video.len();
    EvalReport {
        videos,
        coverage: if videos == 0 { 0.0 } else { covered as f64 / videos as f64 },
        miou: mean(per_video.iter().flat_map(|v| v.ious.iter().flatten().copied())),
        detected_frames,
        per_video,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::Canvas;
    use ndarray::Array2;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 4.0, 2.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        assert!((iou(&a, &BBox::new(0.0, 0.0, 1.0, 1.0)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn detects_largest_component() {
        let mut f = Array2::from_elem((16, 16), -0.2);
        for y in 2..6 {
            for x in 3..8 {
                f[[y, x]] = 1.5;
            }
        }
        f[[8, 8]] = 1.5;
        f[[8, 9]] = 1.5;
        f[[9, 8]] = 1.5;
        let b = detect_blob(f.view(), &DetectConfig::default()).unwrap();
        assert_eq!(b, BBox::new(3.0, 2.0, 8.0, 6.0));
        // diagonal neighbours are separate components
        let mut g = Array2::from_elem((6, 6), 0.0);
        for i in 0..6 {
            g[[i, i]] = 2.0;
        }
        let cfg = DetectConfig {
            min_pixels: 1,
            ..DetectConfig::default()
        };
        let b = detect_blob(g.view(), &cfg).unwrap();
        assert_eq!(b.area(), 1.0);
        assert!(detect_blob(Array2::from_elem((5, 5), 0.1).view(), &DetectConfig::default()).is_none());
        assert!(detect_blob(Array2::zeros((5, 5)).view(), &cfg).is_none());
        let mut single = Array2::zeros((8, 8));
        single[[3, 5]] = 1.0;
        assert_eq!(detect_blob(single.view(), &cfg), Some(BBox::new(5.0, 3.0, 6.0, 4.0)));
    }

    #[test]
    fn coverage_and_miou() {
        let canvas = Canvas { h: 8, w: 8 };
        let boxes = vec![BBox::new(1.0, 1.0, 4.0, 4.0); 4];
        let traj = BoxTrajectory::new(canvas, boxes).unwrap();
        let mut z = LatentVideo::from_elem((4, 1, 8, 8), -0.3);
        // frames 0 and 1 perfect, frame 2 shifted by one column, frame 3 empty
        for f in 0..3 {
            let dx = usize::from(f == 2);
            for y in 1..4 {
                for x in 1 + dx..4 + dx {
                    z[[f, 0, y, x]] = 1.5;
                }
            }
        }
        let report = evaluate(&[(z.clone(), traj.clone())], &DetectConfig::default()).unwrap();
        assert_eq!(report.detected_frames, 3);
        assert_eq!(report.coverage, 1.0);
        assert!((report.miou.unwrap() - (2.0 + 0.5) / 3.0).abs() < 1e-12);
        let mut empty = z.clone();
        empty.fill(-0.3);
        let report = evaluate(&[(z, traj.clone()), (empty, traj)], &DetectConfig::default()).unwrap();
        assert_eq!(report.coverage, 0.5);
        assert_eq!(report.per_video[1].miou, None);
        assert!(!report.per_video[1].covered);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    }
}
