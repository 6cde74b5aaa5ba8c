//! Bounding-box trajectories and the attention masks derived from them.
//!
//! Foreground tokens may only attend to foreground tokens and background to
//! background. Boxes are downsampled to an attention grid with an any-overlap
//! rule: a token is foreground if its cell intersects the box with positive area.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x0, y0, x1, y1)` with exclusive upper corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Token rows/cols of an `grid_h x grid_w` grid over `canvas` touched by the box.
    pub fn grid_span(&self, canvas: Canvas, grid_h: usize, grid_w: usize) -> GridBox {
        let fy = grid_h as f64 / canvas.h as f64;
        let fx = grid_w as f64 / canvas.w as f64;
        let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        GridBox {
            r0: clamp((self.y0 * fy).floor(), grid_h),
            r1: clamp((self.y1 * fy).ceil(), grid_h),
            c0: clamp((self.x0 * fx).floor(), grid_w),
            c1: clamp((self.x1 * fx).ceil(), grid_w),
        }
    }
}

/// Integer token range `[r0, r1) x [c0, c1)` on an attention or latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridBox {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl GridBox {
    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn to_bbox(self) -> BBox {
        BBox::new(self.c0 as f64, self.r0 as f64, self.c1 as f64, self.r1 as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
}

/// One foreground box per frame over an `h x w` canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTrajectory {
    pub canvas: Canvas,
    pub frames: usize,
    pub boxes: Vec<BBox>,
}

impl BoxTrajectory {
    pub fn new(canvas: Canvas, boxes: Vec<BBox>) -> Result<Self> {
        let traj = Self {
            canvas,
            frames: boxes.len(),
            boxes,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas.h == 0 || self.canvas.w == 0 {
            return Err(Error::Config("trajectory canvas must be non-empty".into()));
        }
        if self.frames != self.boxes.len() {
            return Err(Error::Config(format!(
                "trajectory declares {} frames but lists {} boxes",
                self.frames,
                self.boxes.len()
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("trajectory has no frames".into()));
        }
        let (h, w) = (self.canvas.h as f64, self.canvas.w as f64);
        for (i, b) in self.boxes.iter().enumerate() {
            let ok = [b.x0, b.y0, b.x1, b.y1].iter().all(|v| v.is_finite())
                && 0.0 <= b.x0
                && b.x0 < b.x1
                && b.x1 <= w
                && 0.0 <= b.y0
                && b.y0 < b.y1
                && b.y1 <= h;
            if !ok {
                return Err(Error::Config(format!(
                    "box {i} {:?} is empty or leaves the {}x{} canvas",
                    <[f64; 4]>::from(*b),
                    self.canvas.h,
                    self.canvas.w
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let traj: Self = serde_json::from_str(&text)?;
        traj.validate()?;
        Ok(traj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The same trajectory expressed on a `h x w` grid, each box snapped outward
    /// to the cells it overlaps.
    pub fn to_grid(&self, h: usize, w: usize) -> Vec<GridBox> {
        self.boxes
            .iter()
            .map(|b| b.grid_span(self.canvas, h, w))
            .collect()
    }

    pub fn at_resolution(&self, h: usize, w: usize) -> BoxTrajectory {
        BoxTrajectory {
            canvas: Canvas { h, w },
            frames: self.frames,
            boxes: self.to_grid(h, w).into_iter().map(GridBox::to_bbox).collect(),
        }
    }
}

/// Binary per-token label, 1 = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask(Vec<u8>);

impl TokenMask {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Config("token mask entries must be 0 or 1".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|v| 1 - v).collect())
    }

    pub fn count_foreground(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }
}

/// Per-frame foreground masks over a `grid_h x grid_w` token grid, row-major.
pub fn rasterize_boxes(traj: &BoxTrajectory, grid_h: usize, grid_w: usize) -> Vec<TokenMask> {
    traj.to_grid(grid_h, grid_w)
        .into_iter()
        .map(|g| {
            let mut values = vec![0u8; grid_h * grid_w];
            for r in g.r0..g.r1 {
                values[r * grid_w + g.c0..r * grid_w + g.c1].fill(1);
            }
            TokenMask(values)
        })
        .collect()
}

fn equality_mask(rows: &[u8], cols: &[u8]) -> Array2<u8> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(j, k)| u8::from(rows[j] == cols[k]))
}

/// `mv mv^T + (1 - mv)(1 - mv)^T`: entry `(j, k)` is 1 iff tokens `j` and `k` share a label.
pub fn build_self_mask(mv: &TokenMask) -> Array2<u8> {
    equality_mask(mv.values(), mv.values())
}

/// `mv my^T + (1 - mv)(1 - my)^T` between video tokens and prompt tokens.
pub fn build_cross_mask(mv: &TokenMask, my: &TokenMask) -> Array2<u8> {
    equality_mask(mv.values(), my.values())
}

/// Frame-by-frame mask for one spatial token: frames attend to frames that
/// give the token the same label.
pub fn build_temporal_mask(trajectory_masks: &[TokenMask], token_index: usize) -> Result<Array2<u8>> {
    let labels = token_labels(trajectory_masks, token_index)?;
    Ok(equality_mask(&labels, &labels))
}

fn token_labels(trajectory_masks: &[TokenMask], token_index: usize) -> Result<Vec<u8>> {
    let len = trajectory_masks.first().map_or(0, TokenMask::len);
    if let Some(m) = trajectory_masks.iter().find(|m| m.len() != len) {
        return Err(Error::shape("temporal mask", len, m.len()));
    }
    if token_index >= len {
        return Err(Error::Index {
            what: "token",
            index: token_index,
            len,
        });
    }
    Ok(trajectory_masks.iter().map(|m| m.values()[token_index]).collect())
}

/// Whether masks apply at timestep `t`: only during the first `frozen_steps`
/// steps of the reverse loop, counted from the noisiest step `total_steps - 1`.
pub fn masks_active(t: usize, total_steps: usize, frozen_steps: usize) -> bool {
    t < total_steps && t + frozen_steps >= total_steps
}

/// All masks for one trajectory at one attention resolution.
#[derive(Debug, Clone)]
pub struct AttentionMaskSet {
    pub resolution: (usize, usize),
    pub token_masks: Vec<TokenMask>,
    pub prompt_mask: TokenMask,
    pub self_masks: Vec<Array2<u8>>,
    pub cross_masks: Vec<Array2<u8>>,
    /// Indexed by spatial token, each `frames x frames`.
    pub temporal_masks: Vec<Array2<u8>>,
}

impl AttentionMaskSet {
    pub fn build(traj: &BoxTrajectory, grid_h: usize, grid_w: usize, prompt_mask: &TokenMask) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Config("attention grid must be at least 1x1".into()));
        }
        traj.validate()?;
        let token_masks = rasterize_boxes(traj, grid_h, grid_w);
        let self_masks = token_masks.iter().map(build_self_mask).collect();
        let cross_masks = token_masks
            .iter()
            .map(|mv| build_cross_mask(mv, prompt_mask))
            .collect();
        let temporal_masks = (0..grid_h * grid_w)
            .map(|j| build_temporal_mask(&token_masks, j))
            .collect::<Result<_>>()?;
        Ok(Self {
            resolution: (grid_h, grid_w),
            token_masks,
            prompt_mask: prompt_mask.clone(),
            self_masks,
            cross_masks,
            temporal_masks,
        })
    }

    pub fn frames(&self) -> usize {
        self.token_masks.len()
    }

    /// Mask set whose every entry is 1; attention under it equals unmasked attention.
    pub fn all_ones(frames: usize, grid_h: usize, grid_w: usize, prompt_len: usize) -> Self {
        let l = grid_h * grid_w;
        Self {
            resolution: (grid_h, grid_w),
            token_masks: vec![TokenMask(vec![1; l]); frames],
            prompt_mask: TokenMask(vec![1; prompt_len]),
            self_masks: vec![Array2::ones((l, l)); frames],
            cross_masks: vec![Array2::ones((l, prompt_len)); frames],
            temporal_masks: vec![Array2::ones((frames, frames)); l],
        }
    }
}
