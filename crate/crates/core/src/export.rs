//! Writing latents to disk: one 8-bit PGM per frame of the visible channel,
//! plus a raw little-endian `f32` dump with a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::LatentVideo;

pub const RAW_FORMAT: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    /// `[frames, channels, height, width]`, row-major.
    pub shape: [usize; 4],
    pub dtype: String,
    pub raw: String,
    /// Channel rendered into the PGM frames.
    pub channel: usize,
    /// Values mapped to grey levels 0 and 255.
    pub range: [f64; 2],
    pub frames: Vec<String>,
}

/// Binary PGM (P5) of an `h x w` field mapped linearly from `range`.
pub fn pgm_bytes(field: ndarray::ArrayView2<'_, f64>, range: [f64; 2]) -> Vec<u8> {
    let (h, w) = field.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = (range[1] - range[0]).max(f64::MIN_POSITIVE);
    out.extend(field.iter().map(|&v| (((v - range[0]) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes `dir/<stem>.raw`, `dir/<stem>.json` and `dir/<stem>_fNN.pgm`.
/// The grey range spans the channel's minimum and maximum.
pub fn export_video(z: &LatentVideo, channel: usize, dir: &Path, stem: &str) -> Result<VideoManifest> {
    let (n, c, h, w) = z.dim();
    if channel >= c {
        return Err(Error::Index {
            what: "export channel",
            index: channel,
            len: c,
        });
    }
    fs::create_dir_all(dir).context_with(|| format!("creating {}", dir.display()))?;
    let visible = z.index_axis(ndarray::Axis(1), channel);
    let lo = visible.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = visible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numeric("cannot export a non-finite latent".into()));
    }
    let range = [lo, hi];
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let name = format!("{stem}_f{f:02}.pgm");
        let path = dir.join(&name);
        fs::write(&path, pgm_bytes(visible.index_axis(ndarray::Axis(0), f), range)).context_with(|| format!("writing {}", path.display()))?;
        frames.push(name);
    }
    let raw = format!("{stem}.raw");
    let bytes: Vec<u8> = z.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let raw_path = dir.join(&raw);
    fs::write(&raw_path, bytes).context_with(|| format!("writing {}", raw_path.display()))?;
    let manifest = VideoManifest {
        shape: [n, c, h, w],
        dtype: RAW_FORMAT.into(),
        raw,
        channel,
        range,
        frames,
    };
    let mpath = manifest_path(dir, stem);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).context_with(|| format!("writing {}", mpath.display()))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

/// Reads a video written by [`export_video`] from its manifest path.
pub fn load_video(manifest: &Path) -> Result<LatentVideo> {
    let text = fs::read_to_string(manifest).context_with(|| format!("reading {}", manifest.display()))?;
    let m: VideoManifest = serde_json::from_str(&text).context_with(|| format!("parsing {}", manifest.display()))?;
    if m.dtype != RAW_FORMAT {
        return Err(Error::Config(format!("unsupported raw dtype `{}`", m.dtype)));
    }
    let raw = manifest.parent().unwrap_or(Path::new(".")).join(&m.raw);
    let bytes = fs::read(&raw).context_with(|| format!("reading {}", raw.display()))?;
    let count: usize = m.shape.iter().product();
    if bytes.len() != count * 4 {
        return Err(Error::shape("raw video size", count * 4, bytes.len()));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let [n, c, h, w] = m.shape;
    LatentVideo::from_shape_vec((n, c, h, w), values).map_err(|e| Error::Config(format!("raw video shape: {e}")))
}
