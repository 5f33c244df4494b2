//! Evaluation metrics for generated clips: a multi-scale perceptual proxy,
//! a temporal-stability score, and a style-distance measure.
//!
//! All three are deliberately simple, deterministic statistics — no
//! pretrained networks — so they can anchor validation, early stopping and
//! acceptance thresholds reproducibly. Clips are `(frames, channels, h, w)`
//! tensors in `[-1, 1]`; computation happens in `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::frame::CHANNELS;
use crate::data::generator::{calibration_frames, StyleSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gaussian pyramid depth used by the perceptual proxy.
pub const PYRAMID_LEVELS: usize = 3;

/// Per-axis cell count of the patch grid at every pyramid level.
pub const CELL_GRID: usize = 4;

/// Bin count of the luminance histogram inside the style feature.
pub const LUMA_BINS: usize = 8;

/// Fixed 5-tap binomial blur kernel (recorded for bit-stability).
const BLUR_KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// One channel plane as `f64` rows.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Pulls frame `t`, channel `c` out of a `(frames, channels, h, w)` tensor.
fn plane_of<E: Scalar>(clip: &Tensor<E>, t: usize, c: usize) -> Plane {
    let shape = clip.shape();
    let (h, w) = (shape[2], shape[3]);
    let base = ((t * shape[1]) + c) * h * w;
    let data = clip.with_data(|d| {
        d[base..base + h * w]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect()
    });
    Plane { h, w, data }
}

/// Separable 5-tap binomial blur with edge replication, then 2x decimation
/// keeping even indices.
fn downsample(src: &Plane) -> Plane {
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    // Horizontal pass.
    let mut hpass = vec![0.0; src.h * src.w];
    for y in 0..src.h {
        for x in 0..src.w {
            let mut acc = 0.0;
            for (k, &kv) in BLUR_KERNEL.iter().enumerate() {
                let sx = clamp(x as isize + k as isize - 2, src.w);
                acc += kv * src.at(y, sx);
            }
            hpass[y * src.w + x] = acc;
        }
    }
    // Vertical pass.
    let mut blurred = vec![0.0; src.h * src.w];
    for y in 0..src.h {
        for x in 0..src.w {
            let mut acc = 0.0;
            for (k, &kv) in BLUR_KERNEL.iter().enumerate() {
                let sy = clamp(y as isize + k as isize - 2, src.h);
                acc += kv * hpass[sy * src.w + x];
            }
            blurred[y * src.w + x] = acc;
        }
    }
    let (oh, ow) = (src.h.div_ceil(2), src.w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push(blurred[(2 * y) * src.w + 2 * x]);
        }
    }
    Plane {
        h: oh,
        w: ow,
        data: out,
    }
}

/// Per-cell (mean, std) over a `CELL_GRID x CELL_GRID` partition of the
/// plane, row-major cell order.
fn cell_stats(plane: &Plane, out: &mut Vec<f64>) {
    for cy in 0..CELL_GRID {
        let y0 = cy * plane.h / CELL_GRID;
        let y1 = (cy + 1) * plane.h / CELL_GRID;
        for cx in 0..CELL_GRID {
            let x0 = cx * plane.w / CELL_GRID;
            let x1 = (cx + 1) * plane.w / CELL_GRID;
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = plane.at(y, x);
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            out.push(mean);
            out.push(var.sqrt());
        }
    }
}

/// The full multi-scale feature vector of one frame: per pyramid level,
/// per channel, per cell (mean, std). Levels are concatenated in order.
fn frame_features<E: Scalar>(clip: &Tensor<E>, t: usize) -> Vec<Vec<f64>> {
    let channels = clip.shape()[1];
    let mut planes: Vec<Plane> = (0..channels).map(|c| plane_of(clip, t, c)).collect();
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            planes = planes.iter().map(downsample).collect();
        }
        let mut feat = Vec::with_capacity(channels * CELL_GRID * CELL_GRID * 2);
        for plane in &planes {
            cell_stats(plane, &mut feat);
        }
        levels.push(feat);
    }
    levels
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_clip_shape<E: Scalar>(clip: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected a (frames, channels, h, w) clip, got shape {shape:?}"
        )));
    }
    let min_side = CELL_GRID << (PYRAMID_LEVELS - 1);
    if shape[2] < min_side || shape[3] < min_side {
        return Err(Error::InvalidArgument(format!(
            "frames must be at least {min_side}x{min_side} for {PYRAMID_LEVELS} pyramid levels, got {}x{}",
            shape[2], shape[3]
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Multi-scale perceptual distance between two clips of identical shape:
/// per frame, the L2 distance between cell-statistic features averaged
/// across pyramid levels; the clip value is the mean over frames.
pub fn perceptual_proxy<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    Ok(mean(&perceptual_proxy_per_frame(a, b)?))
}

/// Per-frame breakdown of [`perceptual_proxy`].
pub fn perceptual_proxy_per_frame<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Vec<f64>> {
    let (frames, ..) = check_clip_shape(a)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "perceptual_proxy",
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok((0..frames)
        .map(|t| {
            let fa = frame_features(a, t);
            let fb = frame_features(b, t);
            let level_mean: f64 = fa
                .iter()
                .zip(&fb)
                .map(|(la, lb)| l2(la, lb))
                .sum::<f64>()
                / fa.len() as f64;
            level_mean
        })
        .collect())
}

/// Mean over adjacent frame pairs of the element-averaged squared
/// difference. The first axis is time; any trailing shape is allowed.
pub fn temporal_stability<E: Scalar>(clip: &Tensor<E>) -> Result<f64> {
    Ok(mean(&temporal_stability_per_pair(clip)?))
}

/// Per-adjacent-pair breakdown of [`temporal_stability`].
pub fn temporal_stability_per_pair<E: Scalar>(clip: &Tensor<E>) -> Result<Vec<f64>> {
    let shape = clip.shape();
    if shape.is_empty() || shape[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal stability needs at least 2 frames, got shape {shape:?}"
        )));
    }
    let frames = shape[0];
    let stride: usize = shape[1..].iter().product();
    Ok(clip.with_data(|d| {
        (0..frames - 1)
            .map(|t| {
                let cur = &d[t * stride..(t + 1) * stride];
                let next = &d[(t + 1) * stride..(t + 2) * stride];
                cur.iter()
                    .zip(next)
                    .map(|(a, b)| {
                        let diff = b.to_f64_lossy() - a.to_f64_lossy();
                        diff * diff
                    })
                    .sum::<f64>()
                    / stride as f64
            })
            .collect()
    }))
}

/// Tone-statistic feature of a set of planar `[0, 1]` frames: per-channel
/// mean (3), per-channel std (3), and a normalized 8-bin luminance
/// histogram (8).
fn tone_features(frames: &[Vec<f64>], h: usize, w: usize) -> Vec<f64> {
    let pixels = h * w;
    let mut means = [0.0f64; CHANNELS];
    let mut vars = [0.0f64; CHANNELS];
    let mut hist = [0.0f64; LUMA_BINS];
    let total = (frames.len() * pixels) as f64;
    for frame in frames {
        for c in 0..CHANNELS {
            for v in &frame[c * pixels..(c + 1) * pixels] {
                means[c] += v;
                vars[c] += v * v;
            }
        }
        for p in 0..pixels {
            let lum = (0..CHANNELS).map(|c| frame[c * pixels + p]).sum::<f64>() / CHANNELS as f64;
            let bin = ((lum * LUMA_BINS as f64) as usize).min(LUMA_BINS - 1);
            hist[bin] += 1.0;
        }
    }
    let mut feat = Vec::with_capacity(CHANNELS * 2 + LUMA_BINS);
    for c in 0..CHANNELS {
        feat.push(means[c] / total);
    }
    for c in 0..CHANNELS {
        let mean = means[c] / total;
        feat.push((vars[c] / total - mean * mean).max(0.0).sqrt());
    }
    for bin in hist {
        feat.push(bin / total);
    }
    feat
}

/// Distance between a clip's tone statistics and those of `style` applied
/// (grain-free) to the generator's canonical calibration frames at the
/// clip's own resolution. Clip values are mapped from `[-1, 1]` back to
/// pixel space before the statistics are taken.
pub fn style_distance<E: Scalar>(clip: &Tensor<E>, style: &StyleSpec) -> Result<f64> {
    let shape = clip.shape();
    if shape.len() != 4 || shape[1] != CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "expected a (frames, {CHANNELS}, h, w) clip, got shape {shape:?}"
        )));
    }
    let (frames, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pixels = CHANNELS * h * w;
    let clip_frames: Vec<Vec<f64>> = clip.with_data(|d| {
        (0..frames)
            .map(|t| {
                d[t * pixels..(t + 1) * pixels]
                    .iter()
                    .map(|v| ((v.to_f64_lossy() + 1.0) / 2.0).clamp(0.0, 1.0))
                    .collect()
            })
            .collect()
    });

    let mut reference = calibration_frames(h, w)?;
    for frame in &mut reference {
        style.apply(frame, None);
    }
    let ref_frames: Vec<Vec<f64>> = reference
        .iter()
        .map(|f| f.data().iter().map(|&v| v as f64).collect())
        .collect();

    Ok(l2(
        &tone_features(&clip_frames, h, w),
        &tone_features(&ref_frames, h, w),
    ))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Everything the evaluation command reports about one generated clip.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub perceptual_proxy: f64,
    pub temporal_stability: f64,
    pub style_distance: f64,
    /// Per-frame perceptual distances against the reference.
    pub per_frame_perceptual: Vec<f64>,
    /// Per-adjacent-pair stability terms.
    pub per_pair_stability: Vec<f64>,
    pub frames: usize,
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportDoc {
    perceptual_proxy: f64,
    temporal_stability: f64,
    style_distance: f64,
    frames: usize,
    config_digest: String,
}

impl MetricReport {
    /// Compares `clip` against a same-shape `reference` and the target
    /// `style`, keeping the per-frame breakdowns.
    pub fn evaluate<E: Scalar>(
        clip: &Tensor<E>,
        reference: &Tensor<E>,
        style: &StyleSpec,
        config_digest: &str,
    ) -> Result<Self> {
        let per_frame_perceptual = perceptual_proxy_per_frame(clip, reference)?;
        let per_pair_stability = temporal_stability_per_pair(clip)?;
        Ok(MetricReport {
            perceptual_proxy: mean(&per_frame_perceptual),
            temporal_stability: mean(&per_pair_stability),
            style_distance: style_distance(clip, style)?,
            frames: clip.shape()[0],
            per_frame_perceptual,
            per_pair_stability,
            config_digest: config_digest.to_string(),
        })
    }

    /// Writes the summary as `report.json` (breakdowns stay in memory).
    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ReportDoc {
            perceptual_proxy: self.perceptual_proxy,
            temporal_stability: self.temporal_stability,
            style_distance: self.style_distance,
            frames: self.frames,
            config_digest: self.config_digest.clone(),
        };
        let mut json = serde_json::to_string_pretty(&doc)?;
        json.push('\n');
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
