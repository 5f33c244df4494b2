//! Temporally sharded clip generation: shard planning, per-shard guided
//! reverse diffusion with tail re-anchoring, block-matching flow, and
//! flow-assisted cross-fade blending of the overlaps.
//!
//! All randomness comes from per-shard named streams of the request seed,
//! so a clip is reproducible shard by shard and the single-shard path is
//! bit-identical to unsharded generation.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::perceptual_proxy;
use crate::model::VideoDit;
use crate::rng::StreamRng;
use crate::schedule::{
    cfg_combine, ddpm_reverse_step, forward_noise_closed, strided_timesteps, sub_schedule,
    NoiseSchedule,
};
use crate::tensor::{no_grad, Tensor};

/// Block size of the flow estimator.
pub const FLOW_BLOCK: usize = 4;

/// Search radius (pixels, per axis) of the flow estimator.
pub const FLOW_SEARCH: isize = 3;

/// How the target frame range is split into overlapping shard intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardPlan {
    pub total_frames: usize,
    /// Half-open `[start, end)` intervals, in temporal order.
    pub intervals: Vec<(usize, usize)>,
    pub overlap: usize,
    /// Incoming-shard blend weight per overlap position; the outgoing
    /// shard's weight is `1 − w`, so the pair partitions unity exactly.
    pub weights: Vec<f64>,
}

/// Splits `[0, total_frames)` into `k` intervals where consecutive ones
/// share exactly `overlap` frames. The base length is
/// `L = (total_frames + (k−1)·overlap) / k`; the first
/// `(total_frames + (k−1)·overlap) mod k` shards carry one extra frame.
///
/// `overlap` is only constrained when `k > 1`: it must fit strictly inside
/// every shard, and with three or more shards an interior shard's two
/// overlap regions (shared with its left and right neighbors) must not
/// collide with each other.
pub fn plan_shards(total_frames: usize, k: usize, overlap: usize) -> Result<ShardPlan> {
    if total_frames == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "plan_shards needs positive total_frames and shard count".into(),
        ));
    }
    let padded = total_frames + (k - 1) * overlap;
    let base = padded / k;
    let extra = padded % k;
    if k > 1 && overlap >= base {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} does not fit inside shards of length {base}"
        )));
    }
    let mut intervals = Vec::with_capacity(k);
    let mut start = 0usize;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        intervals.push((start, start + len));
        start += len - if i + 1 < k { overlap } else { 0 };
    }
    debug_assert_eq!(intervals.last().expect("k >= 1").1, total_frames);
    for i in 1..k.saturating_sub(1) {
        if intervals[i - 1].1 > intervals[i + 1].0 {
            return Err(Error::InvalidArgument(format!(
                "overlap {overlap} makes the regions shared by shard {i} with both \
                 neighbors collide"
            )));
        }
    }
    let weights = (0..overlap)
        .map(|i| (i + 1) as f64 / (overlap + 1) as f64)
        .collect();
    Ok(ShardPlan {
        total_frames,
        intervals,
        overlap,
        weights,
    })
}

/// Everything one generation run needs.
#[derive(Debug, Clone)]
pub struct GenRequest {
    /// Clean conditioning image, `(c, h, w)` in `[-1, 1]`.
    pub first_frame: Tensor<f32>,
    pub caption_ids: Vec<u32>,
    pub num_frames: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub shards: usize,
    pub overlap: usize,
    pub fps: u32,
}

impl GenRequest {
    /// A request with the operating-point defaults: guidance 3.8, 30
    /// denoising steps, 2 shards with a 4-frame overlap, 24 fps.
    pub fn new(first_frame: Tensor<f32>, caption_ids: Vec<u32>, num_frames: usize, seed: u64) -> Self {
        GenRequest {
            first_frame,
            caption_ids,
            num_frames,
            cfg_scale: 3.8,
            steps: 30,
            seed,
            shards: 2,
            overlap: 4,
            fps: 24,
        }
    }

    fn validate(&self, model: &VideoDit<f32>) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::InvalidArgument("num_frames must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if self.cfg_scale < 0.0 || !self.cfg_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cfg_scale must be finite and non-negative, got {}",
                self.cfg_scale
            )));
        }
        if self.fps == 0 {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        let plan = plan_shards(self.num_frames, self.shards, self.overlap)?;
        let max_frames = model.config().max_frames;
        for &(s, e) in &plan.intervals {
            if e - s > max_frames {
                return Err(Error::InvalidArgument(format!(
                    "shard of {} frames exceeds the model's max_frames {max_frames}",
                    e - s
                )));
            }
        }
        Ok(())
    }
}

/// Block-level displacement field from one frame to another.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub block: usize,
    pub blocks_y: usize,
    pub blocks_x: usize,
    /// `(dy, dx)` per block, row-major.
    pub vectors: Vec<(i32, i32)>,
}

/// For each `block`×`block` tile of `a`, the integer displacement within
/// `±search` that minimizes the sum of absolute differences against `b`
/// (summed over channels). Candidates that would leave the frame are
/// skipped; ties go to the smallest displacement magnitude, then to
/// lexicographic `(dy, dx)`.
pub fn estimate_flow(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    block: usize,
    search: isize,
) -> Result<FlowField> {
    let shape = a.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "estimate_flow expects (c, h, w) frames, got {shape:?}"
        )));
    }
    if b.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "estimate_flow",
            details: format!("{shape:?} vs {:?}", b.shape()),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::InvalidArgument(format!(
            "block size {block} must divide the {h}x{w} frame"
        )));
    }
    if search < 0 {
        return Err(Error::InvalidArgument("search radius must be non-negative".into()));
    }
    let (blocks_y, blocks_x) = (h / block, w / block);
    let av = a.to_vec();
    let bv = b.to_vec();
    let at = |v: &[f32], ch: usize, y: usize, x: usize| v[(ch * h + y) * w + x] as f64;

    let mut vectors = Vec::with_capacity(blocks_y * blocks_x);
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let (y0, x0) = (by * block, bx * block);
            let mut best: Option<(f64, i64, (i32, i32))> = None;
            for dy in -search..=search {
                let ty = y0 as isize + dy;
                if ty < 0 || ty + block as isize > h as isize {
                    continue;
                }
                for dx in -search..=search {
                    let tx = x0 as isize + dx;
                    if tx < 0 || tx + block as isize > w as isize {
                        continue;
                    }
                    let mut sad = 0.0;
                    for ch in 0..c {
                        for yy in 0..block {
                            for xx in 0..block {
                                let va = at(&av, ch, y0 + yy, x0 + xx);
                                let vb = at(&bv, ch, ty as usize + yy, tx as usize + xx);
                                sad += (va - vb).abs();
                            }
                        }
                    }
                    let mag = (dy * dy + dx * dx) as i64;
                    let candidate = (sad, mag, (dy as i32, dx as i32));
                    let better = match &best {
                        None => true,
                        Some((bs, bm, bv)) => {
                            sad < *bs
                                || (sad == *bs && mag < *bm)
                                || (sad == *bs && mag == *bm && candidate.2 < *bv)
                        }
                    };
                    if better {
                        best = Some(candidate);
                    }
                }
            }
            vectors.push(best.expect("zero displacement is always a candidate").2);
        }
    }
    Ok(FlowField {
        block,
        blocks_y,
        blocks_x,
        vectors,
    })
}

/// Nearest-pixel pull-warp of `frame` by `flow` scaled by `scale`: each
/// output pixel samples `frame` at its own position minus the (rounded)
/// scaled displacement of its block, clamped to the frame.
fn warp_by_flow(frame: &Tensor<f32>, flow: &FlowField, scale: f64) -> Result<Tensor<f32>> {
    let shape = frame.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if flow.blocks_y * flow.block != h || flow.blocks_x * flow.block != w {
        return Err(Error::ShapeMismatch {
            op: "warp_by_flow",
            details: format!(
                "flow grid {}x{} of {} px blocks does not tile a {h}x{w} frame",
                flow.blocks_y, flow.blocks_x, flow.block
            ),
        });
    }
    let src = frame.to_vec();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = flow.vectors[(y / flow.block) * flow.blocks_x + x / flow.block];
            let sy = (y as isize - (dy as f64 * scale).round() as isize).clamp(0, h as isize - 1);
            let sx = (x as isize - (dx as f64 * scale).round() as isize).clamp(0, w as isize - 1);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Cross-fades the overlap: at position `i`, `incoming` is warped toward
/// `outgoing` by its flow scaled by `1 − w_i`, then blended as
/// `outgoing + w_i·(warped − outgoing)` (exact at equal inputs).
pub fn blend_overlap(
    outgoing: &[Tensor<f32>],
    incoming: &[Tensor<f32>],
    weights: &[f64],
    flows: &[FlowField],
) -> Result<Vec<Tensor<f32>>> {
    if outgoing.len() != incoming.len()
        || outgoing.len() != weights.len()
        || outgoing.len() != flows.len()
    {
        return Err(Error::InvalidArgument(format!(
            "blend_overlap counts disagree: {} outgoing, {} incoming, {} weights, {} flows",
            outgoing.len(),
            incoming.len(),
            weights.len(),
            flows.len()
        )));
    }
    outgoing
        .iter()
        .zip(incoming)
        .zip(weights)
        .zip(flows)
        .map(|(((out_f, in_f), &w), flow)| {
            if in_f.shape() != out_f.shape() {
                return Err(Error::ShapeMismatch {
                    op: "blend_overlap",
                    details: format!("{:?} vs {:?}", out_f.shape(), in_f.shape()),
                });
            }
            let warped = warp_by_flow(in_f, flow, 1.0 - w)?;
            let delta = warped.sub(out_f)?;
            out_f.add(&delta.scale(w as f32))
        })
        .collect()
}

/// Frame `i` of a `(frames, c, h, w)` clip as a fresh `(c, h, w)` tensor.
fn clip_frame(clip: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let shape = clip.shape();
    let stride: usize = shape[1..].iter().product();
    let data = clip.with_data(|d| d[i * stride..(i + 1) * stride].to_vec());
    Tensor::from_vec(&shape[1..], data)
}

/// Stacks equal-shape `(c, h, w)` frames into a `(frames, c, h, w)` clip.
fn stack_frames(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero frames".into()))?;
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(frames.len() * first.numel());
    for f in frames {
        f.with_data(|d| data.extend_from_slice(d));
    }
    Tensor::from_vec(&shape, data)
}

/// The last `n` frames of a clip as a `(n, c, h, w)` tensor.
fn clip_tail(clip: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    let shape = clip.shape().to_vec();
    let stride: usize = shape[1..].iter().product();
    let frames = shape[0];
    let data = clip.with_data(|d| d[(frames - n) * stride..].to_vec());
    let mut out_shape = shape;
    out_shape[0] = n;
    Tensor::from_vec(&out_shape, data)
}

/// A fresh standard-normal tensor of `shape`.
fn normal_tensor(shape: &[usize], rng: &mut StreamRng) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
    Tensor::from_vec(shape, data)
}

/// Replaces the first `head.shape()[0]` frames of `clip` with `head`.
fn replace_head_frames(clip: &Tensor<f32>, head: &Tensor<f32>) -> Result<Tensor<f32>> {
    let stride: usize = clip.shape()[1..].iter().product();
    let n = head.shape()[0];
    let mut data = clip.to_vec();
    head.with_data(|h| data[..n * stride].copy_from_slice(h));
    Tensor::from_vec(clip.shape(), data)
}

/// Runs the guided reverse chain for one shard interval.
///
/// `init_noise` must be the `(len, c, h, w)` draw from the request seed's
/// stream for `shard_index` (the caller owns the draw so a full clip is
/// reproducible shard by shard). When `prev_tail` holds the previous
/// shard's final `overlap` clean frames, the first `overlap` latents are
/// re-anchored at every step by forward-noising that tail to the current
/// timestep, keeping the shared region structurally consistent before the
/// final cross-fade.
pub fn generate_shard(
    model: &VideoDit<f32>,
    request: &GenRequest,
    interval: (usize, usize),
    shard_index: usize,
    init_noise: &Tensor<f32>,
    prev_tail: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let _guard = no_grad();
    let (start, end) = interval;
    if start >= end || end > request.num_frames {
        return Err(Error::InvalidArgument(format!(
            "shard interval [{start}, {end}) outside the requested {} frames",
            request.num_frames
        )));
    }
    let len = end - start;
    let geo = model.config();
    let want = [len, geo.channels, geo.frame_height, geo.frame_width];
    if init_noise.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "generate_shard",
            details: format!("init noise {:?}, expected {want:?}", init_noise.shape()),
        });
    }
    if let Some(tail) = prev_tail {
        if tail.shape()[0] != request.overlap || tail.shape()[1..] != want[1..] {
            return Err(Error::ShapeMismatch {
                op: "generate_shard",
                details: format!(
                    "prev_tail {:?}, expected ({}, {:?})",
                    tail.shape(),
                    request.overlap,
                    &want[1..]
                ),
            });
        }
    }

    let caption = model.encode_caption(&request.caption_ids)?;
    let null = model.null_caption()?;
    let schedule = NoiseSchedule::linear(geo.t_diff, 1e-4, 0.02)?;
    let taus = strided_timesteps(geo.t_diff, request.steps)?;
    let sub = sub_schedule(&schedule, &taus)?;
    let mut step_rng = StreamRng::new(request.seed, &format!("gen/step/{shard_index}"));
    let mut anchor_rng = StreamRng::new(request.seed, &format!("gen/anchor/{shard_index}"));

    let mut x = init_noise.clone();
    for j in (0..taus.len()).rev() {
        let t = taus[j];
        if let Some(tail) = prev_tail {
            let eps = normal_tensor(tail.shape(), &mut anchor_rng)?;
            let noised = forward_noise_closed(tail, t, &eps, &schedule)?;
            x = replace_head_frames(&x, &noised)?;
        }
        let eps_cond = model.denoise(&x, t, &caption, &request.first_frame)?;
        let eps_uncond = model.denoise(&x, t, &null, &request.first_frame)?;
        let eps_hat = cfg_combine(&eps_cond, &eps_uncond, request.cfg_scale)?;
        let z = if j > 0 {
            Some(normal_tensor(x.shape(), &mut step_rng)?)
        } else {
            None
        };
        x = ddpm_reverse_step(&x, &eps_hat, j, z.as_ref(), &sub)?;
    }
    Ok(x)
}

/// What one generation run reports alongside its frames.
#[derive(Debug, Clone, Serialize)]
pub struct GenReport {
    pub plan: ShardPlan,
    pub seed: u64,
    pub per_shard_ms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
}

/// How far a sharded clip strays from its single-shard reference.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Divergence {
    /// Mean absolute pixel difference over the whole clip, `[-1, 1]` units.
    pub mean_abs: f64,
    /// Perceptual-proxy distance between the two clips.
    pub perceptual: f64,
}

impl GenReport {
    /// The report as a compact JSON string.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Writes the report as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Generates the full clip: plan, per-shard reverse diffusion chained by
/// tail anchoring, flow-assisted blending of each overlap, and assembly.
/// Returns the `(num_frames, c, h, w)` clip and the run report.
pub fn generate_full(
    model: &VideoDit<f32>,
    request: &GenRequest,
) -> Result<(Tensor<f32>, GenReport)> {
    request.validate(model)?;
    let plan = plan_shards(request.num_frames, request.shards, request.overlap)?;
    let geo = model.config();
    let frame_shape = [geo.channels, geo.frame_height, geo.frame_width];

    // Per-shard generation, chained through the overlap tails.
    let mut outputs: Vec<Tensor<f32>> = Vec::with_capacity(plan.intervals.len());
    let mut per_shard_ms = Vec::with_capacity(plan.intervals.len());
    for (i, &(start, end)) in plan.intervals.iter().enumerate() {
        let started = Instant::now();
        let mut shape = vec![end - start];
        shape.extend_from_slice(&frame_shape);
        let init = normal_tensor(&shape, &mut StreamRng::new(request.seed, &format!("gen/init/{i}")))?;
        let prev_tail = if i > 0 && plan.overlap > 0 {
            Some(clip_tail(&outputs[i - 1], plan.overlap)?)
        } else {
            None
        };
        let frames = generate_shard(model, request, (start, end), i, &init, prev_tail.as_ref())?;
        per_shard_ms.push(started.elapsed().as_secs_f64() * 1e3);
        outputs.push(frames);
    }

    // Assemble: every frame from its shard, overlaps replaced by blends.
    let mut assembled: Vec<Option<Tensor<f32>>> = vec![None; request.num_frames];
    for (&(start, end), frames) in plan.intervals.iter().zip(&outputs) {
        for idx in start..end {
            assembled[idx] = Some(clip_frame(frames, idx - start)?);
        }
    }
    for pair in 0..plan.intervals.len().saturating_sub(1) {
        if plan.overlap == 0 {
            break;
        }
        let (out_start, out_end) = plan.intervals[pair];
        let (in_start, _) = plan.intervals[pair + 1];
        let outgoing: Vec<Tensor<f32>> = (in_start..out_end)
            .map(|idx| clip_frame(&outputs[pair], idx - out_start))
            .collect::<Result<_>>()?;
        let incoming: Vec<Tensor<f32>> = (in_start..out_end)
            .map(|idx| clip_frame(&outputs[pair + 1], idx - in_start))
            .collect::<Result<_>>()?;
        let flows: Vec<FlowField> = incoming
            .iter()
            .zip(&outgoing)
            .map(|(inc, out)| estimate_flow(inc, out, FLOW_BLOCK, FLOW_SEARCH))
            .collect::<Result<_>>()?;
        let blended = blend_overlap(&outgoing, &incoming, &plan.weights, &flows)?;
        for (offset, frame) in blended.into_iter().enumerate() {
            assembled[in_start + offset] = Some(frame);
        }
    }
    let frames: Vec<Tensor<f32>> = assembled
        .into_iter()
        .map(|f| f.expect("plan covers every frame"))
        .collect();
    let clip = stack_frames(&frames)?;
    Ok((
        clip,
        GenReport {
            plan,
            seed: request.seed,
            per_shard_ms,
            divergence: None,
        },
    ))
}

/// Re-runs `request` as a single shard and measures how far the already
/// generated `sharded` clip strays from that reference.
pub fn divergence_vs_single(
    model: &VideoDit<f32>,
    request: &GenRequest,
    sharded: &Tensor<f32>,
) -> Result<Divergence> {
    let single = GenRequest {
        shards: 1,
        ..request.clone()
    };
    let (reference, _) = generate_full(model, &single)?;
    if sharded.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "divergence_vs_single",
            details: format!("{:?} vs {:?}", sharded.shape(), reference.shape()),
        });
    }
    let mean_abs = sharded.with_data(|a| {
        reference.with_data(|b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>()
                / a.len() as f64
        })
    });
    Ok(Divergence {
        mean_abs,
        perceptual: perceptual_proxy(sharded, &reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn plan_matches_the_default_operating_point() {
        let plan = plan_shards(96, 2, 4).unwrap();
        assert_eq!(plan.intervals, vec![(0, 50), (46, 96)]);
        assert_eq!(plan.weights, vec![0.2, 0.4, 0.6, 0.8]);
        for &w in &plan.weights {
            assert_eq!(w + (1.0 - w), 1.0, "partition of unity at each position");
        }
    }

    #[test]
    fn degenerate_and_uneven_plans() {
        let single = plan_shards(96, 1, 4).unwrap();
        assert_eq!(single.intervals, vec![(0, 96)]);

        // 97 frames over two shards: the first gets the extra frame.
        let uneven = plan_shards(97, 2, 4).unwrap();
        assert_eq!(uneven.intervals, vec![(0, 51), (47, 97)]);

        assert!(plan_shards(0, 2, 4).is_err());
        assert!(plan_shards(10, 0, 4).is_err());
        // overlap must fit strictly inside a shard when k > 1.
        assert!(plan_shards(8, 2, 7).is_err());
        // An interior shard's two overlap regions must not collide …
        assert!(plan_shards(12, 3, 4).is_err());
        // … though touching exactly is fine: [0,8), [4,12), [8,15).
        let touching = plan_shards(15, 3, 4).unwrap();
        assert_eq!(touching.intervals, vec![(0, 8), (4, 12), (8, 15)]);
    }

    proptest! {
        #[test]
        fn plans_cover_without_gaps(total in 1usize..=256, k in 1usize..=5, overlap in 0usize..=8) {
            let plan = match plan_shards(total, k, overlap) {
                Ok(p) => p,
                Err(_) => return Ok(()), // infeasible combination, correctly rejected
            };
            prop_assert_eq!(plan.intervals.len(), k);
            prop_assert_eq!(plan.intervals[0].0, 0);
            prop_assert_eq!(plan.intervals.last().unwrap().1, total);
            for w in plan.intervals.windows(2) {
                let ((s0, e0), (s1, e1)) = (w[0], w[1]);
                prop_assert!(s0 < e0 && s1 < e1);
                prop_assert_eq!(e0 - s1, overlap, "consecutive overlap must be exact");
                prop_assert!(s1 > s0 && e1 > e0);
            }
            for w in plan.intervals.windows(3) {
                prop_assert!(
                    w[0].1 <= w[2].0,
                    "a middle shard's two overlap regions must not collide"
                );
            }
            prop_assert_eq!(plan.weights.len(), overlap);
        }
    }

    fn coordinate_frame(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = StreamRng::new(seed, "flow/frame");
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.normal() as f32).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn flow_is_zero_for_identical_and_flat_frames() {
        let a = coordinate_frame(3, 8, 8, 1);
        let flow = estimate_flow(&a, &a, FLOW_BLOCK, FLOW_SEARCH).unwrap();
        assert!(flow.vectors.iter().all(|&v| v == (0, 0)));

        let flat = Tensor::from_vec(&[3, 8, 8], vec![0.25; 192]).unwrap();
        let other = Tensor::from_vec(&[3, 8, 8], vec![0.75; 192]).unwrap();
        let flow = estimate_flow(&flat, &other, FLOW_BLOCK, FLOW_SEARCH).unwrap();
        assert!(
            flow.vectors.iter().all(|&v| v == (0, 0)),
            "ties must resolve to zero displacement"
        );
    }

    #[test]
    fn flow_recovers_a_pure_translation() {
        let a = coordinate_frame(1, 8, 16, 2);
        // b is a shifted right by 2: b(y, x) = a(y, x−2).
        let av = a.to_vec();
        let mut bv = vec![0.0f32; av.len()];
        for y in 0..8 {
            for x in 0..16 {
                let sx = x as isize - 2;
                if (0..16).contains(&sx) {
                    bv[y * 16 + x] = av[y * 16 + sx as usize];
                }
            }
        }
        let b = Tensor::from_vec(&[1, 8, 16], bv).unwrap();
        let flow = estimate_flow(&a, &b, FLOW_BLOCK, FLOW_SEARCH).unwrap();
        // Interior blocks (not touching the right edge wrap-off) see (0, 2).
        for by in 0..flow.blocks_y {
            for bx in 0..flow.blocks_x - 1 {
                assert_eq!(
                    flow.vectors[by * flow.blocks_x + bx],
                    (0, 2),
                    "block ({by}, {bx})"
                );
            }
        }
    }

    #[test]
    fn flow_preconditions() {
        let a = coordinate_frame(1, 8, 8, 3);
        let b = coordinate_frame(1, 8, 12, 3);
        assert!(estimate_flow(&a, &b, 4, 3).is_err());
        assert!(estimate_flow(&a, &a, 3, 3).is_err(), "block must divide dims");
        assert!(estimate_flow(&a, &a, 0, 3).is_err());
    }

    #[test]
    fn blending_equal_frames_is_the_identity() {
        let f = coordinate_frame(3, 8, 8, 4);
        let flows = vec![estimate_flow(&f, &f, FLOW_BLOCK, FLOW_SEARCH).unwrap(); 2];
        let out = blend_overlap(
            &[f.clone(), f.clone()],
            &[f.clone(), f.clone()],
            &[0.2, 0.8],
            &flows,
        )
        .unwrap();
        for blended in out {
            assert_eq!(blended.to_vec(), f.to_vec(), "identity must be exact");
        }
    }

    #[test]
    fn blending_constants_is_the_stated_convex_combination() {
        let zeros = Tensor::from_vec(&[1, 4, 4], vec![0.0; 16]).unwrap();
        let ones = Tensor::from_vec(&[1, 4, 4], vec![1.0; 16]).unwrap();
        let zero_flow = FlowField {
            block: 4,
            blocks_y: 1,
            blocks_x: 1,
            vectors: vec![(0, 0)],
        };
        let out = blend_overlap(&[zeros], &[ones], &[0.5], &[zero_flow]).unwrap();
        assert!(out[0].to_vec().iter().all(|&v| v == 0.5));

        let a = coordinate_frame(1, 4, 4, 5);
        assert!(blend_overlap(&[a], &[], &[], &[]).is_err());
    }

    /// Geometry for generation tests: 16x16 frames, short horizon.
    fn gen_model() -> VideoDit<f32> {
        let config = ModelConfig {
            frame_height: 16,
            frame_width: 16,
            max_frames: 12,
            max_caption_len: 16,
            ..tiny_config()
        };
        VideoDit::new(config, 321).unwrap()
    }

    fn small_request(model: &VideoDit<f32>) -> GenRequest {
        let geo = model.config();
        let first = coordinate_frame(geo.channels, geo.frame_height, geo.frame_width, 6);
        GenRequest {
            num_frames: 8,
            cfg_scale: 2.0,
            steps: 3,
            seed: 99,
            shards: 2,
            overlap: 2,
            fps: 24,
            ..GenRequest::new(first, vec![3, 5, 8], 8, 99)
        }
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let model = gen_model();
        let request = small_request(&model);
        let (clip_a, report) = generate_full(&model, &request).unwrap();
        let (clip_b, _) = generate_full(&model, &request).unwrap();
        assert_eq!(clip_a.shape(), &[8, 3, 16, 16]);
        assert_eq!(clip_a.to_vec(), clip_b.to_vec(), "same request, same clip");
        assert_eq!(report.plan.intervals, vec![(0, 5), (3, 8)]);
        assert_eq!(report.per_shard_ms.len(), 2);
        assert!(clip_a.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_shard_run_equals_a_direct_shard_call() {
        let model = gen_model();
        let request = GenRequest {
            shards: 1,
            ..small_request(&model)
        };
        let (full, report) = generate_full(&model, &request).unwrap();
        assert_eq!(report.plan.intervals, vec![(0, 8)]);

        let geo = model.config();
        let init = normal_tensor(
            &[8, geo.channels, geo.frame_height, geo.frame_width],
            &mut StreamRng::new(request.seed, "gen/init/0"),
        )
        .unwrap();
        let direct = generate_shard(&model, &request, (0, 8), 0, &init, None).unwrap();
        assert_eq!(full.to_vec(), direct.to_vec(), "degenerate paths must agree bitwise");
    }

    #[test]
    fn divergence_between_sharded_and_single_is_measured() {
        let model = gen_model();
        let request = small_request(&model);
        let (sharded, _) = generate_full(&model, &request).unwrap();
        let d = divergence_vs_single(&model, &request, &sharded).unwrap();
        assert!(d.mean_abs.is_finite() && d.mean_abs >= 0.0);
        assert!(d.perceptual.is_finite() && d.perceptual >= 0.0);
        // An untrained model still produces different shard outputs, so the
        // divergence is generically positive.
        assert!(d.mean_abs > 0.0);
    }

    #[test]
    fn requests_are_validated() {
        let model = gen_model();
        let ok = small_request(&model);
        assert!(generate_full(&model, &GenRequest { num_frames: 0, ..ok.clone() }).is_err());
        assert!(generate_full(&model, &GenRequest { steps: 0, ..ok.clone() }).is_err());
        assert!(generate_full(&model, &GenRequest { cfg_scale: -1.0, ..ok.clone() }).is_err());
        // 20-frame single shard exceeds max_frames 12.
        assert!(generate_full(
            &model,
            &GenRequest { num_frames: 20, shards: 1, ..ok.clone() }
        )
        .is_err());
        // Interval outside the request is rejected by generate_shard.
        let geo = model.config();
        let init = normal_tensor(
            &[4, geo.channels, geo.frame_height, geo.frame_width],
            &mut StreamRng::new(1, "gen/init/0"),
        )
        .unwrap();
        assert!(generate_shard(&model, &ok, (6, 10), 0, &init, None).is_err());

        let report = GenReport {
            plan: plan_shards(8, 2, 2).unwrap(),
            seed: 1,
            per_shard_ms: vec![1.0, 2.0],
            divergence: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc["plan"]["intervals"][1][0].as_u64(), Some(3));
        assert!(doc.get("divergence").is_none());
    }
}
