//! Procedural styled-clip generation.
//!
//! A scene is a vertical-gradient backdrop, a deterministic camera pan, and
//! one to three soft-edged geometric actors moving on straight tracks. Each
//! rendered frame then passes through a [`StyleSpec`] — tone curve, fog
//! compositing, vignette, film grain — so every lighting tag has a visually
//! distinct, measurable look. Everything is a pure function of the clip
//! seed, which is what makes byte-identical regeneration possible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::captions::{self, LightingTag};
use crate::data::frame::{letterbox, Frame, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Gain and gamma for one color channel: `v ↦ clamp(gain · v^gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTone {
    pub gain: f64,
    pub gamma: f64,
}

/// Fog is composited toward this bright haze color, which is what makes
/// foggier clips measurably brighter.
const HAZE: [f64; 3] = [0.75, 0.78, 0.82];

/// A deterministic per-frame style transform. Order of application: tone
/// curve, fog compositing, vignette, grain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub tone: [ChannelTone; 3],
    /// Corner darkening in `[0, 1]`; 0 disables.
    pub vignette_strength: f64,
    /// Standard deviation of additive Gaussian grain; 0 disables.
    pub grain_std: f64,
    /// Haze compositing weight in `[0, 1]`; 0 disables.
    pub fog_density: f64,
}

impl StyleSpec {
    /// The do-nothing style: unit tone, no vignette, no grain, no fog.
    pub fn identity() -> Self {
        StyleSpec {
            tone: [ChannelTone { gain: 1.0, gamma: 1.0 }; 3],
            vignette_strength: 0.0,
            grain_std: 0.0,
            fog_density: 0.0,
        }
    }

    /// The preset look for a lighting tag. Presets are deliberately far
    /// apart in tone space so the style metric can separate them.
    pub fn for_tag(tag: LightingTag) -> Self {
        match tag {
            LightingTag::Torch => StyleSpec {
                tone: [
                    ChannelTone { gain: 1.10, gamma: 0.90 },
                    ChannelTone { gain: 0.82, gamma: 1.05 },
                    ChannelTone { gain: 0.55, gamma: 1.20 },
                ],
                vignette_strength: 0.55,
                grain_std: 0.035,
                fog_density: 0.12,
            },
            LightingTag::Day => StyleSpec {
                tone: [
                    ChannelTone { gain: 1.06, gamma: 0.88 },
                    ChannelTone { gain: 1.04, gamma: 0.88 },
                    ChannelTone { gain: 1.00, gamma: 0.90 },
                ],
                vignette_strength: 0.05,
                grain_std: 0.008,
                fog_density: 0.0,
            },
            LightingTag::Fog => StyleSpec {
                tone: [
                    ChannelTone { gain: 0.96, gamma: 1.00 },
                    ChannelTone { gain: 0.98, gamma: 1.00 },
                    ChannelTone { gain: 1.00, gamma: 0.98 },
                ],
                vignette_strength: 0.10,
                grain_std: 0.020,
                fog_density: 0.55,
            },
            LightingTag::Night => StyleSpec {
                tone: [
                    ChannelTone { gain: 0.45, gamma: 1.30 },
                    ChannelTone { gain: 0.50, gamma: 1.25 },
                    ChannelTone { gain: 0.78, gamma: 1.10 },
                ],
                vignette_strength: 0.45,
                grain_std: 0.045,
                fog_density: 0.08,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tone.iter().enumerate() {
            if !(t.gain.is_finite() && t.gain > 0.0 && t.gamma.is_finite() && t.gamma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "tone curve channel {i} must have positive finite gain/gamma, got {t:?}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(Error::InvalidArgument(format!(
                "vignette_strength {} outside [0, 1]",
                self.vignette_strength
            )));
        }
        if !(self.grain_std.is_finite() && self.grain_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grain_std {} must be non-negative",
                self.grain_std
            )));
        }
        if !(0.0..=1.0).contains(&self.fog_density) {
            return Err(Error::InvalidArgument(format!(
                "fog_density {} outside [0, 1]",
                self.fog_density
            )));
        }
        Ok(())
    }

    /// Applies the style in place. `grain_rng` feeds the grain pass; pass
    /// `None` for the closed-form (grain-free) variant used by style
    /// calibration.
    pub fn apply(&self, frame: &mut Frame, mut grain_rng: Option<&mut StreamRng>) {
        let (h, w) = (frame.height(), frame.width());
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let r2_max = cy * cy + cx * cx;
        for c in 0..CHANNELS {
            let tone = self.tone[c];
            for y in 0..h {
                for x in 0..w {
                    let mut v = frame.get(c, y, x) as f64;
                    v = (tone.gain * v.powf(tone.gamma)).clamp(0.0, 1.0);
                    if self.fog_density > 0.0 {
                        v = v * (1.0 - self.fog_density) + HAZE[c] * self.fog_density;
                    }
                    if self.vignette_strength > 0.0 {
                        let dy = (y as f64 + 0.5) - cy;
                        let dx = (x as f64 + 0.5) - cx;
                        v *= 1.0 - self.vignette_strength * (dy * dy + dx * dx) / r2_max;
                    }
                    frame.set(c, y, x, v as f32);
                }
            }
        }
        if self.grain_std > 0.0 {
            if let Some(rng) = grain_rng.as_deref_mut() {
                for v in frame.data_mut().iter_mut() {
                    *v = (*v + (self.grain_std * rng.normal()) as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// One moving shape.
#[derive(Debug, Clone)]
struct Actor {
    /// 0 = disc, 1 = square.
    kind: usize,
    color: [f32; 3],
    /// Initial position and straight-line velocity, in normalized
    /// `[0, 1)` scene coordinates per frame.
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    /// Normalized radius / half-width.
    size: f64,
}

/// The unstyled scene: backdrop gradient, camera pan, actors.
#[derive(Debug, Clone)]
pub struct Scene {
    top: [f32; 3],
    bottom: [f32; 3],
    /// Horizontal camera pan in scene units per frame.
    pan: f64,
    actors: Vec<Actor>,
}

impl Scene {
    /// Draws all scene parameters from the `scene` stream of `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = StreamRng::new(seed, "scene");
        // Keep the backdrop in the dark-to-mid range so haze compositing
        // always brightens (the fog test relies on that headroom).
        let top = [0; 3].map(|_| (0.05 + 0.30 * rng.uniform()) as f32);
        let bottom = [0; 3].map(|_| (0.25 + 0.35 * rng.uniform()) as f32);
        let pan = (rng.uniform() - 0.5) * 0.016;
        let n_actors = 1 + rng.uniform_usize(3);
        let actors = (0..n_actors)
            .map(|_| Actor {
                kind: rng.uniform_usize(2),
                color: [0; 3].map(|_| (0.30 + 0.60 * rng.uniform()) as f32),
                cx: 0.2 + 0.6 * rng.uniform(),
                cy: 0.2 + 0.6 * rng.uniform(),
                vx: (rng.uniform() - 0.5) * 0.024,
                vy: (rng.uniform() - 0.5) * 0.024,
                size: 0.10 + 0.14 * rng.uniform(),
            })
            .collect();
        Scene { top, bottom, pan, actors }
    }

    pub fn actor_count(&self) -> usize {
        self.actors.len()
    }

    /// Renders frame `t` at the given resolution, unstyled.
    pub fn render(&self, t: usize, h: usize, w: usize) -> Result<Frame> {
        let mut frame = Frame::black(h, w)?;
        let t = t as f64;
        // Soft edge width: ~1.5 pixels in normalized units.
        let edge = 1.5 / h.min(w) as f64;
        for y in 0..h {
            let ny = (y as f64 + 0.5) / h as f64;
            let blend = ny as f32;
            for x in 0..w {
                let nx = (x as f64 + 0.5) / w as f64;
                let mut px = [0f32; 3];
                for c in 0..CHANNELS {
                    px[c] = self.top[c] * (1.0 - blend) + self.bottom[c] * blend;
                }
                for a in &self.actors {
                    // Positions wrap so clips of any length stay busy; the
                    // camera pan shifts every actor uniformly.
                    let ax = (a.cx + (a.vx + self.pan) * t).rem_euclid(1.0);
                    let ay = (a.cy + a.vy * t).rem_euclid(1.0);
                    let dx = nx - ax;
                    let dy = ny - ay;
                    let d = match a.kind {
                        0 => (dx * dx + dy * dy).sqrt(),
                        _ => dx.abs().max(dy.abs()),
                    };
                    // 1 inside, 0 outside, linear ramp across the edge.
                    let cover = ((a.size - d) / edge).clamp(0.0, 1.0) as f32;
                    if cover > 0.0 {
                        for c in 0..CHANNELS {
                            px[c] = px[c] * (1.0 - cover) + a.color[c] * cover;
                        }
                    }
                }
                for c in 0..CHANNELS {
                    frame.set(c, y, x, px[c]);
                }
            }
        }
        Ok(frame)
    }
}

/// Fixed seed for the style-calibration scene. Shared by the generator and
/// the style metric so reference statistics are reproducible everywhere.
pub const CALIBRATION_SEED: u64 = 0xCA11B;

/// Canonical unstyled frames used to derive per-style reference statistics.
pub fn calibration_frames(h: usize, w: usize) -> Result<Vec<Frame>> {
    let scene = Scene::from_seed(CALIBRATION_SEED);
    (0..4).map(|i| scene.render(i * 8, h, w)).collect()
}

/// Everything needed to render one clip to disk.
#[derive(Debug, Clone)]
pub struct ClipSpec {
    pub video_id: String,
    pub seed: u64,
    pub tag: LightingTag,
    pub style: StyleSpec,
    /// Frames to render; at least the training window length.
    pub frames: usize,
    /// Scene render resolution (pre-letterbox).
    pub render_h: usize,
    pub render_w: usize,
    /// Stored frame resolution (post-letterbox).
    pub frame_h: usize,
    pub frame_w: usize,
}

/// Sidecar metadata written next to each clip's frames; ingestion reads it
/// back when building the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub video_id: String,
    pub caption: String,
    pub lighting_tag: LightingTag,
    pub scene_id: String,
    pub fps: u32,
}

pub const CLIP_META_FILE: &str = "clip.json";
pub const DEFAULT_FPS: u32 = 24;

/// Minimum clip length: one full training window.
pub const MIN_CLIP_FRAMES: usize = 33;

/// Renders a styled clip into `out_dir/{video_id}/` — numbered PNG frames
/// plus a `clip.json` sidecar — and returns the written frame paths.
pub fn generate_clip(out_dir: &Path, spec: &ClipSpec) -> Result<(ClipMeta, Vec<PathBuf>)> {
    if spec.frames < MIN_CLIP_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "clip needs at least {MIN_CLIP_FRAMES} frames, got {}",
            spec.frames
        )));
    }
    spec.style.validate()?;
    let scene = Scene::from_seed(spec.seed);
    let caption = captions::build_caption(spec.tag, &mut StreamRng::new(spec.seed, "caption"));
    // Fail fast if the template ever drifts out of the vocabulary.
    captions::vocab().tokenize(&caption)?;

    let clip_dir = out_dir.join(&spec.video_id);
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut frame_paths = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = scene.render(t, spec.render_h, spec.render_w)?;
        let mut grain = StreamRng::new(spec.seed, &format!("grain/{t}"));
        spec.style.apply(&mut frame, Some(&mut grain));
        let boxed = letterbox(&frame, spec.frame_h, spec.frame_w)?;
        let path = clip_dir.join(format!("frame_{t:05}.png"));
        boxed.save_png(&path)?;
        frame_paths.push(path);
    }

    let meta = ClipMeta {
        video_id: spec.video_id.clone(),
        caption,
        lighting_tag: spec.tag,
        scene_id: format!("scene-{:016x}", spec.seed),
        fps: DEFAULT_FPS,
    };
    let meta_path = clip_dir.join(CLIP_META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok((meta, frame_paths))
}

/// Everything needed to render a whole training corpus.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub clips: usize,
    pub frames_per_clip: usize,
    /// Scene render resolution (pre-letterbox).
    pub render_h: usize,
    pub render_w: usize,
    /// Stored frame resolution (post-letterbox).
    pub frame_h: usize,
    pub frame_w: usize,
    pub seed: u64,
}

/// Renders `clips` styled clips into `out_dir`, cycling through the four
/// lighting presets. Per-clip scene seeds come from the corpus seed's
/// `"corpus/{i}"` streams, so corpora with different seeds share nothing.
pub fn generate_corpus(out_dir: &Path, spec: &CorpusSpec) -> Result<Vec<ClipMeta>> {
    if spec.clips == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one clip".into()));
    }
    let mut metas = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let clip_seed = StreamRng::new(spec.seed, &format!("corpus/{i}")).next_u64();
        let tag = LightingTag::ALL[i % LightingTag::ALL.len()];
        let clip = ClipSpec {
            video_id: format!("clip_{i:04}"),
            seed: clip_seed,
            tag,
            style: StyleSpec::for_tag(tag),
            frames: spec.frames_per_clip,
            render_h: spec.render_h,
            render_w: spec.render_w,
            frame_h: spec.frame_h,
            frame_w: spec.frame_w,
        };
        let (meta, _) = generate_clip(out_dir, &clip)?;
        metas.push(meta);
    }
    Ok(metas)
}
