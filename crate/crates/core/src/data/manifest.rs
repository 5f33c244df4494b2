//! Dataset manifests: ingesting clip directories, validating them against
//! the frame and aspect buckets, assigning train/validation splits, and
//! (de)serializing the result deterministically.
//!
//! A clip is a directory of numbered PNG frames plus a `clip.json` sidecar.
//! Undersized or out-of-bucket clips are never silently dropped — they land
//! in a rejection report the caller can surface.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::captions::{vocab, LightingTag};
use crate::data::generator::{ClipMeta, CLIP_META_FILE};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Fixed training window length; clips shorter than this are rejected.
pub const FRAME_BUCKET: usize = 33;

/// Admissible width/height range for ingested clips.
pub const MIN_ASPECT: f64 = 0.5;
pub const MAX_ASPECT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One accepted clip, fully resolved: ordered frame paths, tokenized
/// caption, geometry, and split assignment.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub video_id: String,
    pub clip_dir: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    pub caption: String,
    pub caption_ids: Vec<u32>,
    pub lighting_tag: LightingTag,
    pub scene_id: String,
    pub fps: u32,
    pub frame_count: usize,
    pub aspect_ratio: f64,
    pub split: Split,
}

/// A clip that failed ingest validation, and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub clip_id: String,
    pub reason: String,
}

/// The dataset index: accepted records plus the bucket/seed bookkeeping
/// needed to reproduce it.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub frame_bucket: usize,
    pub generator_seed: u64,
}

/// On-disk record shape: the five identity keys plus geometry and split.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    video_id: String,
    frame_path: String,
    caption: String,
    lighting_tag: LightingTag,
    scene_id: String,
    fps: u32,
    frame_count: usize,
    aspect_ratio: f64,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    frame_bucket: usize,
    generator_seed: u64,
    records: Vec<ManifestRecord>,
}

/// Lists a clip directory's PNG frames in name order.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    frames.sort();
    Ok(frames)
}

/// One directory's worth of ingest work: either a validated candidate or a
/// rejection reason.
fn scan_clip(dir: &Path) -> std::result::Result<(ClipMeta, Vec<PathBuf>, f64), String> {
    let meta_path = dir.join(CLIP_META_FILE);
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|_| format!("missing {CLIP_META_FILE}"))?;
    let meta: ClipMeta =
        serde_json::from_str(&meta_text).map_err(|e| format!("invalid {CLIP_META_FILE}: {e}"))?;
    let dir_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if meta.video_id != dir_name {
        return Err(format!(
            "video_id {:?} does not match directory name {dir_name:?}",
            meta.video_id
        ));
    }
    let frames = list_frames(dir).map_err(|e| e.to_string())?;
    if frames.len() < FRAME_BUCKET {
        return Err(format!("too few frames ({} < {FRAME_BUCKET})", frames.len()));
    }
    let (w0, h0) = image::image_dimensions(&frames[0])
        .map_err(|e| format!("unreadable frame {:?}: {e}", frames[0]))?;
    for f in &frames[1..] {
        let dims = image::image_dimensions(f).map_err(|e| format!("unreadable frame {f:?}: {e}"))?;
        if dims != (w0, h0) {
            return Err(format!(
                "inconsistent frame dimensions: {:?} is {dims:?}, expected ({w0}, {h0})",
                f.file_name().unwrap_or_default()
            ));
        }
    }
    let aspect = w0 as f64 / h0 as f64;
    if !(MIN_ASPECT..=MAX_ASPECT).contains(&aspect) {
        return Err(format!(
            "aspect out of bucket range ({aspect:.3} not in [{MIN_ASPECT}, {MAX_ASPECT}])"
        ));
    }
    if let Err(e) = vocab().tokenize(&meta.caption) {
        return Err(format!("caption rejected: {e}"));
    }
    Ok((meta, frames, aspect))
}

/// Seeded split assignment: a Fisher-Yates shuffle of the record indices
/// picks `round(n · val_fraction)` validation slots.
fn assign_splits(n: usize, val_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamRng::new(seed, "split");
    for i in (1..n).rev() {
        order.swap(i, rng.uniform_usize(i + 1));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n);
    let mut splits = vec![Split::Train; n];
    for &idx in order.iter().take(n_val) {
        splits[idx] = Split::Val;
    }
    splits
}

/// A directory that passed ingest validation, ready to become a record.
#[derive(Debug, Clone)]
pub struct ScannedClip {
    pub dir: PathBuf,
    pub meta: ClipMeta,
    pub frames: Vec<PathBuf>,
    pub aspect: f64,
}

/// Scans `clip_dir` for clip subdirectories and validates each against the
/// frame and aspect buckets, partitioning them into accepted candidates and
/// rejections (never silently dropping a clip). Errors only when the
/// directory itself is unreadable or holds no clip directories at all.
pub fn scan_clips(clip_dir: &Path) -> Result<(Vec<ScannedClip>, Vec<Rejection>)> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(clip_dir)
        .map_err(|e| Error::io(clip_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no clip directories found in {}",
            clip_dir.display()
        )));
    }

    let mut accepted = Vec::new();
    let mut rejections = Vec::new();
    for dir in dirs {
        let clip_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("<unnamed>")
            .to_string();
        match scan_clip(&dir) {
            Ok((meta, frames, aspect)) => accepted.push(ScannedClip { dir, meta, frames, aspect }),
            Err(reason) => rejections.push(Rejection { clip_id, reason }),
        }
    }
    Ok((accepted, rejections))
}

/// Turns scan results into a manifest: seeded split assignment over the
/// accepted clips. The rejections are only consulted for the error message
/// when fewer than two clips survived.
pub fn assemble_manifest(
    accepted: Vec<ScannedClip>,
    rejections: &[Rejection],
    val_fraction: f64,
    seed: u64,
) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} outside [0, 1]"
        )));
    }
    if accepted.len() < 2 {
        let detail = rejections
            .iter()
            .map(|r| format!("{}: {}", r.clip_id, r.reason))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Dataset(format!(
            "need at least 2 accepted clips, found {} ({} rejected{})",
            accepted.len(),
            rejections.len(),
            if detail.is_empty() {
                String::new()
            } else {
                format!(": {detail}")
            }
        )));
    }

    let splits = assign_splits(accepted.len(), val_fraction, seed);
    let records = accepted
        .into_iter()
        .zip(splits)
        .map(|(clip, split)| {
            let caption_ids = vocab().tokenize(&clip.meta.caption)?;
            Ok(ClipRecord {
                video_id: clip.meta.video_id,
                clip_dir: clip.dir,
                frame_count: clip.frames.len(),
                frame_paths: clip.frames,
                caption: clip.meta.caption,
                caption_ids,
                lighting_tag: clip.meta.lighting_tag,
                scene_id: clip.meta.scene_id,
                fps: clip.meta.fps,
                aspect_ratio: clip.aspect,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Manifest {
        records,
        frame_bucket: FRAME_BUCKET,
        generator_seed: seed,
    })
}

/// Scans `clip_dir`, assigns splits, and returns the manifest along with
/// the rejection report.
pub fn build_manifest(
    clip_dir: &Path,
    val_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Vec<Rejection>)> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} outside [0, 1]"
        )));
    }
    let (accepted, rejections) = scan_clips(clip_dir)?;
    let manifest = assemble_manifest(accepted, &rejections, val_fraction, seed)?;
    Ok((manifest, rejections))
}

impl Manifest {
    pub fn split_records(&self, split: Split) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Writes the manifest as a single JSON document. Frame paths are
    /// stored relative to the manifest's directory when possible, so the
    /// dataset stays relocatable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let doc = ManifestDoc {
            frame_bucket: self.frame_bucket,
            generator_seed: self.generator_seed,
            records: self
                .records
                .iter()
                .map(|r| ManifestRecord {
                    video_id: r.video_id.clone(),
                    frame_path: r
                        .clip_dir
                        .strip_prefix(base)
                        .unwrap_or(&r.clip_dir)
                        .to_string_lossy()
                        .into_owned(),
                    caption: r.caption.clone(),
                    lighting_tag: r.lighting_tag,
                    scene_id: r.scene_id.clone(),
                    fps: r.fps,
                    frame_count: r.frame_count,
                    aspect_ratio: r.aspect_ratio,
                    split: r.split,
                })
                .collect(),
        };
        let mut json = serde_json::to_string_pretty(&doc)?;
        json.push('\n');
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest back, re-listing each clip's frames and checking
    /// they still match the recorded count.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ManifestDoc = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let records = doc
            .records
            .into_iter()
            .map(|r| {
                let clip_dir = base.join(&r.frame_path);
                let frames = list_frames(&clip_dir)?;
                if frames.len() != r.frame_count {
                    return Err(Error::Dataset(format!(
                        "clip {} lists {} frames but {} are on disk",
                        r.video_id,
                        r.frame_count,
                        frames.len()
                    )));
                }
                let caption_ids = vocab().tokenize(&r.caption)?;
                Ok(ClipRecord {
                    video_id: r.video_id,
                    clip_dir,
                    frame_paths: frames,
                    caption: r.caption,
                    caption_ids,
                    lighting_tag: r.lighting_tag,
                    scene_id: r.scene_id,
                    fps: r.fps,
                    frame_count: r.frame_count,
                    aspect_ratio: r.aspect_ratio,
                    split: r.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            records,
            frame_bucket: doc.frame_bucket,
            generator_seed: doc.generator_seed,
        })
    }
}

/// Writes the rejection report: one `clip_id<TAB>reason` line per entry.
pub fn write_rejection_report(path: &Path, rejections: &[Rejection]) -> Result<()> {
    let mut text = String::new();
    for r in rejections {
        text.push_str(&r.clip_id);
        text.push('\t');
        text.push_str(&r.reason);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::tiny_corpus;
    use crate::data::frame::Frame;

    #[test]
    fn split_arithmetic_follows_the_rounding_rule() {
        let count = |splits: &[Split]| splits.iter().filter(|s| **s == Split::Val).count();
        assert_eq!(count(&assign_splits(40, 0.1, 7)), 4);
        assert_eq!(count(&assign_splits(3, 0.4, 7)), 1);
        assert_eq!(count(&assign_splits(3, 0.1, 7)), 0);
        assert_eq!(count(&assign_splits(5, 1.0, 7)), 5);
        assert_eq!(assign_splits(10, 0.3, 9), assign_splits(10, 0.3, 9));
        assert_ne!(assign_splits(10, 0.3, 9), assign_splits(10, 0.3, 10));
    }

    #[test]
    fn builds_a_partitioned_deterministic_manifest() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 5, 33);
        let (m1, rej1) = build_manifest(dir.path(), 0.4, 11).unwrap();
        let (m2, rej2) = build_manifest(dir.path(), 0.4, 11).unwrap();
        assert!(rej1.is_empty() && rej2.is_empty());
        assert_eq!(m1.records.len(), 5);
        assert_eq!(m1.split_records(Split::Val).len(), 2);
        assert_eq!(m1.split_records(Split::Train).len(), 3);
        let splits = |m: &Manifest| m.records.iter().map(|r| r.split).collect::<Vec<_>>();
        assert_eq!(splits(&m1), splits(&m2));

        // Records are sorted by directory (= video_id) order.
        let ids: Vec<&str> = m1.records.iter().map(|r| r.video_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn manifest_file_bytes_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 3, 33);
        let (m, _) = build_manifest(dir.path(), 0.4, 5).unwrap();
        let (p1, p2) = (dir.path().join("m1.json"), dir.path().join("m2.json"));
        m.save(&p1).unwrap();
        let (again, _) = build_manifest(dir.path(), 0.4, 5).unwrap();
        again.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 3, 34);
        let (m, _) = build_manifest(dir.path(), 0.4, 5).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.frame_bucket, FRAME_BUCKET);
        assert_eq!(back.generator_seed, 5);
        assert_eq!(back.records.len(), m.records.len());
        for (a, b) in m.records.iter().zip(&back.records) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.frame_paths, b.frame_paths);
            assert_eq!(a.caption_ids, b.caption_ids);
            assert_eq!(a.split, b.split);
            assert_eq!(a.aspect_ratio, b.aspect_ratio);
        }
    }

    #[test]
    fn undersized_clips_land_in_the_rejection_report() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 2, 33);
        // A 10-frame clip alongside the valid ones.
        let short_dir = dir.path().join("short_clip");
        std::fs::create_dir_all(&short_dir).unwrap();
        let frame = Frame::black(8, 8).unwrap();
        for t in 0..10 {
            frame.save_png(&short_dir.join(format!("frame_{t:05}.png"))).unwrap();
        }
        let meta = crate::data::generator::ClipMeta {
            video_id: "short_clip".into(),
            caption: "a golden orb drifts across a dusk field".into(),
            lighting_tag: LightingTag::Day,
            scene_id: "scene-short".into(),
            fps: 24,
        };
        std::fs::write(
            short_dir.join(CLIP_META_FILE),
            serde_json::to_string(&meta).unwrap(),
        )
        .unwrap();

        let (m, rejections) = build_manifest(dir.path(), 0.4, 1).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(rejections.len(), 1);
        assert_eq!(rejections[0].clip_id, "short_clip");
        assert!(rejections[0].reason.contains("too few frames (10 < 33)"));
    }

    #[test]
    fn out_of_bucket_aspect_is_rejected_with_the_stated_reason() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 2, 33);
        let wide_dir = dir.path().join("wide_clip");
        std::fs::create_dir_all(&wide_dir).unwrap();
        let frame = Frame::black(10, 24).unwrap(); // aspect 2.4
        for t in 0..33 {
            frame.save_png(&wide_dir.join(format!("frame_{t:05}.png"))).unwrap();
        }
        let meta = crate::data::generator::ClipMeta {
            video_id: "wide_clip".into(),
            caption: "a golden orb drifts across a dusk field".into(),
            lighting_tag: LightingTag::Day,
            scene_id: "scene-wide".into(),
            fps: 24,
        };
        std::fs::write(
            wide_dir.join(CLIP_META_FILE),
            serde_json::to_string(&meta).unwrap(),
        )
        .unwrap();

        let (_, rejections) = build_manifest(dir.path(), 0.4, 1).unwrap();
        assert_eq!(rejections.len(), 1);
        assert!(rejections[0].reason.contains("aspect out of bucket range"));

        let report = dir.path().join("rejections.txt");
        write_rejection_report(&report, &rejections).unwrap();
        let text = std::fs::read_to_string(&report).unwrap();
        assert!(text.starts_with("wide_clip\taspect out of bucket range"));
    }

    #[test]
    fn missing_sidecar_is_a_rejection_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 2, 33);
        let bare = dir.path().join("bare_clip");
        std::fs::create_dir_all(&bare).unwrap();
        let frame = Frame::black(8, 8).unwrap();
        for t in 0..33 {
            frame.save_png(&bare.join(format!("frame_{t:05}.png"))).unwrap();
        }
        let (_, rejections) = build_manifest(dir.path(), 0.0, 1).unwrap();
        assert_eq!(rejections.len(), 1);
        assert!(rejections[0].reason.contains("missing clip.json"));
    }

    #[test]
    fn empty_and_too_small_directories_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_manifest(dir.path(), 0.1, 1).is_err());
        tiny_corpus(dir.path(), 1, 33);
        assert!(build_manifest(dir.path(), 0.1, 1).is_err());
    }
}
