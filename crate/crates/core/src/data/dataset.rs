//! In-memory clip store: preloads every frame of a manifest split and
//! serves fixed-length training windows as `(frames, channels, h, w)`
//! tensors with pixels mapped from `[0, 1]` to `[-1, 1]`.
//!
//! The corpus is deliberately small, so holding it resident is cheaper and
//! far more deterministic than streaming decode during training.

use crate::data::frame::{Frame, CHANNELS};
use crate::data::manifest::{ClipRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};

/// Maps a decoded pixel in `[0, 1]` onto the signal range `[-1, 1]`.
pub(crate) fn pixel_to_signal(v: f32) -> f32 {
    2.0 * v - 1.0
}

struct StoredClip {
    record: ClipRecord,
    /// One planar `(channels, h, w)` buffer per frame, already in `[-1, 1]`.
    frames: Vec<Vec<f32>>,
}

/// All frames of one manifest split, resident in memory.
pub struct ClipStore {
    clips: Vec<StoredClip>,
    frame_h: usize,
    frame_w: usize,
}

impl ClipStore {
    /// Decodes every frame of every record in `split`. All clips must share
    /// one frame geometry; mixed sizes are an error, not a silent resize.
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let records: Vec<&ClipRecord> = manifest.split_records(split);
        if records.is_empty() {
            return Err(Error::Dataset(format!("no records in the {split:?} split")));
        }
        let mut clips = Vec::with_capacity(records.len());
        let mut dims: Option<(usize, usize)> = None;
        for record in records {
            let mut frames = Vec::with_capacity(record.frame_paths.len());
            for path in &record.frame_paths {
                let frame = Frame::load_png(path)?;
                match dims {
                    None => dims = Some((frame.height(), frame.width())),
                    Some(d) if d != (frame.height(), frame.width()) => {
                        return Err(Error::Dataset(format!(
                            "clip {} frame size ({}, {}) differs from the rest of the store {d:?}",
                            record.video_id,
                            frame.height(),
                            frame.width()
                        )));
                    }
                    Some(_) => {}
                }
                frames.push(frame.data().iter().copied().map(pixel_to_signal).collect());
            }
            clips.push(StoredClip {
                record: record.clone(),
                frames,
            });
        }
        let (frame_h, frame_w) = dims.expect("non-empty store");
        Ok(ClipStore {
            clips,
            frame_h,
            frame_w,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `(channels, height, width)` of every frame in the store.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        (CHANNELS, self.frame_h, self.frame_w)
    }

    pub fn record(&self, clip: usize) -> &ClipRecord {
        &self.clips[clip].record
    }

    /// A contiguous `len`-frame window starting at `offset`, as a
    /// `(len, channels, h, w)` tensor in `[-1, 1]`.
    pub fn window<E: Scalar>(&self, clip: usize, offset: usize, len: usize) -> Result<Tensor<E>> {
        let stored = self
            .clips
            .get(clip)
            .ok_or_else(|| Error::InvalidArgument(format!("clip index {clip} out of range")))?;
        let total = stored.frames.len();
        if len == 0 || offset + len > total {
            return Err(Error::InvalidArgument(format!(
                "window [{offset}, {}) outside clip of {total} frames",
                offset + len
            )));
        }
        let mut data = Vec::with_capacity(len * CHANNELS * self.frame_h * self.frame_w);
        for frame in &stored.frames[offset..offset + len] {
            data.extend(frame.iter().map(|&v| E::from_f64_lossy(v as f64)));
        }
        Tensor::from_vec(&[len, CHANNELS, self.frame_h, self.frame_w], data)
    }

    /// Draws a uniformly random start offset for a `len`-frame window.
    pub fn sample_offset(&self, clip: usize, len: usize, rng: &mut StreamRng) -> Result<usize> {
        let total = self
            .clips
            .get(clip)
            .ok_or_else(|| Error::InvalidArgument(format!("clip index {clip} out of range")))?
            .frames
            .len();
        if len == 0 || len > total {
            return Err(Error::InvalidArgument(format!(
                "cannot sample a {len}-frame window from a {total}-frame clip"
            )));
        }
        Ok(rng.uniform_usize(total - len + 1))
    }

    /// Samples a random window; returns the tensor and the chosen offset.
    pub fn sample_window<E: Scalar>(
        &self,
        clip: usize,
        len: usize,
        rng: &mut StreamRng,
    ) -> Result<(Tensor<E>, usize)> {
        let offset = self.sample_offset(clip, len, rng)?;
        Ok((self.window(clip, offset, len)?, offset))
    }

    /// The clip's first frame as a `(channels, h, w)` tensor in `[-1, 1]`,
    /// used as the still-image conditioning signal.
    pub fn first_frame<E: Scalar>(&self, clip: usize) -> Result<Tensor<E>> {
        self.window::<E>(clip, 0, 1)?
            .reshape(&[CHANNELS, self.frame_h, self.frame_w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::tiny_corpus;
    use crate::data::manifest::build_manifest;

    fn store_from(n_clips: usize, frames: usize) -> (tempfile::TempDir, ClipStore) {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), n_clips, frames);
        let (manifest, _) = build_manifest(dir.path(), 0.0, 3).unwrap();
        let store = ClipStore::load(&manifest, Split::Train).unwrap();
        (dir, store)
    }

    #[test]
    fn windows_have_the_right_shape_and_range() {
        let (_dir, store) = store_from(2, 35);
        assert_eq!(store.len(), 2);
        let w: Tensor<f32> = store.window(0, 1, 33).unwrap();
        assert_eq!(w.shape(), &[33, CHANNELS, 8, 8]);
        w.with_data(|d| {
            assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
            // A rendered scene is never flat black or white everywhere.
            assert!(d.iter().any(|v| *v > -0.99));
        });
    }

    #[test]
    fn exact_length_clips_always_sample_offset_zero() {
        let (_dir, store) = store_from(2, 33);
        let mut rng = StreamRng::new(9, "sample");
        for _ in 0..16 {
            let (w, offset) = store.sample_window::<f32>(0, 33, &mut rng).unwrap();
            assert_eq!(offset, 0);
            assert_eq!(w.shape()[0], 33);
        }
    }

    #[test]
    fn offsets_are_uniform_over_the_valid_range() {
        let (_dir, store) = store_from(2, 96);
        let len = 33;
        let n_offsets = 96 - len + 1; // 64 possible starts
        let draws = 10_000usize;
        let mut counts = vec![0usize; n_offsets];
        let mut rng = StreamRng::new(17, "uniformity");
        for _ in 0..draws {
            counts[store.sample_offset(0, len, &mut rng).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "some offset never drawn");
        // Compare the empirical CDF against the uniform CDF; the largest
        // deviation stays under 5% at this sample size.
        let mut cum = 0.0;
        let mut max_dev = 0.0f64;
        for (i, &c) in counts.iter().enumerate() {
            cum += c as f64 / draws as f64;
            let ideal = (i + 1) as f64 / n_offsets as f64;
            max_dev = max_dev.max((cum - ideal).abs());
        }
        assert!(max_dev < 0.05, "CDF deviation {max_dev} >= 0.05");
    }

    #[test]
    fn first_frame_matches_the_window_head() {
        let (_dir, store) = store_from(2, 34);
        let first: Tensor<f32> = store.first_frame(1).unwrap();
        assert_eq!(first.shape(), &[CHANNELS, 8, 8]);
        let window: Tensor<f32> = store.window(1, 0, 2).unwrap();
        let head = CHANNELS * 8 * 8;
        first.with_data(|f| window.with_data(|w| assert_eq!(f, &w[..head])));
    }

    #[test]
    fn pixel_mapping_is_the_affine_stretch() {
        assert_eq!(pixel_to_signal(0.0), -1.0);
        assert_eq!(pixel_to_signal(1.0), 1.0);
        assert_eq!(pixel_to_signal(0.5), 0.0);
    }

    #[test]
    fn out_of_range_requests_are_rejected() {
        let (_dir, store) = store_from(2, 33);
        assert!(store.window::<f32>(0, 1, 33).is_err());
        assert!(store.window::<f32>(0, 0, 34).is_err());
        assert!(store.window::<f32>(5, 0, 1).is_err());
        let mut rng = StreamRng::new(1, "bad");
        assert!(store.sample_offset(0, 40, &mut rng).is_err());
    }
}
