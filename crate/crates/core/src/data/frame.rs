//! Planar RGB frames, lossless PNG round-tripping, and letterboxing.
//!
//! Frames hold `f32` values in `[0, 1]`, channel-planar (`(3, h, w)`).
//! Files are 8-bit RGB PNG: lossless, so determinism checks can compare
//! bytes. Letterboxing scales the source to fit the target while keeping
//! its aspect ratio, centers it, and pads the rest with black — content is
//! never cropped; odd padding puts the extra row/column at bottom/right.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A single RGB frame, planar layout, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Frame {
    /// An all-black frame.
    pub fn black(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame dimensions must be positive, got {h}x{w}"
            )));
        }
        Ok(Frame {
            h,
            w,
            data: vec![0.0; CHANNELS * h * w],
        })
    }

    /// Wraps existing planar data of length `3·h·w`.
    pub fn from_planar(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != CHANNELS * h * w {
            return Err(Error::InvalidArgument(format!(
                "planar data of {} values does not form a {h}x{w} RGB frame",
                data.len()
            )));
        }
        Ok(Frame { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Width over height.
    pub fn aspect_ratio(&self) -> f64 {
        self.w as f64 / self.h as f64
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Mean of the per-pixel channel average — a quick luminance proxy.
    pub fn mean_luminance(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Writes the frame as 8-bit RGB PNG (values clamped and rounded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = [0, 1, 2].map(|c| {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                });
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Loads an 8-bit RGB PNG written by [`Frame::save_png`] (or any raster
    /// the `image` crate can decode to RGB).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut frame = Frame::black(h, w)?;
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..CHANNELS {
                    frame.set(c, y, x, px.0[c] as f32 / 255.0);
                }
            }
        }
        Ok(frame)
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target must have positive dimensions".into(),
        ));
    }
    let mut out = Frame::black(out_h, out_w)?;
    let sy_scale = src.h as f64 / out_h as f64;
    let sx_scale = src.w as f64 / out_w as f64;
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (src.h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (src.w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let fx = (sx - x0 as f64) as f32;
            for c in 0..CHANNELS {
                // `a + (b - a)·f` keeps constant regions bit-exact.
                let top = {
                    let a = src.get(c, y0, x0);
                    a + (src.get(c, y0, x1) - a) * fx
                };
                let bot = {
                    let a = src.get(c, y1, x0);
                    a + (src.get(c, y1, x1) - a) * fx
                };
                out.set(c, y, x, top + (bot - top) * fy);
            }
        }
    }
    Ok(out)
}

/// The placement letterboxing chose: where the resized content sits inside
/// the target canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LetterboxLayout {
    pub content_h: usize,
    pub content_w: usize,
    pub top: usize,
    pub left: usize,
}

/// Computes the letterbox geometry without touching pixels.
pub fn letterbox_layout(src_h: usize, src_w: usize, target_h: usize, target_w: usize) -> Result<LetterboxLayout> {
    if src_h == 0 || src_w == 0 || target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(
            "letterbox dimensions must be positive".into(),
        ));
    }
    let scale = (target_w as f64 / src_w as f64).min(target_h as f64 / src_h as f64);
    let content_h = ((src_h as f64 * scale).round() as usize).clamp(1, target_h);
    let content_w = ((src_w as f64 * scale).round() as usize).clamp(1, target_w);
    // Centered; integer halving puts any odd pixel of padding at
    // bottom/right.
    Ok(LetterboxLayout {
        content_h,
        content_w,
        top: (target_h - content_h) / 2,
        left: (target_w - content_w) / 2,
    })
}

/// Scales `src` to fit `(target_h, target_w)` preserving aspect ratio,
/// centers it, and pads the remainder with black.
pub fn letterbox(src: &Frame, target_h: usize, target_w: usize) -> Result<Frame> {
    let layout = letterbox_layout(src.h, src.w, target_h, target_w)?;
    let content = resize_bilinear(src, layout.content_h, layout.content_w)?;
    let mut out = Frame::black(target_h, target_w)?;
    for c in 0..CHANNELS {
        for y in 0..layout.content_h {
            for x in 0..layout.content_w {
                out.set(c, layout.top + y, layout.left + x, content.get(c, y, x));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, value: f32) -> Frame {
        Frame::from_planar(h, w, vec![value; CHANNELS * h * w]).unwrap()
    }

    /// A frame whose pixels encode their own coordinates, handy for
    /// checking that resizing never invents content.
    fn coordinate_frame(h: usize, w: usize) -> Frame {
        let mut f = Frame::black(h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                f.set(0, y, x, (y as f32 + 0.5) / h as f32);
                f.set(1, y, x, (x as f32 + 0.5) / w as f32);
                f.set(2, y, x, 0.25);
            }
        }
        f
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let mut frame = Frame::black(5, 7).unwrap();
        for (i, v) in frame.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        frame.save_png(&path).unwrap();
        let back = Frame::load_png(&path).unwrap();
        assert_eq!(frame, back);
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let frame = coordinate_frame(9, 13);
        frame.save_png(&p1).unwrap();
        frame.save_png(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn matching_aspect_means_pure_resize_with_no_padding() {
        let src = coordinate_frame(36, 64); // 16:9
        let out = letterbox(&src, 18, 32).unwrap();
        let layout = letterbox_layout(36, 64, 18, 32).unwrap();
        assert_eq!((layout.content_h, layout.content_w), (18, 32));
        assert_eq!((layout.top, layout.left), (0, 0));
        assert_eq!(out, resize_bilinear(&src, 18, 32).unwrap());
    }

    #[test]
    fn square_source_into_wide_target_pads_left_and_right_evenly() {
        let layout = letterbox_layout(1024, 1024, 576, 1024).unwrap();
        assert_eq!((layout.content_h, layout.content_w), (576, 576));
        assert_eq!(layout.left, 224);
        assert_eq!(1024 - layout.left - layout.content_w, 224);
        assert_eq!(layout.top, 0);
    }

    #[test]
    fn odd_padding_gives_the_extra_row_to_the_bottom() {
        // 800 high × 1920 wide into 576×1024: scale 0.5333…, content
        // 427×1024, 149 rows of padding split 74 top / 75 bottom.
        let layout = letterbox_layout(800, 1920, 576, 1024).unwrap();
        assert_eq!((layout.content_h, layout.content_w), (427, 1024));
        assert_eq!(layout.top, 74);
        assert_eq!(576 - layout.top - layout.content_h, 75);
        assert_eq!(layout.left, 0);
    }

    #[test]
    fn padding_is_exactly_black_and_content_is_not() {
        let src = solid(50, 50, 1.0);
        let out = letterbox(&src, 30, 60).unwrap();
        let layout = letterbox_layout(50, 50, 30, 60).unwrap();
        for c in 0..CHANNELS {
            for y in 0..30 {
                for x in 0..60 {
                    let inside = y >= layout.top
                        && y < layout.top + layout.content_h
                        && x >= layout.left
                        && x < layout.left + layout.content_w;
                    let v = out.get(c, y, x);
                    if inside {
                        assert_eq!(v, 1.0);
                    } else {
                        assert_eq!(v, 0.0, "pad pixel ({c},{y},{x}) must be black");
                    }
                }
            }
        }
    }

    #[test]
    fn content_never_exceeds_target_and_aspect_is_preserved() {
        // A deterministic sweep over awkward geometries.
        let mut geometries = Vec::new();
        for &h in &[1usize, 7, 16, 33, 100, 575, 576, 577, 1080] {
            for &w in &[1usize, 9, 16, 41, 99, 1023, 1024, 1025] {
                geometries.push((h, w));
            }
        }
        for (h, w) in geometries {
            let layout = letterbox_layout(h, w, 576, 1024).unwrap();
            assert!(layout.content_h <= 576 && layout.content_w <= 1024, "{h}x{w}");
            assert!(layout.top + layout.content_h <= 576);
            assert!(layout.left + layout.content_w <= 1024);
            // Either axis fills the target (no cropping means the scale is
            // the limiting one).
            assert!(
                layout.content_h == 576 || layout.content_w == 1024,
                "one axis must be tight for {h}x{w}"
            );
            // Aspect preserved within one pixel of rounding.
            let scale = (1024.0 / w as f64).min(576.0 / h as f64);
            assert!((layout.content_h as f64 - h as f64 * scale).abs() <= 0.5);
            assert!((layout.content_w as f64 - w as f64 * scale).abs() <= 0.5);
        }
    }

    #[test]
    fn resize_preserves_constant_frames_exactly() {
        let src = solid(17, 31, 0.375);
        let out = resize_bilinear(&src, 5, 9).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn dimension_validation() {
        assert!(Frame::black(0, 4).is_err());
        assert!(Frame::from_planar(2, 2, vec![0.0; 5]).is_err());
        let f = solid(4, 4, 0.5);
        assert!(resize_bilinear(&f, 0, 4).is_err());
        assert!(letterbox(&f, 4, 0).is_err());
    }
}
