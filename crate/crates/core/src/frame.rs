//! Grayscale frames, clips, and PNG persistence.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit grayscale frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                "Frame::new",
                format!("{} pixels", height * width),
                pixels.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    /// Intensity with clamped-edge access for signed coordinates.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> u8 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    /// Bilinear sample at fractional (row, col), clamped at borders.
    pub fn sample(&self, row: f64, col: f64) -> f64 {
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = row - r0;
        let fc = col - c0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let p = |r: isize, c: isize| self.get_clamped(r, c) as f64;
        (1.0 - fr) * ((1.0 - fc) * p(r0, c0) + fc * p(r0, c0 + 1))
            + fr * ((1.0 - fc) * p(r0 + 1, c0) + fc * p(r0 + 1, c0 + 1))
    }

    pub fn flip_vertical(&self) -> Frame {
        let mut out = Vec::with_capacity(self.pixels.len());
        for r in (0..self.height).rev() {
            out.extend_from_slice(self.row(r));
        }
        Frame {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    /// Sub-window copy; the window must lie inside the frame.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Frame> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "Frame::crop",
                format!("window inside {}x{}", self.height, self.width),
                format!("{height}x{width} at ({top},{left})"),
            ));
        }
        let mut out = Vec::with_capacity(height * width);
        for r in top..top + height {
            out.extend_from_slice(&self.row(r)[left..left + width]);
        }
        Ok(Frame {
            width,
            height,
            pixels: out,
        })
    }

    /// Area-weighted resampling to an arbitrary size.
    pub fn resize_area(&self, height: usize, width: usize) -> Frame {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let spans_x: Vec<Vec<(usize, f64)>> = (0..width).map(|c| area_span(c, sx, self.width)).collect();
        let mut out = vec![0u8; height * width];
        for r in 0..height {
            let span_y = area_span(r, sy, self.height);
            for (c, span_x) in spans_x.iter().enumerate() {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for &(yy, wy) in &span_y {
                    let row = self.row(yy);
                    for &(xx, wx) in span_x {
                        acc += wy * wx * row[xx] as f64;
                        wsum += wy * wx;
                    }
                }
                out[r * width + c] = (acc / wsum).round().clamp(0.0, 255.0) as u8;
            }
        }
        Frame {
            width,
            height,
            pixels: out,
        }
    }

    pub fn to_image(&self) -> GrayImage {
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("frame buffer size matches dimensions")
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_image().save(path).map_err(|e| image_error(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Frame> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.into_luma8();
        let (w, h) = img.dimensions();
        Frame::new(h as usize, w as usize, img.into_raw())
    }
}

fn area_span(index: usize, scale: f64, limit: usize) -> Vec<(usize, f64)> {
    let start = index as f64 * scale;
    let end = ((index + 1) as f64 * scale).min(limit as f64);
    let mut span = Vec::new();
    let mut p = start.floor() as usize;
    while (p as f64) < end && p < limit {
        let lo = start.max(p as f64);
        let hi = end.min(p as f64 + 1.0);
        if hi > lo {
            span.push((p, hi - lo));
        }
        p += 1;
    }
    span
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Sequence of frames with frame-rate metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Self {
        Self { frames, fps }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, frame) in self.frames.iter().enumerate() {
            frame.write_png(&dir.join(frame_file_name(i)))?;
        }
        let meta = ClipMeta {
            fps: self.fps,
            frames: self.frames.len(),
        };
        let meta_path = dir.join("clip.json");
        let text = serde_json::to_string(&meta).expect("clip metadata serializes");
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<VideoClip> {
        let meta_path = dir.join("clip.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ClipMeta =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", meta_path.display())))?;
        let frames = (0..meta.frames)
            .map(|i| Frame::read_png(&dir.join(frame_file_name(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoClip { frames, fps: meta.fps })
    }
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    fps: f64,
    frames: usize,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}
