//! 8-bit flow planes with per-channel affine scale.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optflow::FlowField;

/// Value range a quantized channel was mapped from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub min: f32,
    pub max: f32,
}

impl ChannelScale {
    pub fn step(&self) -> f32 {
        (self.max - self.min) / 255.0
    }
}

/// Maps `[min, max]` to `[0, 255]`. A constant channel becomes all zeros.
pub fn quantize_channel(values: &[f32]) -> (Vec<u8>, ChannelScale) {
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return (Vec::new(), ChannelScale { min: 0.0, max: 0.0 });
    }
    let scale = ChannelScale { min, max };
    if max <= min {
        return (vec![0; values.len()], scale);
    }
    let range = (max - min) as f64;
    let plane = values
        .iter()
        .map(|&v| (255.0 * (v - min) as f64 / range).round().clamp(0.0, 255.0) as u8)
        .collect();
    (plane, scale)
}

pub fn dequantize_channel(plane: &[u8], scale: ChannelScale) -> Vec<f32> {
    if scale.max <= scale.min {
        return vec![scale.min; plane.len()];
    }
    let step = (scale.max - scale.min) as f64 / 255.0;
    plane.iter().map(|&q| (scale.min as f64 + q as f64 * step) as f32).collect()
}

/// Quantizes the horizontal and vertical components separately.
pub fn quantize_flow(field: &FlowField) -> ([Vec<u8>; 2], [ChannelScale; 2]) {
    let (px, sx) = quantize_channel(&field.dx);
    let (py, sy) = quantize_channel(&field.dy);
    ([px, py], [sx, sy])
}

/// Optional lossy stage applied to each quantized plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PlaneCodec {
    #[default]
    None,
    Jpeg {
        quality: u8,
    },
}

impl PlaneCodec {
    /// Round-trips a plane through the codec, returning the decoded bytes.
    pub fn apply(&self, plane: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
        match *self {
            PlaneCodec::None => Ok(plane.to_vec()),
            PlaneCodec::Jpeg { quality } => {
                let mut buf = Vec::new();
                JpegEncoder::new_with_quality(&mut buf, quality)
                    .encode(plane, width as u32, height as u32, ExtendedColorType::L8)
                    .map_err(|e| Error::Invalid(format!("jpeg encode: {e}")))?;
                let img = image::load(Cursor::new(buf), ImageFormat::Jpeg)
                    .map_err(|e| Error::Invalid(format!("jpeg decode: {e}")))?
                    .into_luma8();
                Ok(img.into_raw())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_zero_channel() {
        let (p, s) = quantize_channel(&[0.0; 10]);
        assert!(p.iter().all(|&q| q == 0));
        assert_eq!((s.min, s.max), (0.0, 0.0));
        assert_eq!(dequantize_channel(&p, s), vec![0.0; 10]);
    }

    #[test]
    fn constant_nonzero_channel_round_trips() {
        let (p, s) = quantize_channel(&[1.25; 4]);
        assert_eq!(p, vec![0; 4]);
        assert_eq!(dequantize_channel(&p, s), vec![1.25; 4]);
    }

    #[test]
    fn symmetric_range_midpoint() {
        let (p, _) = quantize_channel(&[-4.0, 0.0, 4.0]);
        assert_eq!(p, vec![0, 128, 255]);
    }

    #[test]
    fn jpeg_codec_is_deterministic_and_close() {
        let plane: Vec<u8> = (0..64 * 64).map(|i| ((i % 64) * 4) as u8).collect();
        let codec = PlaneCodec::Jpeg { quality: 40 };
        let a = codec.apply(&plane, 64, 64).unwrap();
        let b = codec.apply(&plane, 64, 64).unwrap();
        assert_eq!(a, b);
        let mean_err: f64 =
            a.iter().zip(&plane).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / plane.len() as f64;
        assert!(mean_err < 8.0, "{mean_err}");
        assert_eq!(PlaneCodec::None.apply(&plane, 64, 64).unwrap(), plane);
    }

    proptest! {
        #[test]
        fn round_trip_error_is_half_a_step(values in proptest::collection::vec(-50.0f32..50.0, 1..200)) {
            let (p, s) = quantize_channel(&values);
            let back = dequantize_channel(&p, s);
            let bound = (s.max - s.min) as f64 / 510.0;
            for (a, b) in values.iter().zip(&back) {
                prop_assert!(((a - b).abs() as f64) <= bound * (1.0 + 1e-4) + 1e-6);
            }
        }
    }
}
