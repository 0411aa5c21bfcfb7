//! Event to augmented-sample expansion.
//!
//! Each event yields `subsamples x 2 flips x crops` samples. A subsample is a
//! gap-bounded random subset of the (optionally strided) event frames; flow
//! is computed once per subsample and then flipped and cropped together with
//! the spatial frame.

pub mod container;
pub mod quantize;
pub mod subsample;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::optflow::{farneback_flow, FlowParams};
use crate::preprocess::{BoutEvent, EVENT_LEN};
pub use container::{read_container, write_container, ContainerReader, ContainerWriter, Split};
pub use quantize::{dequantize_channel, quantize_channel, quantize_flow, ChannelScale, PlaneCodec};
pub use subsample::{subsample_indices, GapRule, Sampler};

/// Where an augmented sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub event_id: String,
    pub subsample: u8,
    pub flip: bool,
    pub crop: u8,
    /// Event frame used as the spatial input.
    pub spatial_frame: u16,
    /// Event frames the flow stack was computed from, in order.
    pub frame_indices: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub spatial: Frame,
    /// `channels` quantized planes of the spatial frame's size, x and y alternating.
    pub temporal: Vec<u8>,
    pub channels: usize,
    pub scale_meta: Vec<ChannelScale>,
    pub label: u8,
    pub provenance: Provenance,
}

impl AugmentedSample {
    pub fn plane_len(&self) -> usize {
        self.spatial.height() * self.spatial.width()
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.plane_len();
        &self.temporal[c * n..(c + 1) * n]
    }

    /// Flow values of channel `c` in pixels per step.
    pub fn flow_channel(&self, c: usize) -> Vec<f32> {
        dequantize_channel(self.channel(c), self.scale_meta[c])
    }
}

/// Spatial and temporal geometry of the augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Keep every n-th event frame before subsampling.
    pub temporal_stride: usize,
    /// Frames are area-resized to this square size before flow.
    pub frame_size: usize,
    pub crop_size: usize,
    pub crop_offsets: Vec<(usize, usize)>,
    pub keep_frames: usize,
    pub max_gap: usize,
    pub bound_edges: bool,
    pub subsamples_per_event: usize,
    pub sampler: Sampler,
    pub codec: PlaneCodec,
    pub flow: FlowParams,
}

fn grid(offsets: [usize; 3]) -> Vec<(usize, usize)> {
    offsets.iter().flat_map(|&r| offsets.iter().map(move |&c| (r, c))).collect()
}

impl AugmentConfig {
    /// Full-resolution geometry: 86 of 150 frames, 224 crops of 256 frames.
    pub fn full() -> Self {
        Self {
            temporal_stride: 1,
            frame_size: 256,
            crop_size: 224,
            crop_offsets: grid([8, 16, 24]),
            keep_frames: 86,
            max_gap: 2,
            bound_edges: true,
            subsamples_per_event: 8,
            sampler: Sampler::Exact,
            codec: PlaneCodec::None,
            flow: FlowParams::default(),
        }
    }

    /// CPU-scale geometry: every third frame, 17 of 50 kept, 64 crops of 72 frames.
    pub fn desk() -> Self {
        Self {
            temporal_stride: 3,
            frame_size: 72,
            crop_size: 64,
            crop_offsets: grid([2, 4, 6]),
            keep_frames: 17,
            ..Self::full()
        }
    }

    pub fn strided_len(&self) -> usize {
        EVENT_LEN.div_ceil(self.temporal_stride)
    }

    pub fn gap_rule(&self) -> GapRule {
        GapRule {
            n: self.strided_len(),
            k: self.keep_frames,
            max_gap: self.max_gap,
            bound_edges: self.bound_edges,
        }
    }

    pub fn flow_channels(&self) -> usize {
        2 * (self.keep_frames - 1)
    }

    pub fn samples_per_subsample(&self) -> usize {
        2 * self.crop_offsets.len()
    }

    pub fn samples_per_event(&self) -> usize {
        self.subsamples_per_event * self.samples_per_subsample()
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if self.temporal_stride == 0 || self.keep_frames < 2 || self.subsamples_per_event == 0 {
            return Err(Error::Config("stride, keep_frames (>= 2) and subsamples must be positive".into()));
        }
        if self.crop_offsets.is_empty() || self.crop_offsets.len() > u8::MAX as usize {
            return Err(Error::Config("crop offset list must hold 1..=255 entries".into()));
        }
        for &(r, c) in &self.crop_offsets {
            if r + self.crop_size > self.frame_size || c + self.crop_size > self.frame_size {
                return Err(Error::Config(format!(
                    "crop at ({r},{c}) of size {} exceeds frame size {}",
                    self.crop_size, self.frame_size
                )));
            }
        }
        if !self.gap_rule().is_feasible() {
            let rule = self.gap_rule();
            return Err(Error::InfeasibleSubsample {
                total: rule.n,
                keep: rule.k,
                max_gap: rule.max_gap,
            });
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Number of samples produced for `events` events without materializing them.
pub fn count_augmented(events: usize, config: &AugmentConfig) -> usize {
    events * config.samples_per_event()
}

/// Independent random stream for one (event, subsample) work unit.
pub fn unit_rng(seed: u64, event_ordinal: usize, subsample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((event_ordinal as u64) << 16) | subsample as u64);
    rng
}

/// Strided and resized event frames that subsample indices refer to.
pub fn prepare_frames(event: &BoutEvent, config: &AugmentConfig) -> Result<Vec<Frame>> {
    if event.frames.len() != EVENT_LEN {
        return Err(Error::shape("prepare_frames", format!("{EVENT_LEN} frames"), event.frames.len()));
    }
    Ok(event
        .frames
        .iter()
        .step_by(config.temporal_stride)
        .map(|f| {
            if f.height() == config.frame_size && f.width() == config.frame_size {
                f.clone()
            } else {
                f.resize_area(config.frame_size, config.frame_size)
            }
        })
        .collect())
}

/// All flip and crop variants of one subsample.
pub fn expand_subsample<R: Rng + ?Sized>(
    event: &BoutEvent,
    prepared: &[Frame],
    indices: &[usize],
    subsample: usize,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<AugmentedSample>> {
    let event_id = event.id();
    let kept: Vec<&Frame> = indices.iter().map(|&i| &prepared[i]).collect();
    let pick = rng.gen_range(0..kept.len());
    let frame_indices: Vec<u16> = indices.iter().map(|&i| (i * config.temporal_stride) as u16).collect();

    let flows = kept
        .windows(2)
        .enumerate()
        .map(|(k, pair)| {
            farneback_flow(pair[0], pair[1], &config.flow).map_err(|e| Error::Flow {
                provenance: format!(
                    "event {event_id} subsample {subsample} frames {}->{}",
                    frame_indices[k],
                    frame_indices[k + 1]
                ),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let size = config.crop_size;
    let mut out = Vec::with_capacity(config.samples_per_subsample());
    for flip in [false, true] {
        let spatial_full = if flip { kept[pick].flip_vertical() } else { kept[pick].clone() };
        let flows_f: Vec<_> = if flip {
            flows.iter().map(|f| f.flip_vertical()).collect()
        } else {
            flows.clone()
        };
        for (crop, &(top, left)) in config.crop_offsets.iter().enumerate() {
            let spatial = spatial_full.crop(top, left, size, size)?;
            let mut temporal = Vec::with_capacity(flows_f.len() * 2 * size * size);
            let mut scale_meta = Vec::with_capacity(flows_f.len() * 2);
            for f in &flows_f {
                let (planes, scales) = quantize_flow(&f.crop(top, left, size, size)?);
                for (plane, scale) in planes.iter().zip(scales) {
                    temporal.extend(config.codec.apply(plane, size, size)?);
                    scale_meta.push(scale);
                }
            }
            out.push(AugmentedSample {
                spatial,
                channels: scale_meta.len(),
                temporal,
                scale_meta,
                label: event.label,
                provenance: Provenance {
                    event_id: event_id.clone(),
                    subsample: subsample as u8,
                    flip,
                    crop: crop as u8,
                    spatial_frame: frame_indices[pick],
                    frame_indices: frame_indices.clone(),
                },
            });
        }
    }
    Ok(out)
}

/// One subsample unit with its own random stream.
pub fn expand_unit(
    event: &BoutEvent,
    prepared: &[Frame],
    config: &AugmentConfig,
    seed: u64,
    event_ordinal: usize,
    subsample: usize,
) -> Result<Vec<AugmentedSample>> {
    let mut rng = unit_rng(seed, event_ordinal, subsample);
    let indices = subsample_indices(&config.gap_rule(), config.sampler, &mut rng)?;
    expand_subsample(event, prepared, &indices, subsample, config, &mut rng)
}

/// Every augmented sample of one event, in (subsample, flip, crop) order.
/// Subsamples are processed in parallel; the output order is fixed.
pub fn expand_event(event: &BoutEvent, config: &AugmentConfig, seed: u64, event_ordinal: usize) -> Result<Vec<AugmentedSample>> {
    config.validate()?;
    let prepared = prepare_frames(event, config)?;
    let parts = (0..config.subsamples_per_event)
        .into_par_iter()
        .map(|s| expand_unit(event, &prepared, config, seed, event_ordinal, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Streams augmented events into a container writer; returns the sample count.
pub fn augment_into<I>(events: I, config: &AugmentConfig, seed: u64, writer: &mut ContainerWriter) -> Result<usize>
where
    I: IntoIterator<Item = (usize, BoutEvent)>,
{
    let mut written = 0;
    for (ordinal, event) in events {
        for sample in expand_event(&event, config, seed, ordinal)? {
            writer.push(&sample)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Groups sample indices into batches whose members all come from different
/// source events. Batches are filled greedily in shuffled order; the final
/// batches may be smaller when few distinct events remain.
pub fn distinct_source_batches<R: Rng + ?Sized>(sources: &[&str], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut pending: Vec<usize> = (0..sources.len()).collect();
    pending.shuffle(rng);
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = HashSet::with_capacity(batch_size);
        let mut rest = Vec::with_capacity(pending.len());
        for i in pending {
            if batch.len() < batch_size && seen.insert(sources[i]) {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        batches.push(batch);
        pending = rest;
    }
    batches
}

/// File-level split counts, e.g. 28/4/6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 28,
            valid: 4,
            test: 6,
        }
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('/')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("split spec {s:?}: {e}")))?;
        match parts[..] {
            [train, valid, test] if train + valid + test > 0 => Ok(Self { train, valid, test }),
            _ => Err(Error::Config(format!("split spec {s:?} must be train/valid/test counts"))),
        }
    }
}

impl SplitSpec {
    /// Counts for `n` sources: exact when `n` equals the spec total,
    /// otherwise proportional with the remainder assigned to test.
    pub fn counts_for(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.valid + self.test;
        if n == total {
            return (self.train, self.valid, self.test);
        }
        let train = (n * self.train + total / 2) / total;
        let valid = ((n * self.valid + total / 2) / total).min(n - train);
        (train, valid, n - train - valid)
    }

    /// Assigns each distinct source to a split after a seeded shuffle.
    pub fn assign<R: Rng + ?Sized>(&self, sources: &[String], rng: &mut R) -> BTreeMap<String, Split> {
        let mut unique: Vec<String> = sources.to_vec();
        unique.sort();
        unique.dedup();
        unique.shuffle(rng);
        let (train, valid, _) = self.counts_for(unique.len());
        unique
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let split = if i < train {
                    Split::Train
                } else if i < train + valid {
                    Split::Valid
                } else {
                    Split::Test
                };
                (s, split)
            })
            .collect()
    }
}
