//! Aggregation of relevance maps: class and confidence averages, the
//! per-frame relevance profile, the corner-mass artifact detector and
//! overlay rendering.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::RelevanceRecord;
use crate::frame::Frame;
use crate::preprocess::{CROP_SIZE, MASK_SIZE};

pub const CONFIDENCE_WINDOW: usize = 104;
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    All,
    Class,
    Confidence,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GroupBy::All),
            "class" => Ok(GroupBy::Class),
            "confidence" => Ok(GroupBy::Confidence),
            _ => Err(Error::Config(format!("unknown grouping {s:?} (all, class, confidence)"))),
        }
    }
}

/// Sample-averaged, channel-summed map of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapAggregate {
    pub key: String,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    #[serde(skip)]
    pub mean_map: Vec<f64>,
    /// Sum of the per-sample relevance totals.
    pub total_relevance: f64,
    /// Set on a trailing confidence window shorter than the window size.
    #[serde(default)]
    pub partial: bool,
}

impl HeatmapAggregate {
    pub fn mean_total(&self) -> f64 {
        self.mean_map.iter().sum()
    }
}

fn check_shapes<'a>(records: impl IntoIterator<Item = &'a RelevanceRecord>) -> Result<Option<(usize, usize)>> {
    let mut shape = None;
    for r in records {
        let s = (r.height(), r.width());
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::shape("aggregate_heatmaps", format!("{prev:?}"), format!("{s:?}")));
            }
            _ => {}
        }
    }
    Ok(shape)
}

/// Mean of the channel sums of `records`; `None` for an empty group.
pub fn aggregate(key: &str, records: &[&RelevanceRecord]) -> Result<Option<HeatmapAggregate>> {
    let Some((height, width)) = check_shapes(records.iter().copied())? else {
        warn!("group {key} is empty and was skipped");
        return Ok(None);
    };
    let mut sum = vec![0.0; height * width];
    let mut total = 0.0;
    for r in records {
        let s = r.channel_sum();
        total += s.iter().sum::<f64>();
        for (a, v) in sum.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = records.len() as f64;
    Ok(Some(HeatmapAggregate {
        key: key.to_string(),
        height,
        width,
        count: records.len(),
        mean_map: sum.into_iter().map(|v| v / n).collect(),
        total_relevance: total,
        partial: false,
    }))
}

/// Groups maps by the class whose score was decomposed, or into one group.
/// Confidence grouping goes through [`confidence_windows`].
pub fn aggregate_heatmaps(records: &[RelevanceRecord], group_by: GroupBy) -> Result<Vec<HeatmapAggregate>> {
    check_shapes(records)?;
    match group_by {
        GroupBy::All => Ok(aggregate("all", &records.iter().collect::<Vec<_>>())?.into_iter().collect()),
        GroupBy::Class => {
            let mut groups: BTreeMap<usize, Vec<&RelevanceRecord>> = BTreeMap::new();
            for r in records {
                groups.entry(r.target_class).or_default().push(r);
            }
            let mut out = Vec::new();
            for (class, members) in groups {
                out.extend(aggregate(&format!("class{class}"), &members)?);
            }
            Ok(out)
        }
        GroupBy::Confidence => Ok(confidence_windows(records, CONFIDENCE_WINDOW)?.into_iter().map(|w| w.aggregate).collect()),
    }
}

/// Relevance per flow frame: frame `k` collects channels `2k` and `2k + 1`.
pub fn frame_relevance_distribution(values: &[f32], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || channels % 2 != 0 || values.len() % channels != 0 {
        return Err(Error::Invalid(format!(
            "frame distribution needs a temporal map with an even channel count, got {channels}"
        )));
    }
    let plane = values.len() / channels;
    Ok((0..channels / 2)
        .map(|k| values[2 * k * plane..(2 * k + 2) * plane].iter().map(|&v| v as f64).sum())
        .collect())
}

/// Relevance over event time, averaged across records. Each flow frame's
/// relevance is spread evenly over the event frames between its two source
/// frames.
pub fn event_time_distribution(records: &[RelevanceRecord], event_len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; event_len];
    if records.is_empty() {
        return Ok(out);
    }
    for r in records {
        let per_frame = frame_relevance_distribution(&r.values, r.channels())?;
        if r.frame_indices.len() != per_frame.len() + 1 {
            return Err(Error::Invalid(format!(
                "{}: {} frame indices for {} flow frames",
                r.event_id,
                r.frame_indices.len(),
                per_frame.len()
            )));
        }
        for (k, mass) in per_frame.iter().enumerate() {
            let a = (r.frame_indices[k] as usize).min(event_len - 1);
            let b = (r.frame_indices[k + 1] as usize).min(event_len).max(a + 1);
            let share = mass / (b - a) as f64;
            for slot in &mut out[a..b] {
                *slot += share;
            }
        }
    }
    let n = records.len() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// `-ln(ln P(1) / ln P(0))`; probabilities are clamped into `(eps, 1 - eps)`.
pub fn confidence(p0: f64, p1: f64) -> f64 {
    confidence_in_base(p0, p1, std::f64::consts::E)
}

pub fn confidence_in_base(p0: f64, p1: f64, base: f64) -> f64 {
    let clamp = |p: f64| {
        let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if c != p {
            warn!("probability {p} clamped to {c}");
        }
        c
    };
    let (p0, p1) = (clamp(p0), clamp(p1));
    // -log(a / b) written as log(b / a) so equal probabilities give +0
    (p0.log(base) / p1.log(base)).log(base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWindow {
    pub index: usize,
    pub min_confidence: f64,
    pub max_confidence: f64,
    /// Pooled corner fraction of the window's members.
    pub corner_mass: f64,
    pub aggregate: HeatmapAggregate,
}

/// Sorts negative classifications by increasing confidence and averages
/// consecutive windows. A shorter trailing window is kept and flagged.
pub fn confidence_windows(records: &[RelevanceRecord], window: usize) -> Result<Vec<ConfidenceWindow>> {
    if window == 0 {
        return Err(Error::Config("confidence window must be positive".into()));
    }
    let mut negatives: Vec<(f64, &RelevanceRecord)> = records
        .iter()
        .filter(|r| r.probabilities[0] >= r.probabilities[1])
        .map(|r| (confidence(r.probabilities[0], r.probabilities[1]), r))
        .collect();
    negatives.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    for (index, chunk) in negatives.chunks(window).enumerate() {
        let members: Vec<&RelevanceRecord> = chunk.iter().map(|(_, r)| *r).collect();
        if let Some(mut agg) = aggregate(&format!("window{index}"), &members)? {
            agg.partial = chunk.len() < window;
            out.push(ConfidenceWindow {
                index,
                min_confidence: chunk[0].0,
                max_confidence: chunk[chunk.len() - 1].0,
                corner_mass: corner_mass_of(&members),
                aggregate: agg,
            });
        }
    }
    Ok(out)
}

/// Axis-aligned rectangles `(top, left, height, width)` in map coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub rects: Vec<(usize, usize, usize, usize)>,
}

impl Region {
    /// The two masked corner squares of the bladder-anchored crop, scaled to
    /// a `frame_size` frame and shifted by the augmentation crop offset.
    pub fn masked_corners(frame_size: usize, crop_offset: (usize, usize), map_height: usize, map_width: usize) -> Self {
        let side = (MASK_SIZE as f64 * frame_size as f64 / CROP_SIZE as f64).round() as isize;
        let f = frame_size as isize;
        let (top, left) = (crop_offset.0 as isize, crop_offset.1 as isize);
        let mut rects = Vec::new();
        for row0 in [0, f - side] {
            let r0 = (row0 - top).clamp(0, map_height as isize);
            let r1 = (row0 + side - top).clamp(0, map_height as isize);
            let c0 = (-left).clamp(0, map_width as isize);
            let c1 = (side - left).clamp(0, map_width as isize);
            if r1 > r0 && c1 > c0 {
                rects.push((r0 as usize, c0 as usize, (r1 - r0) as usize, (c1 - c0) as usize));
            }
        }
        Self { rects }
    }

    pub fn flip_vertical(&self, map_height: usize) -> Self {
        Self {
            rects: self
                .rects
                .iter()
                .map(|&(t, l, h, w)| (map_height - t - h, l, h, w))
                .collect(),
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rects
            .iter()
            .any(|&(t, l, h, w)| row >= t && row < t + h && col >= l && col < l + w)
    }
}

/// Relevance inside `region` and in total for a row-major 2-D map.
pub fn region_mass(map: &[f64], width: usize, region: &Region) -> (f64, f64) {
    let mut inside = 0.0;
    let mut total = 0.0;
    for (i, &v) in map.iter().enumerate() {
        total += v;
        if region.contains(i / width, i % width) {
            inside += v;
        }
    }
    (inside, total)
}

/// Fraction of relevance inside `region`; zero for an all-zero map.
pub fn corner_mass(map: &[f64], width: usize, region: &Region) -> f64 {
    let (inside, total) = region_mass(map, width, region);
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

/// Pooled corner fraction over records, each with its own crop geometry.
pub fn corner_mass_of(records: &[&RelevanceRecord]) -> f64 {
    let (mut inside, mut total) = (0.0, 0.0);
    for r in records {
        let region = Region::masked_corners(r.frame_size, r.crop_offset, r.height(), r.width());
        let (i, t) = region_mass(&r.channel_sum(), r.width(), &region);
        inside += i;
        total += t;
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

/// 99th percentile of a map, falling back to the maximum when it is zero.
fn robust_scale(map: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = map.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() - 1) as f64 * 0.99).round() as usize;
    let p99 = sorted[idx];
    if p99 > 0.0 {
        p99
    } else {
        sorted[sorted.len() - 1].max(0.0)
    }
}

/// Grayscale base with positive relevance blended towards red.
pub fn overlay_image(base: &Frame, map: &[f64]) -> Result<RgbImage> {
    let (h, w) = (base.height(), base.width());
    if map.len() != h * w {
        return Err(Error::shape("render_overlay", format!("{h}x{w}"), map.len()));
    }
    let scale = robust_scale(map);
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, (&g, &v)) in base.pixels().iter().zip(map).enumerate() {
        let t = if scale > 0.0 && v > 0.0 { (v / scale).min(1.0) } else { 0.0 };
        let g = g as f64;
        let red = (g + t * (255.0 - g)).round().clamp(0.0, 255.0) as u8;
        let other = (g * (1.0 - t)).round().clamp(0.0, 255.0) as u8;
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb([red, other, other]));
    }
    Ok(img)
}

pub fn render_overlay(base: &Frame, map: &[f64], path: &Path) -> Result<()> {
    overlay_image(base, map)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Map values scaled to a grayscale frame (zero black, robust maximum white).
pub fn map_to_frame(map: &[f64], height: usize, width: usize) -> Result<Frame> {
    let scale = robust_scale(map);
    let pixels = map
        .iter()
        .map(|&v| if scale > 0.0 { (255.0 * v / scale).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    Frame::new(height, width, pixels)
}
