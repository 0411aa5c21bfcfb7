//! Raw clip to standardized 256x256, 150-frame bout events.
//!
//! Order per frame: min-max normalization, skewness-driven gamma correction
//! (used only to find the bladder), bladder localization, bladder-anchored
//! crop of the normalized frame. Events are then cut from the cropped clip
//! by a debounced motion detector restricted to dark (tail) pixels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{frame_file_name, Frame, VideoClip};

pub const EVENT_LEN: usize = 150;
pub const CROP_SIZE: usize = 256;
pub const MASK_SIZE: usize = 85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub gamma_param: f64,
    /// Binarization level separating the bladder after gamma correction.
    pub bladder_threshold: u8,
    /// Components smaller than this fraction of the frame are ignored.
    pub min_area_fraction: f64,
    /// Pixels at or above this intensity in both frames do not count as motion.
    pub motion_intensity_threshold: u8,
    /// Motion score threshold as a fraction of height * width * 255.
    pub motion_fraction: f64,
    /// Consecutive above-threshold transitions required to start an event.
    pub debounce: usize,
    /// Frames kept before the detected motion.
    pub lead: usize,
    pub mask_corners: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            gamma_param: 4.3,
            bladder_threshold: 3,
            min_area_fraction: 1e-4,
            motion_intensity_threshold: 200,
            motion_fraction: 0.0038,
            debounce: 3,
            lead: 15,
            mask_corners: false,
        }
    }
}

/// Exactly 150 cropped frames around one detected bout.
#[derive(Clone, Debug, PartialEq)]
pub struct BoutEvent {
    pub frames: Vec<Frame>,
    pub label: u8,
    pub start_index: usize,
    pub source_id: String,
}

impl BoutEvent {
    pub fn id(&self) -> String {
        format!("{}_s{:04}", self.source_id, self.start_index)
    }

    pub fn end_index(&self) -> usize {
        self.start_index + self.frames.len()
    }
}

fn apply_lut(frame: &Frame, lut: &[u8; 256]) -> Frame {
    let pixels = frame.pixels().iter().map(|&p| lut[p as usize]).collect();
    Frame::new(frame.height(), frame.width(), pixels).expect("same shape")
}

/// Per-frame min-max stretch to [0, 255]; constant frames are returned as-is.
pub fn normalize_frame(frame: &Frame) -> Frame {
    let (min, max) = frame
        .pixels()
        .iter()
        .fold((u8::MAX, u8::MIN), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    if min >= max {
        return frame.clone();
    }
    let range = (max - min) as f64;
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        let x = (v as f64 - min as f64).clamp(0.0, range);
        *out = (255.0 * x / range).round() as u8;
    }
    apply_lut(frame, &lut)
}

/// Fisher-Pearson moment coefficient of skewness of the pixel intensities;
/// `None` for a zero-variance frame.
pub fn skewness(frame: &Frame) -> Option<f64> {
    let mut hist = [0u64; 256];
    for &p in frame.pixels() {
        hist[p as usize] += 1;
    }
    let n = frame.pixels().len() as f64;
    let mean = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for (v, &c) in hist.iter().enumerate() {
        let d = v as f64 - mean;
        m2 += c as f64 * d * d;
        m3 += c as f64 * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    if m2 <= 0.0 {
        None
    } else {
        Some(m3 / m2.powf(1.5))
    }
}

pub fn gamma_for(frame: &Frame, param: f64) -> f64 {
    match skewness(frame) {
        Some(s) => (-s / param).exp(),
        None => {
            warn!("gamma correction on a constant frame; using gamma = 1");
            1.0
        }
    }
}

/// Applies out = 255 * (in / 255)^gamma.
pub fn apply_gamma(frame: &Frame, gamma: f64) -> Frame {
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = (255.0 * (v as f64 / 255.0).powf(gamma)).round().clamp(0.0, 255.0) as u8;
    }
    apply_lut(frame, &lut)
}

/// Gamma correction with gamma = exp(-skewness / param).
pub fn gamma_correct(frame: &Frame, param: f64) -> Frame {
    apply_gamma(frame, gamma_for(frame, param))
}

/// Right-most pixel of the dark component reaching furthest right.
///
/// Dark pixels (< threshold) are grouped with 8-connectivity; components
/// below the area floor are dropped. Ties on the column go to the smaller row.
pub fn locate_bladder(frame: &Frame, config: &PreprocessConfig, frame_id: &str) -> Result<(usize, usize)> {
    let (h, w) = (frame.height(), frame.width());
    let min_area = config.min_area_fraction * (h * w) as f64;
    let dark: Vec<bool> = frame.pixels().iter().map(|&p| p < config.bladder_threshold).collect();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    for start in 0..h * w {
        if !dark[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0usize;
        let mut right: (usize, usize) = (start / w, start % w);
        while let Some(idx) = stack.pop() {
            area += 1;
            let (r, c) = (idx / w, idx % w);
            if c > right.1 || (c == right.1 && r < right.0) {
                right = (r, c);
            }
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let n = nr as usize * w + nc as usize;
                    if dark[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        if (area as f64) < min_area {
            continue;
        }
        best = match best {
            Some(b) if b.1 > right.1 || (b.1 == right.1 && b.0 <= right.0) => Some(b),
            _ => Some(right),
        };
    }
    best.ok_or_else(|| Error::BladderNotFound {
        frame: frame_id.to_string(),
    })
}

/// 256x256 window with the anchor mapped to (row 128, column 0); pixels
/// outside the source are white.
pub fn crop_frame(frame: &Frame, bladder: (usize, usize)) -> Frame {
    let top = bladder.0 as isize - (CROP_SIZE / 2) as isize;
    let left = bladder.1 as isize;
    let mut out = Frame::filled(CROP_SIZE, CROP_SIZE, 255);
    for r in 0..CROP_SIZE {
        let sr = top + r as isize;
        if sr < 0 || sr >= frame.height() as isize {
            continue;
        }
        let src = frame.row(sr as usize);
        for c in 0..CROP_SIZE {
            let sc = left + c as isize;
            if sc >= 0 && (sc as usize) < frame.width() {
                out.set(r, c, src[sc as usize]);
            }
        }
    }
    out
}

/// Normalizes, localizes, and crops every frame of a clip.
pub fn crop_clip(clip: &VideoClip, config: &PreprocessConfig, source_id: &str) -> Result<Vec<Frame>> {
    clip.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let norm = normalize_frame(f);
            let corrected = gamma_correct(&norm, config.gamma_param);
            let anchor = locate_bladder(&corrected, config, &format!("{source_id}/{}", frame_file_name(i)))?;
            Ok(crop_frame(&norm, anchor))
        })
        .collect()
}

/// Sum of absolute differences over pixels darker than the motion threshold
/// in either frame.
pub fn motion_score(a: &Frame, b: &Frame, intensity_threshold: u8) -> u64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .filter(|(&x, &y)| x < intensity_threshold || y < intensity_threshold)
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as u64)
        .sum()
}

/// Start frames of debounced motion runs, in order.
pub fn motion_onsets(frames: &[Frame], config: &PreprocessConfig) -> Vec<usize> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let threshold = config.motion_fraction * (first.height() * first.width()) as f64 * 255.0;
    let flags: Vec<bool> = frames
        .windows(2)
        .map(|w| motion_score(&w[0], &w[1], config.motion_intensity_threshold) as f64 >= threshold)
        .collect();
    let need = config.debounce.max(1);
    let mut onsets = Vec::new();
    let mut i = 0;
    while i + need <= flags.len() {
        if flags[i..i + need].iter().all(|&f| f) {
            onsets.push(i);
            i += need;
            while i < flags.len() && flags[i] {
                i += 1;
            }
        } else {
            i += 1;
        }
    }
    onsets
}

/// Cuts non-overlapping 150-frame events from a cropped clip.
pub fn detect_events(
    frames: &[Frame],
    label: u8,
    source_id: &str,
    config: &PreprocessConfig,
) -> Result<Vec<BoutEvent>> {
    if frames.len() < EVENT_LEN {
        return Err(Error::ClipTooShort {
            frames: frames.len(),
            required: EVENT_LEN,
        });
    }
    let onsets = motion_onsets(frames, config);
    let mut starts: Vec<usize> = Vec::new();
    let mut covered_until = 0usize;
    for onset in onsets {
        if !starts.is_empty() && onset < covered_until {
            continue;
        }
        let mut start = onset.saturating_sub(config.lead);
        if start + EVENT_LEN > frames.len() {
            let shifted = frames.len() - EVENT_LEN;
            if !starts.is_empty() && shifted < covered_until {
                warn!("{source_id}: event at {start} shifted back to {shifted}, overlapping the previous event");
            }
            start = shifted;
        }
        covered_until = start + EVENT_LEN;
        starts.push(start);
    }
    if starts.is_empty() {
        info!("{source_id}: no motion detected, using frame 0 as event start");
        starts.push(0);
    }
    Ok(starts
        .into_iter()
        .map(|start| BoutEvent {
            frames: frames[start..start + EVENT_LEN].to_vec(),
            label,
            start_index: start,
            source_id: source_id.to_string(),
        })
        .collect())
}

/// Whitens the two left-hand corner squares of a frame.
pub fn mask_frame(frame: &mut Frame) {
    let (h, w) = (frame.height(), frame.width());
    let size = MASK_SIZE.min(h).min(w);
    for r in (0..size).chain(h - size..h) {
        for c in 0..size {
            frame.set(r, c, 255);
        }
    }
}

pub fn mask_artifacts(mut event: BoutEvent) -> BoutEvent {
    for f in &mut event.frames {
        mask_frame(f);
    }
    event
}

/// Full per-clip preprocessing: crop, detect, optionally mask.
pub fn extract_events(
    clip: &VideoClip,
    label: u8,
    source_id: &str,
    config: &PreprocessConfig,
) -> Result<Vec<BoutEvent>> {
    let cropped = crop_clip(clip, config, source_id)?;
    let events = detect_events(&cropped, label, source_id, config)?;
    Ok(if config.mask_corners {
        events.into_iter().map(mask_artifacts).collect()
    } else {
        events
    })
}

/// Index row describing one stored event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub source_id: String,
    pub start_index: usize,
    pub label: u8,
    pub path: PathBuf,
}

pub const EVENT_INDEX_FILE: &str = "index.jsonl";

pub fn write_event(event: &BoutEvent, root: &Path) -> Result<EventRecord> {
    let id = event.id();
    let rel = PathBuf::from(&id);
    let dir = root.join(&rel);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, f) in event.frames.iter().enumerate() {
        f.write_png(&dir.join(frame_file_name(i)))?;
    }
    Ok(EventRecord {
        event_id: id,
        source_id: event.source_id.clone(),
        start_index: event.start_index,
        label: event.label,
        path: rel,
    })
}

pub fn read_event(record: &EventRecord, root: &Path) -> Result<BoutEvent> {
    let dir = root.join(&record.path);
    let frames = (0..EVENT_LEN)
        .map(|i| Frame::read_png(&dir.join(frame_file_name(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoutEvent {
        frames,
        label: record.label,
        start_index: record.start_index,
        source_id: record.source_id.clone(),
    })
}

pub fn write_event_index(path: &Path, records: &[EventRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("records serialize")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_event_index(path: &Path) -> Result<Vec<EventRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_bout, generate_bout_with, SynthSpec};

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    #[test]
    fn normalize_examples() {
        let constant = Frame::filled(4, 4, 128);
        assert_eq!(normalize_frame(&constant), constant);
        let f = Frame::new(1, 3, vec![50, 100, 150]).unwrap();
        assert_eq!(normalize_frame(&f).pixels(), &[0, 128, 255]);
    }

    #[test]
    fn gamma_examples() {
        // symmetric histogram: skewness 0, gamma 1
        let f = Frame::new(1, 4, vec![10, 20, 30, 40]).unwrap();
        assert!(skewness(&f).unwrap().abs() < 1e-12);
        assert_eq!(gamma_correct(&f, 4.3), f);
        // gamma = e^-1 maps 128 to 198
        let g = (-4.3f64 / 4.3).exp();
        assert!((g - 0.367_879).abs() < 1e-6);
        assert_eq!(apply_gamma(&Frame::filled(1, 1, 128), g).get(0, 0), 198);
        // constant frame: identity
        let c = Frame::filled(3, 3, 77);
        assert_eq!(gamma_correct(&c, 4.3), c);
    }

    #[test]
    fn negative_skew_darkens() {
        let mut px = vec![250u8; 99];
        px.push(0);
        let f = Frame::new(10, 10, px).unwrap();
        assert!(skewness(&f).unwrap() < 0.0);
        let g = gamma_correct(&f, 4.3);
        let mean = |f: &Frame| f.pixels().iter().map(|&p| p as f64).sum::<f64>();
        assert!(mean(&g) < mean(&f));
    }

    #[test]
    fn bladder_right_of_decoy_is_chosen() {
        let mut f = Frame::filled(100, 100, 255);
        for r in 40..50 {
            for c in 10..20 {
                f.set(r, c, 0); // decoy
            }
            for c in 40..52 {
                f.set(r, c, 0); // bladder
            }
        }
        assert_eq!(locate_bladder(&f, &cfg(), "t").unwrap(), (40, 51));
    }

    #[test]
    fn tiny_speck_is_not_a_bladder() {
        let mut f = Frame::filled(512, 512, 255);
        for c in 100..103 {
            f.set(200, c, 0);
        }
        let err = locate_bladder(&f, &cfg(), "frame_0007").unwrap_err();
        assert!(err.to_string().contains("frame_0007"));
    }

    #[test]
    fn crop_anchor_and_padding() {
        let mut f = Frame::filled(512, 512, 0);
        for (i, p) in f.pixels_mut().iter_mut().enumerate() {
            *p = (i % 251) as u8;
        }
        let c = crop_frame(&f, (256, 100));
        assert_eq!(c.get(0, 0), f.get(128, 100));
        assert_eq!(c.get(255, 255), f.get(383, 355));
        assert_eq!(c.get(128, 0), f.get(256, 100));

        let edge = crop_frame(&f, (256, 0));
        assert_eq!(edge.get(10, 0), f.get(138, 0));
        let right = crop_frame(&f, (256, 502));
        assert_eq!(right.get(5, 9), f.get(133, 511));
        assert_eq!(right.get(5, 10), 255);
    }

    #[test]
    fn synthetic_bladder_is_found_within_two_pixels() {
        for size in [256, 512] {
            let spec = SynthSpec {
                frame_height: size,
                frame_width: size,
                frames_per_video: 150,
                ..SynthSpec::default()
            };
            for (i, label) in [(0, 0u8), (1, 1), (2, 0)] {
                let bout = generate_bout(&spec, label, &mut spec.video_rng(i)).unwrap();
                let truth = bout.truth.bladder_right;
                for t in [0, 60, 100] {
                    let norm = normalize_frame(&bout.clip.frames[t]);
                    let corr = gamma_correct(&norm, 4.3);
                    let (r, c) = locate_bladder(&corr, &cfg(), "synthetic").unwrap();
                    assert!(
                        (r as isize - truth.0 as isize).abs() <= 2 && (c as isize - truth.1 as isize).abs() <= 2,
                        "size {size} label {label} t {t}: found ({r},{c}) truth {truth:?}"
                    );
                }
            }
        }
    }

    fn synthetic_clip(frames: usize, onset: usize, label: u8) -> (VideoClip, usize) {
        let spec = SynthSpec {
            frame_height: 256,
            frame_width: 256,
            frames_per_video: frames,
            onset_range: Some((onset, onset)),
            ..SynthSpec::default()
        };
        let bout = generate_bout_with(&spec, label, false, &mut spec.video_rng(4)).unwrap();
        (bout.clip, bout.truth.kinematics.onset)
    }

    #[test]
    fn event_starts_fifteen_frames_before_onset() {
        for label in [0, 1] {
            let (clip, onset) = synthetic_clip(200, 40, label);
            let events = extract_events(&clip, label, "v", &cfg()).unwrap();
            assert_eq!(events.len(), 1, "label {label}");
            let e = &events[0];
            assert_eq!(e.frames.len(), EVENT_LEN);
            assert!((e.start_index as isize - (onset as isize - 15)).abs() <= 3, "label {label}: {}", e.start_index);
        }
    }

    #[test]
    fn static_clip_yields_single_event_at_zero() {
        let spec = SynthSpec {
            frame_height: 256,
            frame_width: 256,
            frames_per_video: 170,
            motion_scale: 0.0,
            ..SynthSpec::default()
        };
        let clip = generate_bout(&spec, 1, &mut spec.video_rng(0)).unwrap().clip;
        let events = extract_events(&clip, 1, "still", &cfg()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].start_index, 0);
    }

    fn moving_square_clip(n: usize, bursts: &[usize]) -> Vec<Frame> {
        (0..n)
            .map(|t| {
                let mut f = Frame::filled(256, 256, 255);
                let moving = bursts.iter().any(|&b| t >= b && t < b + 10);
                let shift = if moving { (t % 2) * 40 } else { 0 };
                for r in 100..180 {
                    for c in 60 + shift..140 + shift {
                        f.set(r, c, 0);
                    }
                }
                f
            })
            .collect()
    }

    #[test]
    fn second_bout_inside_first_event_is_discarded() {
        let frames = moving_square_clip(300, &[40, 100]);
        let events = detect_events(&frames, 0, "two", &cfg()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].start_index, 25);
    }

    #[test]
    fn late_bout_is_shifted_back_to_fit() {
        let frames = moving_square_clip(200, &[150]);
        let events = detect_events(&frames, 0, "late", &cfg()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].start_index, 50);
    }

    #[test]
    fn short_clip_is_rejected() {
        let frames = vec![Frame::filled(256, 256, 255); 149];
        assert!(matches!(
            detect_events(&frames, 0, "short", &cfg()),
            Err(Error::ClipTooShort { frames: 149, .. })
        ));
    }

    #[test]
    fn masking_whitens_corners_only() {
        let mut f = Frame::filled(256, 256, 10);
        f.set(100, 100, 42);
        let e = BoutEvent {
            frames: vec![f],
            label: 0,
            start_index: 0,
            source_id: "m".into(),
        };
        let once = mask_artifacts(e);
        let g = &once.frames[0];
        assert_eq!(g.get(0, 0), 255);
        assert_eq!(g.get(84, 84), 255);
        assert_eq!(g.get(171, 0), 255);
        assert_eq!(g.get(255, 84), 255);
        assert_eq!(g.get(85, 0), 10);
        assert_eq!(g.get(170, 0), 10);
        assert_eq!(g.get(0, 85), 10);
        assert_eq!(g.get(100, 100), 42);
        let twice = mask_artifacts(once.clone());
        assert_eq!(twice, once);
    }

    #[test]
    fn masking_removes_injected_artifact_motion() {
        let spec = SynthSpec {
            frame_height: 256,
            frame_width: 256,
            frames_per_video: 170,
            artifact_probability: 1.0,
            ..SynthSpec::default()
        };
        let bout = generate_bout(&spec, 0, &mut spec.video_rng(2)).unwrap();
        let mut config = cfg();
        config.mask_corners = true;
        let events = extract_events(&bout.clip, 0, "a", &config).unwrap();
        for w in events[0].frames.windows(2) {
            for r in (0..85).chain(171..256) {
                for c in 0..85 {
                    assert_eq!(w[0].get(r, c), w[1].get(r, c));
                }
            }
        }
    }

    #[test]
    fn event_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let e = BoutEvent {
            frames: (0..EVENT_LEN).map(|i| Frame::filled(4, 4, i as u8)).collect(),
            label: 1,
            start_index: 7,
            source_id: "video_0001".into(),
        };
        let rec = write_event(&e, dir.path()).unwrap();
        write_event_index(&dir.path().join(EVENT_INDEX_FILE), &[rec.clone()]).unwrap();
        let idx = read_event_index(&dir.path().join(EVENT_INDEX_FILE)).unwrap();
        assert_eq!(idx, vec![rec.clone()]);
        assert_eq!(read_event(&rec, dir.path()).unwrap(), e);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_is_idempotent(px in proptest::collection::vec(any::<u8>(), 16)) {
                let f = Frame::new(4, 4, px).unwrap();
                let once = normalize_frame(&f);
                prop_assert_eq!(normalize_frame(&once), once.clone());
                let lo = *once.pixels().iter().min().unwrap();
                let hi = *once.pixels().iter().max().unwrap();
                if lo != hi {
                    prop_assert_eq!((lo, hi), (0, 255));
                }
            }

            #[test]
            fn crop_anchor_maps_to_left_center(r in 0usize..300, c in 0usize..300) {
                let mut f = Frame::filled(300, 300, 200);
                f.set(r, c, 1);
                let out = crop_frame(&f, (r, c));
                prop_assert_eq!(out.get(128, 0), 1);
            }
        }
    }
}
