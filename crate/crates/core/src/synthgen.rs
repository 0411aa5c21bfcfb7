//! Procedural swim-bout videos with known ground truth.
//!
//! Every clip shows a head-fixed fish seen from above: a light body with a
//! dark eye-like decoy, a darker swim bladder, and a tapered tail built from
//! 25 joints. Class 1 (prey) bouts keep the trunk almost still and sweep the
//! tail center and tip once; class 0 (spontaneous) bouts oscillate every
//! joint with high amplitude several times. Each clip carries a static faint
//! texture in the two left-hand corner squares of the standard crop window;
//! when the artifact flag is drawn, that texture wobbles for the duration of
//! the bout.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, VideoClip};

pub const N_JOINTS: usize = 25;
pub const N_SEGMENTS: usize = N_JOINTS - 1;
pub const TAIL_LENGTH: f64 = 160.0;
/// Column offset from the bladder's right edge to the tail base.
pub const TAIL_BASE_OFFSET: f64 = 8.0;
/// Side of the corner squares that carry the agarose texture, in crop pixels.
pub const CORNER_SIZE: usize = 85;
pub const CROP_SIZE: usize = 256;
pub const MIN_FRAME_SIZE: usize = 256;

const TRUNK: std::ops::Range<usize> = 0..8;
const MID: std::ops::Range<usize> = 8..16;
const TIP: std::ops::Range<usize> = 16..24;

const BACKGROUND_CENTER: f64 = 240.0;
const BACKGROUND_EDGE: f64 = 180.0;
const BODY_INTENSITY: f64 = 172.0;
const EYE_INTENSITY: f64 = 12.0;
const BLADDER_INTENSITY: f64 = 4.0;
const TAIL_BASE_INTENSITY: f64 = 80.0;
const TAIL_TIP_INTENSITY: f64 = 110.0;
const TAIL_BASE_WIDTH: f64 = 8.0;
const TAIL_TIP_WIDTH: f64 = 3.5;
const TEXTURE_AMPLITUDE: f64 = 9.0;
const ARTIFACT_AMPLITUDE_PX: f64 = 2.0;

/// Joint-chain description of the tail in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPose {
    /// (row, col) of the first joint.
    pub base_point: (f64, f64),
    /// Angle of each segment relative to the previous one; the first is
    /// relative to the +col axis.
    pub joint_angles: Vec<f64>,
    pub segment_length: f64,
}

impl TailPose {
    pub fn straight(base_point: (f64, f64)) -> Self {
        Self {
            base_point,
            joint_angles: vec![0.0; N_SEGMENTS],
            segment_length: TAIL_LENGTH / N_SEGMENTS as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_angles.len() < 8 {
            return Err(Error::Invalid(format!(
                "tail pose needs at least 8 joint angles, got {}",
                self.joint_angles.len()
            )));
        }
        if let Some(a) = self.joint_angles.iter().find(|a| a.abs() >= PI / 2.0) {
            return Err(Error::Invalid(format!("joint angle {a} outside (-pi/2, pi/2)")));
        }
        Ok(())
    }

    /// Joint positions (row, col) from base to tip.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.joint_angles.len() + 1);
        let (mut r, mut c) = self.base_point;
        let mut heading = 0.0;
        pts.push((r, c));
        for &a in &self.joint_angles {
            heading += a;
            r += self.segment_length * heading.sin();
            c += self.segment_length * heading.cos();
            pts.push((r, c));
        }
        pts
    }

    pub fn arc_length(&self) -> f64 {
        self.segment_length * self.joint_angles.len() as f64
    }
}

/// Generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frames_per_video: usize,
    pub fps: f64,
    /// Fraction of positive (prey) videos.
    pub class_balance: f64,
    /// Fraction of negative videos whose corner texture moves with the bout.
    pub artifact_probability: f64,
    /// Multiplies every joint amplitude; 0 gives a static scene.
    pub motion_scale: f64,
    /// Inclusive range of bout onset frames; `None` picks a range that lets
    /// a 150-frame event with a 15-frame lead fit.
    pub onset_range: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_videos: 38,
            frame_height: 512,
            frame_width: 512,
            frames_per_video: 200,
            fps: 300.0,
            class_balance: 0.439,
            artifact_probability: 0.0,
            motion_scale: 1.0,
            onset_range: None,
            seed: 462019,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_height < MIN_FRAME_SIZE || self.frame_width < MIN_FRAME_SIZE {
            return Err(Error::Config(format!(
                "frame size {}x{} is below the {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE} minimum",
                self.frame_height, self.frame_width
            )));
        }
        if self.frames_per_video < 150 {
            return Err(Error::Config(format!(
                "frames_per_video must be at least 150, got {}",
                self.frames_per_video
            )));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::Config(format!("class_balance {} not in [0,1]", self.class_balance)));
        }
        if !(0.0..=1.0).contains(&self.artifact_probability) {
            return Err(Error::Config(format!(
                "artifact_probability {} not in [0,1]",
                self.artifact_probability
            )));
        }
        let (lo, hi) = self.onset_bounds();
        if lo > hi {
            return Err(Error::Config(format!("empty onset range ({lo}, {hi})")));
        }
        Ok(())
    }

    fn onset_bounds(&self) -> (usize, usize) {
        self.onset_range.unwrap_or_else(|| {
            let hi = (self.frames_per_video + 15).saturating_sub(150).max(20).min(self.frames_per_video - 1);
            (20.min(hi), hi)
        })
    }

    /// Deterministic per-video RNG, independent of generation order.
    pub fn video_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }
}

/// Motion parameters drawn for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub onset: usize,
    pub duration: usize,
    pub oscillations: usize,
    /// Peak angle per joint (radians) during the bout.
    pub amplitudes: Vec<f64>,
    pub residual_fraction: f64,
    pub residual_period: f64,
    pub residual_decay: f64,
}

impl Kinematics {
    fn draw(label: u8, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = spec.onset_bounds();
        let onset = rng.gen_range(lo..=hi);
        let duration = rng.gen_range(36..=45);
        let (oscillations, trunk, mid, tip) = if label == 1 {
            (1, 3.0, 36.0, 28.0)
        } else {
            (rng.gen_range(4..=5), 28.0, 30.0, 26.0)
        };
        let mut amplitudes = vec![0.0; N_SEGMENTS];
        for (range, total_deg) in [(TRUNK, trunk), (MID, mid), (TIP, tip)] {
            let jitter: f64 = rng.gen_range(0.85..1.0);
            let per_joint = (total_deg * jitter).to_radians() / range.len() as f64;
            for a in &mut amplitudes[range] {
                *a = per_joint * spec.motion_scale;
            }
        }
        Self {
            onset,
            duration,
            oscillations,
            amplitudes,
            residual_fraction: 0.1,
            residual_period: 24.0,
            residual_decay: 40.0,
        }
    }

    /// Common temporal factor applied to every joint amplitude.
    pub fn phase(&self, t: usize) -> f64 {
        let t = t as f64;
        let start = self.onset as f64;
        let end = start + self.duration as f64;
        if t <= start {
            0.0
        } else if t <= end {
            (2.0 * PI * self.oscillations as f64 * (t - start) / self.duration as f64).sin()
        } else {
            let dt = t - end;
            self.residual_fraction * (2.0 * PI * dt / self.residual_period).sin() * (-dt / self.residual_decay).exp()
        }
    }

    pub fn in_bout(&self, t: usize) -> bool {
        t > self.onset && t <= self.onset + self.duration
    }

    pub fn joint_angles(&self, t: usize) -> Vec<f64> {
        let p = self.phase(t);
        self.amplitudes.iter().map(|a| a * p).collect()
    }
}

/// Ground truth logged by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoutTruth {
    pub label: u8,
    pub artifact: bool,
    pub kinematics: Kinematics,
    /// Right-most dark pixel of the bladder, (row, col).
    pub bladder_right: (usize, usize),
    pub tail_base: (f64, f64),
    pub segment_length: f64,
    /// Top-left of the standard 256x256 crop window in frame coordinates.
    pub crop_origin: (isize, isize),
}

impl BoutTruth {
    pub fn pose(&self, t: usize) -> TailPose {
        TailPose {
            base_point: self.tail_base,
            joint_angles: self.kinematics.joint_angles(t),
            segment_length: self.segment_length,
        }
    }

    /// Temporal standard deviation of each trunk joint angle, averaged over
    /// the trunk joints.
    pub fn trunk_angle_std(&self, frames: usize) -> f64 {
        let series: Vec<Vec<f64>> = (0..frames).map(|t| self.kinematics.joint_angles(t)).collect();
        let mut total = 0.0;
        for j in TRUNK {
            let vals: Vec<f64> = series.iter().map(|a| a[j]).collect();
            total += std_dev(&vals);
        }
        total / TRUNK.len() as f64
    }

    /// The two corner squares in frame coordinates as (top, left, size).
    pub fn corner_regions(&self) -> [(isize, isize, usize); 2] {
        let (r0, c0) = self.crop_origin;
        [
            (r0, c0, CORNER_SIZE),
            (r0 + (CROP_SIZE - CORNER_SIZE) as isize, c0, CORNER_SIZE),
        ]
    }
}

fn std_dev(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug)]
pub struct GeneratedBout {
    pub clip: VideoClip,
    pub truth: BoutTruth,
}

/// Generates one clip of the requested class; the artifact flag is drawn
/// from `spec.artifact_probability` for negatives.
pub fn generate_bout(spec: &SynthSpec, class_label: u8, rng: &mut ChaCha8Rng) -> Result<GeneratedBout> {
    spec.validate()?;
    let artifact = class_label == 0 && rng.gen_bool(spec.artifact_probability);
    generate_bout_with(spec, class_label, artifact, rng)
}

pub fn generate_bout_with(
    spec: &SynthSpec,
    class_label: u8,
    artifact: bool,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedBout> {
    spec.validate()?;
    if class_label > 1 {
        return Err(Error::LabelOutOfRange {
            label: class_label as usize,
            classes: 2,
        });
    }
    let (h, w) = (spec.frame_height, spec.frame_width);
    let kin = Kinematics::draw(class_label, spec, rng);
    let bladder_col = (w as isize / 2 - 128).max(56) + rng.gen_range(-6..=6);
    let bladder_row = h as isize / 2 + rng.gen_range(-6..=6);
    let texture = Texture::draw(rng);

    let scene = Scene::new(h, w, bladder_row, bladder_col, &texture);
    let (anchor_row, anchor_col) = scene.bladder_right;
    let truth = BoutTruth {
        label: class_label,
        artifact,
        kinematics: kin,
        bladder_right: scene.bladder_right,
        tail_base: (bladder_row as f64 + 0.5, anchor_col as f64 + TAIL_BASE_OFFSET + 0.5),
        segment_length: TAIL_LENGTH / N_SEGMENTS as f64,
        crop_origin: crop_origin(anchor_row, anchor_col),
    };

    let mut frames = Vec::with_capacity(spec.frames_per_video);
    for t in 0..spec.frames_per_video {
        let mut canvas = scene.base.clone();
        if artifact && truth.kinematics.in_bout(t) {
            let tau = (t - truth.kinematics.onset) as f64 / truth.kinematics.duration as f64;
            let shift = ARTIFACT_AMPLITUDE_PX * (2.0 * PI * 2.0 * tau).sin();
            for (top, left, size) in truth.corner_regions() {
                scene.paint_texture(&mut canvas, &texture, top, left, size, shift, 0.5 * shift);
            }
        }
        let pose = truth.pose(t);
        pose.validate()?;
        render_tail(&mut canvas, w, h, &pose);
        let pixels = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        frames.push(Frame::new(h, w, pixels)?);
    }
    Ok(GeneratedBout {
        clip: VideoClip::new(frames, spec.fps),
        truth,
    })
}

/// Smooth band-limited texture made of a few oriented sinusoids.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..PI);
                let wavelength: f64 = rng.gen_range(12.0..24.0);
                let k = 2.0 * PI / wavelength;
                (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0))
            })
            .collect();
        Self { waves }
    }

    fn value(&self, row: f64, col: f64) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        let v: f64 = self.waves.iter().map(|(kr, kc, ph, a)| a * (kr * row + kc * col + ph).sin()).sum();
        TEXTURE_AMPLITUDE * v / norm
    }
}

struct Scene {
    base: Vec<f64>,
    background: Vec<f64>,
    width: usize,
    height: usize,
    bladder_right: (usize, usize),
}

impl Scene {
    fn new(h: usize, w: usize, bladder_row: isize, bladder_col: isize, texture: &Texture) -> Self {
        let (cr, cc) = (h as f64 / 2.0, w as f64 / 2.0);
        let dmax2 = cr * cr + cc * cc;
        let mut background = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2);
                background[r * w + c] = BACKGROUND_CENTER - (BACKGROUND_CENTER - BACKGROUND_EDGE) * d2 / dmax2;
            }
        }
        let mut base = background.clone();
        let br = bladder_row as f64;
        let bc = bladder_col as f64;
        // Body, then the eye-like decoy, then the bladder whose right edge
        // sits exactly at `bladder_col - 1`.
        fill_ellipse(&mut base, w, h, (br, bc - 22.0), (15.0, 36.0), BODY_INTENSITY);
        fill_ellipse(&mut base, w, h, (br - 1.0, bc - 40.0), (5.0, 5.5), EYE_INTENSITY);
        let bladder = fill_ellipse(&mut base, w, h, (br, bc - 8.0), (6.5, 8.0), BLADDER_INTENSITY);
        let bladder_right = bladder
            .iter()
            .copied()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("bladder ellipse covers pixels");
        let mut scene = Self {
            base,
            background,
            width: w,
            height: h,
            bladder_right,
        };
        let origin = crop_origin(bladder_right.0, bladder_right.1);
        for (top, left) in [(origin.0, origin.1), (origin.0 + (CROP_SIZE - CORNER_SIZE) as isize, origin.1)] {
            let mut base = std::mem::take(&mut scene.base);
            scene.paint_texture(&mut base, texture, top, left, CORNER_SIZE, 0.0, 0.0);
            scene.base = base;
        }
        scene
    }

    #[allow(clippy::too_many_arguments)]
    fn paint_texture(
        &self,
        canvas: &mut [f64],
        texture: &Texture,
        top: isize,
        left: isize,
        size: usize,
        shift_col: f64,
        shift_row: f64,
    ) {
        for r in top.max(0)..(top + size as isize).min(self.height as isize) {
            for c in left.max(0)..(left + size as isize).min(self.width as isize) {
                let idx = r as usize * self.width + c as usize;
                canvas[idx] = self.background[idx] + texture.value(r as f64 - shift_row, c as f64 - shift_col);
            }
        }
    }
}

fn crop_origin(anchor_row: usize, anchor_col: usize) -> (isize, isize) {
    (anchor_row as isize - (CROP_SIZE / 2) as isize, anchor_col as isize)
}

/// Hard-edged ellipse fill; returns the covered pixels.
fn fill_ellipse(
    canvas: &mut [f64],
    w: usize,
    h: usize,
    center: (f64, f64),
    radii: (f64, f64),
    value: f64,
) -> Vec<(usize, usize)> {
    let mut covered = Vec::new();
    let r0 = (center.0 - radii.0).floor().max(0.0) as usize;
    let r1 = ((center.0 + radii.0).ceil() as usize).min(h - 1);
    let c0 = (center.1 - radii.1).floor().max(0.0) as usize;
    let c1 = ((center.1 + radii.1).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dr = (r as f64 + 0.5 - center.0) / radii.0;
            let dc = (c as f64 + 0.5 - center.1) / radii.1;
            if dr * dr + dc * dc <= 1.0 {
                canvas[r * w + c] = value;
                covered.push((r, c));
            }
        }
    }
    covered
}

/// Anti-aliased tapered poly-line through the pose's joints.
pub fn render_tail(canvas: &mut [f64], w: usize, h: usize, pose: &TailPose) {
    let pts = pose.points();
    let n = pts.len() - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[i + 1]);
        let f0 = i as f64 / n as f64;
        let f1 = (i + 1) as f64 / n as f64;
        let half0 = 0.5 * (TAIL_BASE_WIDTH + (TAIL_TIP_WIDTH - TAIL_BASE_WIDTH) * f0);
        let half1 = 0.5 * (TAIL_BASE_WIDTH + (TAIL_TIP_WIDTH - TAIL_BASE_WIDTH) * f1);
        let i0 = TAIL_BASE_INTENSITY + (TAIL_TIP_INTENSITY - TAIL_BASE_INTENSITY) * f0;
        let i1 = TAIL_BASE_INTENSITY + (TAIL_TIP_INTENSITY - TAIL_BASE_INTENSITY) * f1;
        let pad = half0.max(half1) + 1.0;
        let rmin = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
        let rmax = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(h - 1);
        let cmin = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
        let cmax = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(w - 1);
        let (dr, dc) = (b.0 - a.0, b.1 - a.1);
        let len2 = dr * dr + dc * dc;
        for r in rmin..=rmax {
            for c in cmin..=cmax {
                let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
                let t = (((pr - a.0) * dr + (pc - a.1) * dc) / len2).clamp(0.0, 1.0);
                let (qr, qc) = (a.0 + t * dr, a.1 + t * dc);
                let dist = ((pr - qr).powi(2) + (pc - qc).powi(2)).sqrt();
                let half = half0 + (half1 - half0) * t;
                let coverage = (half + 0.5 - dist).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let target = i0 + (i1 - i0) * t;
                    let idx = r * w + c;
                    let blended = canvas[idx] * (1.0 - coverage) + target * coverage;
                    if blended < canvas[idx] {
                        canvas[idx] = blended;
                    }
                }
            }
        }
    }
}

/// One row of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: PathBuf,
    pub label: u8,
    pub artifact: bool,
    pub truth: BoutTruth,
    pub spec: SynthSpec,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Label and artifact flag for video `index`, drawn from its own stream.
pub fn draw_video(spec: &SynthSpec, index: usize) -> Result<GeneratedBout> {
    let mut rng = spec.video_rng(index);
    let label = u8::from(rng.gen_bool(spec.class_balance));
    generate_bout(spec, label, &mut rng)
}

/// Writes `n_videos` clip directories plus a JSON-lines manifest into `out`.
pub fn generate_dataset(spec: &SynthSpec, out: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = (0..spec.n_videos)
        .into_par_iter()
        .map(|i| {
            let bout = draw_video(spec, i)?;
            let id = format!("video_{i:04}");
            let rel = PathBuf::from(&id);
            bout.clip.write_dir(&out.join(&rel))?;
            Ok(ManifestRow {
                id,
                path: rel,
                label: bout.truth.label,
                artifact: bout.truth.artifact,
                truth: bout.truth,
                spec: spec.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("manifest rows serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            frame_height: 256,
            frame_width: 256,
            frames_per_video: 160,
            ..SynthSpec::default()
        }
    }

    fn region_changes(clip: &VideoClip, region: (isize, isize, usize), frames: std::ops::Range<usize>) -> u64 {
        let (top, left, size) = region;
        let mut total = 0u64;
        for t in frames {
            let (a, b) = (&clip.frames[t], &clip.frames[t + 1]);
            let rows = top.max(0) as usize..(top + size as isize).clamp(0, a.height() as isize) as usize;
            let cols = left.max(0) as usize..(left + size as isize).clamp(0, a.width() as isize) as usize;
            for r in rows {
                for c in cols.clone() {
                    total += (a.get(r, c) as i32 - b.get(r, c) as i32).unsigned_abs() as u64;
                }
            }
        }
        total
    }

    #[test]
    fn rejects_small_frames() {
        let spec = SynthSpec {
            frame_width: 200,
            ..small_spec()
        };
        let mut rng = spec.video_rng(0);
        assert!(matches!(generate_bout(&spec, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn prey_trunk_is_steadier_than_spontaneous() {
        let spec = small_spec();
        let p = generate_bout(&spec, 1, &mut spec.video_rng(3)).unwrap();
        let s = generate_bout(&spec, 0, &mut spec.video_rng(3)).unwrap();
        let n = spec.frames_per_video;
        assert!(p.truth.trunk_angle_std(n) < s.truth.trunk_angle_std(n));
    }

    #[test]
    fn artifact_moves_only_when_enabled() {
        let spec = SynthSpec {
            artifact_probability: 1.0,
            ..small_spec()
        };
        let with = generate_bout(&spec, 0, &mut spec.video_rng(1)).unwrap();
        assert!(with.truth.artifact);
        let k = &with.truth.kinematics;
        let bout = k.onset..k.onset + k.duration;
        let [top_left, bottom_left] = with.truth.corner_regions();
        assert!(region_changes(&with.clip, top_left, bout.clone()) > 0);
        assert!(region_changes(&with.clip, bottom_left, bout) > 0);

        let spec = small_spec();
        let without = generate_bout(&spec, 0, &mut spec.video_rng(1)).unwrap();
        assert!(!without.truth.artifact);
        let all = 0..spec.frames_per_video - 1;
        for region in without.truth.corner_regions() {
            assert_eq!(region_changes(&without.clip, region, all.clone()), 0);
        }
    }

    #[test]
    fn static_control_has_identical_frames() {
        let spec = SynthSpec {
            motion_scale: 0.0,
            frames_per_video: 150,
            ..small_spec()
        };
        let clip = generate_bout(&spec, 0, &mut spec.video_rng(0)).unwrap().clip;
        assert!(clip.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = small_spec();
        let a = draw_video(&spec, 5).unwrap();
        let b = draw_video(&spec, 5).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn tail_stays_inside_frame_and_background_is_light() {
        let spec = small_spec();
        for label in [0, 1] {
            let bout = generate_bout(&spec, label, &mut spec.video_rng(9)).unwrap();
            for t in 0..spec.frames_per_video {
                for (r, c) in bout.truth.pose(t).points() {
                    assert!(r > 2.0 && r < 253.0 && c > 2.0 && c < 253.0, "joint ({r},{c}) at t={t}");
                }
            }
            let f = &bout.clip.frames[0];
            assert!(f.get(5, 250) as f64 >= BACKGROUND_EDGE - TEXTURE_AMPLITUDE);
            assert!(f.get(128, 240) >= 200);
        }
    }

    #[test]
    fn class_balance_within_binomial_interval() {
        let spec = SynthSpec {
            n_videos: 1000,
            ..small_spec()
        };
        let positives = (0..spec.n_videos)
            .filter(|&i| spec.video_rng(i).gen_bool(spec.class_balance))
            .count();
        // 99% normal-approximation interval around 439: 439 +/- 2.576 * sqrt(1000 * .439 * .561)
        let half = 2.576 * (1000.0f64 * 0.439 * 0.561).sqrt();
        assert!((positives as f64 - 439.0).abs() <= half, "{positives}");
    }

    #[test]
    fn joint_angle_std_separates_classes() {
        let spec = small_spec();
        let n = spec.frames_per_video;
        let mut feats = Vec::new();
        for i in 0..60 {
            let label = (i % 2) as u8;
            let mut rng = spec.video_rng(i);
            let b = generate_bout(&spec, label, &mut rng).unwrap();
            feats.push((b.truth.trunk_angle_std(n), label));
        }
        // One-dimensional logistic fit collapses to a threshold; any threshold
        // between the class ranges classifies perfectly.
        let max_pos = feats.iter().filter(|f| f.1 == 1).map(|f| f.0).fold(f64::MIN, f64::max);
        let min_neg = feats.iter().filter(|f| f.1 == 0).map(|f| f.0).fold(f64::MAX, f64::min);
        assert!(max_pos < min_neg);
    }

    #[test]
    fn dataset_manifest_is_deterministic() {
        let spec = SynthSpec {
            n_videos: 3,
            frames_per_video: 150,
            ..small_spec()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let rows = generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        assert_eq!(rows.len(), 3);
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(read_manifest(&a.path().join(MANIFEST_FILE)).unwrap(), rows);
    }
}
