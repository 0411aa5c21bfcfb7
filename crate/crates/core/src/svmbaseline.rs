//! Hand-crafted kinematic baseline: tail tracing, five bout features, and
//! an SVM trained by sequential minimal optimization.
//!
//! Coordinates are (row, col) in pixel-index units, so pixel (r, c) has its
//! centre at (r, c). The fish points left in every crop and the tail runs
//! toward +col from the start point.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::preprocess::{read_event, read_event_index, EventRecord, EVENT_INDEX_FILE};

pub const TRACE_POINTS: usize = 25;
/// Points from the tip used for the tip angle and tip position.
pub const TIP_POINTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DeflectionAxis {
    /// Distance from the horizontal line through the tail base.
    Lateral,
    /// Column offset from the tail base.
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TailConfig {
    pub start: (f64, f64),
    pub step: f64,
    /// Half-width of the search cone around the previous direction, degrees.
    pub cone_degrees: f64,
    /// Local mean intensity above which the march stops.
    pub stop_intensity: f64,
    /// Arc samples darker than (darkest + margin) contribute to the centroid.
    pub darkness_margin: f64,
    pub max_points: usize,
    pub min_points: usize,
    pub points: usize,
    pub peak_prominence: f64,
    pub deflection: DeflectionAxis,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            start: (128.0, 8.0),
            step: 7.0,
            cone_degrees: 60.0,
            stop_intensity: 200.0,
            darkness_margin: 40.0,
            max_points: 25,
            min_points: 10,
            points: TRACE_POINTS,
            peak_prominence: 2.0,
            deflection: DeflectionAxis::Lateral,
        }
    }
}

/// Tail points of one frame, base first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailTrace {
    pub points: Vec<(f64, f64)>,
    pub valid: bool,
    /// Points placed by the march before resampling.
    pub raw_points: usize,
}

impl TailTrace {
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        let raw_points = points.len();
        Self {
            points,
            valid: raw_points >= 2,
            raw_points,
        }
    }

    pub fn arc_length(&self) -> f64 {
        polyline_length(&self.points)
    }

    pub fn flip_vertical(&self, height: usize) -> Self {
        let h = (height - 1) as f64;
        Self {
            points: self.points.iter().map(|&(r, c)| (h - r, c)).collect(),
            ..self.clone()
        }
    }
}

fn polyline_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| dist(w[0], w[1])).sum()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Mean of the pixels within radius 2 of a point.
fn local_mean(frame: &Frame, p: (f64, f64)) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for dr in -2i32..=2 {
        for dc in -2i32..=2 {
            if dr * dr + dc * dc <= 4 {
                sum += frame.sample(p.0 + dr as f64, p.1 + dc as f64);
                n += 1.0;
            }
        }
    }
    sum / n
}

fn inside(frame: &Frame, p: (f64, f64)) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (frame.height() - 1) as f64 && p.1 <= (frame.width() - 1) as f64
}

/// Resamples a poly-line to `n` points equally spaced by arc length.
pub fn resample(pts: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    if pts.len() < 2 || n < 2 {
        return vec![pts.first().copied().unwrap_or((0.0, 0.0)); n];
    }
    let total = polyline_length(pts);
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut walked = 0.0;
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        while seg + 2 < pts.len() && walked + dist(pts[seg], pts[seg + 1]) < target {
            walked += dist(pts[seg], pts[seg + 1]);
            seg += 1;
        }
        let len = dist(pts[seg], pts[seg + 1]);
        let t = if len > 0.0 { ((target - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
    }
    out
}

/// Marches along the tail from the configured start point.
pub fn fit_tail(frame: &Frame, config: &TailConfig) -> TailTrace {
    let mut pts = vec![config.start];
    if !inside(frame, config.start) || local_mean(frame, config.start) > config.stop_intensity {
        return TailTrace {
            points: vec![config.start; config.points],
            valid: false,
            raw_points: 0,
        };
    }
    let mut heading = 0.0f64;
    let cone = config.cone_degrees.to_radians();
    let samples = (2.0 * config.cone_degrees).round().max(2.0) as usize;
    while pts.len() < config.max_points {
        let p = *pts.last().expect("non-empty");
        let arc: Vec<(f64, f64)> = (0..=samples)
            .map(|i| {
                let a = heading - cone + 2.0 * cone * i as f64 / samples as f64;
                let q = (p.0 + config.step * a.sin(), p.1 + config.step * a.cos());
                let v = if inside(frame, q) { frame.sample(q.0, q.1) } else { 255.0 };
                (a, v)
            })
            .collect();
        let darkest = arc.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        if darkest >= config.stop_intensity {
            break;
        }
        let cutoff = darkest + config.darkness_margin;
        let (mut wsum, mut asum) = (0.0, 0.0);
        for &(a, v) in &arc {
            if v < cutoff {
                wsum += cutoff - v;
                asum += (cutoff - v) * a;
            }
        }
        let dir = asum / wsum;
        let next = (p.0 + config.step * dir.sin(), p.1 + config.step * dir.cos());
        if inside(frame, next) && local_mean(frame, next) <= config.stop_intensity {
            pts.push(next);
            heading = dir;
            continue;
        }
        // last partial step: bisect for the farthest point still on the tail
        let (mut lo, mut hi) = (0.0, config.step);
        for _ in 0..12 {
            let mid = 0.5 * (lo + hi);
            let q = (p.0 + mid * dir.sin(), p.1 + mid * dir.cos());
            if inside(frame, q) && local_mean(frame, q) <= config.stop_intensity {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo >= 1.0 {
            pts.push((p.0 + lo * dir.sin(), p.1 + lo * dir.cos()));
        }
        break;
    }
    let raw_points = pts.len();
    TailTrace {
        points: resample(&pts, config.points),
        valid: raw_points >= config.min_points,
        raw_points,
    }
}

/// Fits every frame of a bout in parallel.
pub fn fit_bout(frames: &[Frame], config: &TailConfig) -> Vec<TailTrace> {
    frames.par_iter().map(|f| fit_tail(f, config)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub max_curvature: f64,
    pub n_peaks: f64,
    pub mean_tip_angle: f64,
    pub max_tail_angle: f64,
    pub mean_tip_position: f64,
}

impl FeatureVector {
    pub const NAMES: [&'static str; 5] =
        ["max_curvature", "n_peaks", "mean_tip_angle", "max_tail_angle", "mean_tip_position"];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.max_curvature,
            self.n_peaks,
            self.mean_tip_angle,
            self.max_tail_angle,
            self.mean_tip_position,
        ]
    }
}

/// Angle of the chord a -> b against the +col axis, degrees, positive upward.
fn chord_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    (-(b.0 - a.0)).atan2(b.1 - a.1) * 180.0 / PI
}

pub fn tail_angle(trace: &TailTrace) -> f64 {
    chord_angle(trace.points[0], *trace.points.last().expect("non-empty"))
}

pub fn tip_angle(trace: &TailTrace) -> f64 {
    let n = trace.points.len();
    chord_angle(trace.points[n.saturating_sub(TIP_POINTS)], trace.points[n - 1])
}

/// Reciprocal radius of the circle through three points; 0 when collinear.
pub fn circumscribed_curvature(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let denom = dist(a, b) * dist(b, c) * dist(a, c);
    if denom <= 1e-12 {
        0.0
    } else {
        2.0 * cross.abs() / denom
    }
}

/// Local maxima whose topographic prominence reaches `min_prominence`.
/// Plateaus count once; the series ends are never peaks.
pub fn count_peaks(series: &[f64], min_prominence: f64) -> usize {
    let n = series.len();
    let mut count = 0;
    let mut i = 1;
    while i + 1 < n {
        if series[i] > series[i - 1] {
            let mut j = i;
            while j + 1 < n && series[j + 1] == series[i] {
                j += 1;
            }
            if j + 1 < n && series[j + 1] < series[i] {
                if prominence(series, i, j) >= min_prominence {
                    count += 1;
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    count
}

fn prominence(series: &[f64], start: usize, end: usize) -> f64 {
    let h = series[start];
    let mut left_min = h;
    for k in (0..start).rev() {
        if series[k] > h {
            break;
        }
        left_min = left_min.min(series[k]);
    }
    let mut right_min = h;
    for &v in &series[end + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Five bout features; refuses bouts with any invalid frame.
pub fn extract_features(traces: &[TailTrace], config: &TailConfig) -> Result<FeatureVector> {
    if traces.is_empty() {
        return Err(Error::InvalidTrace("empty bout".into()));
    }
    if let Some(i) = traces.iter().position(|t| !t.valid || t.points.len() < 3) {
        return Err(Error::InvalidTrace(format!("frame {i} has no usable tail trace")));
    }
    let mut max_curvature = 0.0f64;
    let mut angles = Vec::with_capacity(traces.len());
    let mut tip_sum = 0.0;
    let mut position_sum = 0.0;
    for t in traces {
        for w in t.points.windows(3) {
            max_curvature = max_curvature.max(circumscribed_curvature(w[0], w[1], w[2]));
        }
        angles.push(tail_angle(t).abs());
        tip_sum += tip_angle(t).abs();
        let base = t.points[0];
        let len = t.arc_length();
        let tail = &t.points[t.points.len().saturating_sub(TIP_POINTS)..];
        let deflection = tail
            .iter()
            .map(|p| match config.deflection {
                DeflectionAxis::Lateral => (p.0 - base.0).abs(),
                DeflectionAxis::Horizontal => (p.1 - base.1).abs(),
            })
            .sum::<f64>()
            / tail.len() as f64;
        position_sum += if len > 0.0 { (deflection / len).min(1.0) } else { 0.0 };
    }
    let n = traces.len() as f64;
    Ok(FeatureVector {
        max_curvature,
        n_peaks: count_peaks(&angles, config.peak_prominence) as f64,
        mean_tip_angle: tip_sum / n,
        max_tail_angle: angles.iter().cloned().fold(0.0, f64::max),
        mean_tip_position: position_sum / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum Kernel {
    Rbf { gamma: f64 },
    Linear,
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    #[serde(flatten)]
    pub kernel: Kernel,
    pub c: f64,
}

impl SvmConfig {
    pub fn rbf(gamma: f64, c: f64) -> Self {
        Self {
            kernel: Kernel::Rbf { gamma },
            c,
        }
    }

    pub fn linear(c: f64) -> Self {
        Self {
            kernel: Kernel::Linear,
            c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gamma_ok = match self.kernel {
            Kernel::Rbf { gamma } => gamma.is_finite() && gamma > 0.0,
            Kernel::Linear => true,
        };
        if !gamma_ok || !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Invalid(format!("invalid SVM configuration {self:?}")));
        }
        Ok(())
    }
}

/// 4 gamma x 4 C rbf points followed by 4 linear C values.
pub fn default_grid() -> Vec<SvmConfig> {
    let cs = [0.01, 0.1, 1.0, 10.0];
    let mut grid = Vec::with_capacity(20);
    for gamma in [1e-1, 1e-2, 1e-3, 1e-4] {
        for c in cs {
            grid.push(SvmConfig::rbf(gamma, c));
        }
    }
    grid.extend(cs.iter().map(|&c| SvmConfig::linear(c)));
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iterations: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub config: SvmConfig,
    pub support_vectors: Vec<Vec<f64>>,
    /// alpha_i of each support vector, within [0, C].
    pub alphas: Vec<f64>,
    /// +1 for class 1, -1 for class 0.
    pub signs: Vec<f64>,
    pub bias: f64,
    /// Dual objective 1/2 a'Qa - sum(a) over all training samples.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(self.alphas.iter().zip(&self.signs))
            .map(|(sv, (a, s))| a * s * self.config.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.decision(x) > 0.0)
    }
}

/// Soft-margin dual solved with maximal-violating-pair SMO.
pub fn train_svm(x: &[Vec<f64>], labels: &[u8], config: SvmConfig, options: SolverOptions) -> Result<SvmModel> {
    config.validate()?;
    let n = x.len();
    if n != labels.len() {
        return Err(Error::Invalid(format!("{n} samples but {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange {
            label: l as usize,
            classes: 2,
        });
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Invalid("SVM training needs samples of both classes".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = y[i] * y[j] * config.kernel.eval(&x[i], &x[j]);
            q[i * n + j] = v;
            q[j * n + i] = v;
        }
    }
    let c = config.c;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    let residual = loop {
        // i maximizes -y G over I_up, j minimizes it over I_low
        let (mut gmax, mut gmin) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut bi, mut bj) = (usize::MAX, usize::MAX);
        for t in 0..n {
            let v = -y[t] * grad[t];
            let up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if up && v > gmax {
                gmax = v;
                bi = t;
            }
            if low && v < gmin {
                gmin = v;
                bj = t;
            }
        }
        let gap = gmax - gmin;
        if bi == usize::MAX || bj == usize::MAX || gap < options.tolerance {
            break gap.max(0.0);
        }
        if iterations >= options.max_iterations {
            return Err(Error::NoConvergence {
                iterations,
                residual: gap,
            });
        }
        iterations += 1;
        let (i, j) = (bi, bj);
        let (ai, aj) = (alpha[i], alpha[j]);
        let qij = q[i * n + j];
        if y[i] != y[j] {
            let quad = (q[i * n + i] + q[j * n + j] + 2.0 * qij).max(1e-12);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q[i * n + i] + q[j * n + j] - 2.0 * qij).max(1e-12);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += q[t * n + i] * di + q[t * n + j] * dj;
        }
    };

    // rho from free vectors, else the middle of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            free_n += 1;
        }
    }
    let rho = if free_n > 0 { free_sum / free_n as f64 } else { 0.5 * (ub + lb) };
    let objective = (0..n).map(|t| 0.5 * alpha[t] * (grad[t] - 1.0)).sum::<f64>();

    let mut model = SvmModel {
        config,
        support_vectors: Vec::new(),
        alphas: Vec::new(),
        signs: Vec::new(),
        bias: -rho,
        objective,
        kkt_residual: residual,
        iterations,
    };
    for t in 0..n {
        if alpha[t] > 0.0 {
            model.support_vectors.push(x[t].clone());
            model.alphas.push(alpha[t]);
            model.signs.push(y[t]);
        }
    }
    Ok(model)
}

/// Per-feature zero-mean, unit-variance transform fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Invalid("cannot standardize zero rows".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // constant features pass through centred
        let std = std.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

/// Standardizer plus SVM, trained on raw features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub standardizer: Standardizer,
    pub model: SvmModel,
}

impl Classifier {
    pub fn train(x: &[Vec<f64>], labels: &[u8], config: SvmConfig, options: SolverOptions) -> Result<Self> {
        let standardizer = Standardizer::fit(x)?;
        let model = train_svm(&standardizer.apply_all(x), labels, config, options)?;
        Ok(Self { standardizer, model })
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        self.model.predict(&self.standardizer.apply(x))
    }

    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[u8]) -> f64 {
        let hits = x.iter().zip(labels).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn class_indices(labels: &[u8], rng: &mut ChaCha8Rng) -> [Vec<usize>; 2] {
    let mut by_class = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l == 1)].push(i);
    }
    for c in &mut by_class {
        c.shuffle(rng);
    }
    by_class
}

/// Stratified partition into `k` folds; each class is dealt round-robin with
/// the deal position carried across classes so fold sizes stay balanced.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in class_indices(labels, &mut rng) {
        if class.len() < k {
            return Err(Error::Invalid(format!(
                "a class has {} samples, fewer than the {k} folds",
                class.len()
            )));
        }
        for i in class {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified (train, test) index split.
pub fn stratified_split(labels: &[u8], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in class_indices(labels, &mut rng) {
        let n_test = (class.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&class[..n_test]);
        train.extend_from_slice(&class[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    #[serde(flatten)]
    pub config: SvmConfig,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            test_fraction: 0.15,
            seed: 462019,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<GridRow>,
    pub best: SvmConfig,
    pub cv_accuracy: f64,
    pub test_accuracy: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub test_predictions: Vec<u8>,
}

/// Stratified hold-out split, k-fold grid search on the training part,
/// retrain of the winner, and held-out accuracy.
pub fn cross_validate(x: &[Vec<f64>], labels: &[u8], grid: &[SvmConfig], options: &CvOptions) -> Result<CvReport> {
    if x.len() != labels.len() {
        return Err(Error::Invalid(format!("{} samples but {} labels", x.len(), labels.len())));
    }
    if grid.is_empty() {
        return Err(Error::Invalid("empty hyperparameter grid".into()));
    }
    for class in 0..2u8 {
        let n = labels.iter().filter(|&&l| l == class).count();
        if n < options.folds {
            return Err(Error::Invalid(format!(
                "class {class} has {n} samples, fewer than the {} folds",
                options.folds
            )));
        }
    }
    let (train_idx, test_idx) = stratified_split(labels, options.test_fraction, options.seed)?;
    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
    let train_y: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let folds = stratified_folds(&train_y, options.folds, options.seed ^ 0xf01d)?;

    let rows = grid
        .par_iter()
        .map(|&config| {
            let mut accs = Vec::with_capacity(folds.len());
            for (k, held) in folds.iter().enumerate() {
                let fit: Vec<usize> = folds
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .flat_map(|(_, f)| f.iter().copied())
                    .collect();
                let fx: Vec<Vec<f64>> = fit.iter().map(|&i| train_x[i].clone()).collect();
                let fy: Vec<u8> = fit.iter().map(|&i| train_y[i]).collect();
                let clf = Classifier::train(&fx, &fy, config, options.solver)?;
                let hx: Vec<Vec<f64>> = held.iter().map(|&i| train_x[i].clone()).collect();
                let hy: Vec<u8> = held.iter().map(|&i| train_y[i]).collect();
                accs.push(clf.accuracy(&hx, &hy));
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            Ok(GridRow {
                config,
                fold_accuracies: accs,
                mean_accuracy: mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // first row wins ties, so grid order decides
    let best_row = rows
        .iter()
        .fold(None::<&GridRow>, |acc, r| match acc {
            Some(b) if b.mean_accuracy >= r.mean_accuracy => Some(b),
            _ => Some(r),
        })
        .expect("non-empty grid");
    let clf = Classifier::train(&train_x, &train_y, best_row.config, options.solver)?;
    let test_predictions: Vec<u8> = test_idx.iter().map(|&i| clf.predict(&x[i])).collect();
    let hits = test_idx.iter().zip(&test_predictions).filter(|(&i, &p)| labels[i] == p).count();
    Ok(CvReport {
        best: best_row.config,
        cv_accuracy: best_row.mean_accuracy,
        test_accuracy: hits as f64 / test_idx.len().max(1) as f64,
        train_count: train_idx.len(),
        test_count: test_idx.len(),
        rows,
        train_indices: train_idx,
        test_indices: test_idx,
        test_predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub event_id: String,
    pub label: u8,
    pub features: Option<FeatureVector>,
    pub invalid_frames: usize,
}

/// Traces and featurizes every stored event.
pub fn featurize_events(root: &Path, config: &TailConfig) -> Result<Vec<FeatureRow>> {
    let records = read_event_index(&root.join(EVENT_INDEX_FILE))?;
    records.iter().map(|r| featurize_event(r, root, config)).collect()
}

pub fn featurize_event(record: &EventRecord, root: &Path, config: &TailConfig) -> Result<FeatureRow> {
    let event = read_event(record, root)?;
    let traces = fit_bout(&event.frames, config);
    let invalid_frames = traces.iter().filter(|t| !t.valid).count();
    let features = if invalid_frames == 0 {
        Some(extract_features(&traces, config)?)
    } else {
        None
    };
    Ok(FeatureRow {
        event_id: record.event_id.clone(),
        label: record.label,
        features,
        invalid_frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub features: Vec<FeatureRow>,
    pub dropped: usize,
    pub cv: CvReport,
}

/// Features for every event, then cross-validation over the valid ones.
pub fn run_baseline(
    rows: Vec<FeatureRow>,
    grid: &[SvmConfig],
    options: &CvOptions,
) -> Result<BaselineReport> {
    let valid: Vec<&FeatureRow> = rows.iter().filter(|r| r.features.is_some()).collect();
    let x: Vec<Vec<f64>> = valid.iter().map(|r| r.features.expect("filtered").to_vec()).collect();
    let y: Vec<u8> = valid.iter().map(|r| r.label).collect();
    let dropped = rows.len() - valid.len();
    if dropped > 0 {
        log::info!("dropped {dropped} events with invalid tail traces");
    }
    let cv = cross_validate(&x, &y, grid, options)?;
    Ok(BaselineReport {
        features: rows,
        dropped,
        cv,
    })
}
