//! Dense Farneback optical flow.
//!
//! Each pixel neighborhood is approximated by a quadratic polynomial
//! `f(x) = x'Ax + b'x + c` fitted with Gaussian weights. Displacements are
//! found by matching expansion coefficients between frames, aggregated over a
//! box window, and refined coarse-to-fine over an image pyramid.
//!
//! Coordinates: `x` is the column offset, `y` the row offset. A flow vector
//! `(dx, dy)` at pixel `p` means the content at `p` in the first frame is
//! found at `p + (dx, dy)` in the second.

use std::sync::atomic::{AtomicBool, Ordering};

use image::{Rgb, RgbImage};
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_scale: f64,
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
    /// Full width of the expansion neighborhood (odd).
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.8,
            levels: 10,
            window: 10,
            iterations: 10,
            poly_n: 13,
            poly_sigma: 1.8,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::Config(format!("pyramid_scale must be in (0, 1), got {}", self.pyramid_scale)));
        }
        if self.levels == 0 || self.iterations == 0 || self.window == 0 {
            return Err(Error::Config("levels, iterations and window must be positive".into()));
        }
        if self.poly_n % 2 == 0 || self.poly_n < 3 {
            return Err(Error::Config(format!("poly_n must be odd and >= 3, got {}", self.poly_n)));
        }
        if self.poly_sigma <= 0.0 {
            return Err(Error::Config("poly_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> (f32, f32) {
        let i = row * self.width + col;
        (self.dx[i], self.dy[i])
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f32 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| (x * x + y * y).sqrt())
            .fold(0.0, f32::max)
    }

    /// Mirror about the horizontal axis: rows reversed, vertical component negated.
    pub fn flip_vertical(&self) -> FlowField {
        let mut out = FlowField::zeros(self.height, self.width);
        for r in 0..self.height {
            let src = (self.height - 1 - r) * self.width;
            let dst = r * self.width;
            for c in 0..self.width {
                out.dx[dst + c] = self.dx[src + c];
                out.dy[dst + c] = -self.dy[src + c];
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<FlowField> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "FlowField::crop",
                format!("window inside {}x{}", self.height, self.width),
                format!("{height}x{width} at ({top},{left})"),
            ));
        }
        let mut out = FlowField::zeros(height, width);
        for r in 0..height {
            let s = (top + r) * self.width + left;
            out.dx[r * width..(r + 1) * width].copy_from_slice(&self.dx[s..s + width]);
            out.dy[r * width..(r + 1) * width].copy_from_slice(&self.dy[s..s + width]);
        }
        Ok(out)
    }

    /// Hue encodes direction, brightness encodes magnitude relative to the maximum.
    pub fn to_color_image(&self) -> RgbImage {
        let max = self.max_magnitude().max(1e-6);
        RgbImage::from_fn(self.width as u32, self.height as u32, |c, r| {
            let (dx, dy) = self.at(r as usize, c as usize);
            let mag = (dx * dx + dy * dy).sqrt() / max;
            let hue = (dy.atan2(dx).to_degrees() + 360.0) % 360.0;
            Rgb(hsv_to_rgb(hue, 1.0, mag))
        })
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Single-channel float image.
#[derive(Clone, Debug)]
struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    fn from_frame(frame: &Frame) -> Self {
        Self {
            height: frame.height(),
            width: frame.width(),
            data: frame.pixels().iter().map(|&p| p as f32).collect(),
        }
    }

    fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Bilinear sample with clamped coordinates.
    #[inline]
    fn sample(&self, row: f32, col: f32) -> f32 {
        let r = row.clamp(0.0, (self.height - 1) as f32);
        let c = col.clamp(0.0, (self.width - 1) as f32);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = r - r0 as f32;
        let fc = c - c0 as f32;
        let p = |rr: usize, cc: usize| self.data[rr * self.width + cc];
        (1.0 - fr) * ((1.0 - fc) * p(r0, c0) + fc * p(r0, c1)) + fr * ((1.0 - fc) * p(r1, c0) + fc * p(r1, c1))
    }

    /// Bilinear resize with pixel-center alignment.
    fn resize(&self, height: usize, width: usize) -> Plane {
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Plane::zeros(height, width);
        for r in 0..height {
            let sr = (r as f32 + 0.5) * sy - 0.5;
            for c in 0..width {
                let sc = (c as f32 + 0.5) * sx - 0.5;
                out.data[r * width + c] = self.sample(sr, sc);
            }
        }
        out
    }

    fn gaussian_blur(&self, sigma: f64) -> Plane {
        if sigma < 1e-3 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = {
            let raw: Vec<f64> = (-radius..=radius)
                .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| (v / s) as f32).collect()
        };
        let rows = correlate_rows(self, &[&kernel])[0].clone();
        correlate_cols(&rows, &[&kernel]).remove(0)
    }
}

/// Horizontal correlation with several kernels of the same odd length,
/// clamping at the borders.
fn correlate_rows(src: &Plane, kernels: &[&[f32]]) -> Vec<Plane> {
    let (h, w) = (src.height, src.width);
    let radius = (kernels[0].len() / 2) as isize;
    let mut outs: Vec<Plane> = kernels.iter().map(|_| Plane::zeros(h, w)).collect();
    let mut padded = vec![0.0f32; w + 2 * radius as usize];
    for r in 0..h {
        let row = &src.data[r * w..(r + 1) * w];
        for (i, p) in padded.iter_mut().enumerate() {
            let c = (i as isize - radius).clamp(0, w as isize - 1) as usize;
            *p = row[c];
        }
        for (k, kernel) in kernels.iter().enumerate() {
            let out = &mut outs[k].data[r * w..(r + 1) * w];
            for (c, o) in out.iter_mut().enumerate() {
                let window = &padded[c..c + kernel.len()];
                *o = window.iter().zip(kernel.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }
    outs
}

/// Vertical correlation, clamping at the borders.
fn correlate_cols(src: &Plane, kernels: &[&[f32]]) -> Vec<Plane> {
    let (h, w) = (src.height, src.width);
    let radius = (kernels[0].len() / 2) as isize;
    let mut outs: Vec<Plane> = kernels.iter().map(|_| Plane::zeros(h, w)).collect();
    for r in 0..h {
        for (k, kernel) in kernels.iter().enumerate() {
            let out = &mut outs[k].data[r * w..(r + 1) * w];
            for (i, &kv) in kernel.iter().enumerate() {
                let sr = (r as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                let row = &src.data[sr * w..(sr + 1) * w];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += kv * v;
                }
            }
        }
    }
    outs
}

/// Quadratic expansion coefficients of every pixel.
#[derive(Clone, Debug)]
pub struct PolyExpansion {
    pub height: usize,
    pub width: usize,
    pub c: Vec<f32>,
    /// Linear coefficients along columns and rows.
    pub bx: Vec<f32>,
    pub by: Vec<f32>,
    /// Symmetric quadratic form entries A11 (xx), A22 (yy), A12 (xy).
    pub axx: Vec<f32>,
    pub ayy: Vec<f32>,
    pub axy: Vec<f32>,
}

/// Inverse of a 6x6 matrix by Gauss-Jordan elimination with partial pivoting.
fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for k in 0..6 {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for row in 0..6 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in 0..6 {
                        a[row][k] -= f * a[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}

/// Fits `f(x, y) = r0 + r1 x + r2 y + r3 x^2 + r4 y^2 + r5 xy` around every pixel.
pub fn polynomial_expansion(frame: &Frame, poly_n: usize, poly_sigma: f64) -> PolyExpansion {
    expand_plane(&Plane::from_frame(frame), poly_n, poly_sigma)
}

fn expand_plane(src: &Plane, poly_n: usize, poly_sigma: f64) -> PolyExpansion {
    let n = (poly_n / 2) as isize;
    let offsets: Vec<f64> = (-n..=n).map(|i| i as f64).collect();
    let g: Vec<f64> = offsets
        .iter()
        .map(|x| (-x * x / (2.0 * poly_sigma * poly_sigma)).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gs).collect();

    // Gram matrix of the basis under the separable Gaussian weights.
    let basis = |x: f64, y: f64| [1.0, x, y, x * x, y * y, x * y];
    let mut gram = [[0.0; 6]; 6];
    for (iy, &y) in offsets.iter().enumerate() {
        for (ix, &x) in offsets.iter().enumerate() {
            let wgt = g[iy] * g[ix];
            let b = basis(x, y);
            for i in 0..6 {
                for j in 0..6 {
                    gram[i][j] += wgt * b[i] * b[j];
                }
            }
        }
    }
    let ginv = invert6(gram);

    let k0: Vec<f32> = g.iter().map(|&v| v as f32).collect();
    let k1: Vec<f32> = g.iter().zip(&offsets).map(|(&v, &x)| (v * x) as f32).collect();
    let k2: Vec<f32> = g.iter().zip(&offsets).map(|(&v, &x)| (v * x * x) as f32).collect();

    let horiz = correlate_rows(src, &[&k0, &k1, &k2]);
    let [h0, h1, h2] = [&horiz[0], &horiz[1], &horiz[2]];
    let from_h0 = correlate_cols(h0, &[&k0, &k1, &k2]);
    let from_h1 = correlate_cols(h1, &[&k0, &k1]);
    let from_h2 = correlate_cols(h2, &[&k0]);
    // Weighted moments in basis order 1, x, y, x^2, y^2, xy.
    let moments = [
        &from_h0[0].data,
        &from_h1[0].data,
        &from_h0[1].data,
        &from_h2[0].data,
        &from_h0[2].data,
        &from_h1[1].data,
    ];

    let len = src.height * src.width;
    let mut out = PolyExpansion {
        height: src.height,
        width: src.width,
        c: vec![0.0; len],
        bx: vec![0.0; len],
        by: vec![0.0; len],
        axx: vec![0.0; len],
        ayy: vec![0.0; len],
        axy: vec![0.0; len],
    };
    let ginv32: Vec<[f32; 6]> = ginv.iter().map(|row| row.map(|v| v as f32)).collect();
    for p in 0..len {
        let m = moments.map(|mm| mm[p]);
        let r: Vec<f32> = ginv32.iter().map(|row| row.iter().zip(&m).map(|(a, b)| a * b).sum()).collect();
        out.c[p] = r[0];
        out.bx[p] = r[1];
        out.by[p] = r[2];
        out.axx[p] = r[3];
        out.ayy[p] = r[4];
        out.axy[p] = 0.5 * r[5];
    }
    out
}

/// Mean over a `window`-wide box (left-heavy split for even widths),
/// clamped at borders, applied to every lane of `src`.
fn box_mean<const N: usize>(src: &[[f32; N]], height: usize, width: usize, window: usize) -> Vec<[f32; N]> {
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    let norm = 1.0 / window as f32;
    fn pass<const N: usize>(
        n: usize,
        before: usize,
        after: usize,
        norm: f32,
        get: impl Fn(usize) -> [f32; N],
        mut put: impl FnMut(usize, [f32; N]),
    ) {
        let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
        let mut acc = [0.0f32; N];
        for i in -(before as isize)..=after as isize {
            let v = get(clamp(i));
            for k in 0..N {
                acc[k] += v[k];
            }
        }
        for i in 0..n {
            put(i, acc.map(|a| a * norm));
            let leaving = get(clamp(i as isize - before as isize));
            let entering = get(clamp(i as isize + after as isize + 1));
            for k in 0..N {
                acc[k] += entering[k] - leaving[k];
            }
        }
    }
    let mut tmp = vec![[0.0f32; N]; height * width];
    for r in 0..height {
        let row = &src[r * width..(r + 1) * width];
        let dst = &mut tmp[r * width..(r + 1) * width];
        pass(width, before, after, norm, |c| row[c], |c, v| dst[c] = v);
    }
    let mut out = vec![[0.0f32; N]; height * width];
    for c in 0..width {
        pass(height, before, after, norm, |r| tmp[r * width + c], |r, v| out[r * width + c] = v);
    }
    out
}

/// Coefficients used by the displacement update, interleaved per pixel as
/// (bx, by, axx, ayy, axy).
fn interleave(e: &PolyExpansion) -> Vec<[f32; 5]> {
    (0..e.height * e.width)
        .map(|p| [e.bx[p], e.by[p], e.axx[p], e.ayy[p], e.axy[p]])
        .collect()
}

/// One displacement refinement at a single pyramid level.
fn update_flow(prev: &[[f32; 5]], next: &[[f32; 5]], h: usize, w: usize, flow: &mut FlowField, window: usize) {
    let mut terms = vec![[0.0f32; 5]; h * w];
    let (maxr, maxc) = ((h - 1) as f32, (w - 1) as f32);
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let (dx, dy) = (flow.dx[p], flow.dy[p]);
            let sr = (r as f32 + dy).clamp(0.0, maxr);
            let sc = (c as f32 + dx).clamp(0.0, maxc);
            let r0 = sr.floor() as usize;
            let c0 = sc.floor() as usize;
            let r1 = (r0 + 1).min(h - 1);
            let c1 = (c0 + 1).min(w - 1);
            let fr = sr - r0 as f32;
            let fc = sc - c0 as f32;
            let (w00, w01, w10, w11) = ((1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc);
            let (q00, q01, q10, q11) = (&next[r0 * w + c0], &next[r0 * w + c1], &next[r1 * w + c0], &next[r1 * w + c1]);
            let n: [f32; 5] = std::array::from_fn(|k| w00 * q00[k] + w01 * q01[k] + w10 * q10[k] + w11 * q11[k]);
            let q = &prev[p];
            let axx = 0.5 * (q[2] + n[2]);
            let ayy = 0.5 * (q[3] + n[3]);
            let axy = 0.5 * (q[4] + n[4]);
            let db1 = -0.5 * (n[0] - q[0]) + axx * dx + axy * dy;
            let db2 = -0.5 * (n[1] - q[1]) + axy * dx + ayy * dy;
            terms[p] = [
                axx * axx + axy * axy,
                axy * (axx + ayy),
                axy * axy + ayy * ayy,
                axx * db1 + axy * db2,
                axy * db1 + ayy * db2,
            ];
        }
    }
    let sums = box_mean(&terms, h, w, window);
    for (p, [g11, g12, g22, h1, h2]) in sums.into_iter().enumerate() {
        let det = g11 * g22 - g12 * g12 + 1e-3;
        flow.dx[p] = (g22 * h1 - g12 * h2) / det;
        flow.dy[p] = (g11 * h2 - g12 * h1) / det;
    }
}

fn resize_flow(flow: &FlowField, height: usize, width: usize, factor: f32) -> FlowField {
    let dx = Plane {
        height: flow.height,
        width: flow.width,
        data: flow.dx.clone(),
    }
    .resize(height, width);
    let dy = Plane {
        height: flow.height,
        width: flow.width,
        data: flow.dy.clone(),
    }
    .resize(height, width);
    FlowField {
        height,
        width,
        dx: dx.data.into_iter().map(|v| v * factor).collect(),
        dy: dy.data.into_iter().map(|v| v * factor).collect(),
    }
}

/// Coarser levels are too small for the box window and their estimates only
/// add noise that upsampling then magnifies.
const MIN_LEVEL_SIZE: usize = 32;

static SKIP_WARNED: AtomicBool = AtomicBool::new(false);

/// Coarse-to-fine Farneback flow from `prev` to `next`.
pub fn farneback_flow(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if prev.height() != next.height() || prev.width() != next.width() {
        return Err(Error::shape(
            "farneback_flow",
            format!("{}x{}", prev.height(), prev.width()),
            format!("{}x{}", next.height(), next.width()),
        ));
    }
    let (h, w) = (prev.height(), prev.width());
    let p0 = Plane::from_frame(prev);
    let p1 = Plane::from_frame(next);
    let mut flow: Option<FlowField> = None;
    for level in (0..params.levels).rev() {
        let scale = params.pyramid_scale.powi(level as i32);
        let lh = (h as f64 * scale).round() as usize;
        let lw = (w as f64 * scale).round() as usize;
        let min_side = MIN_LEVEL_SIZE.max(params.poly_n);
        if lh < min_side || lw < min_side {
            let msg = format!("pyramid level {level} ({lh}x{lw}) is smaller than {min_side} pixels; skipped");
            if SKIP_WARNED.swap(true, Ordering::Relaxed) {
                debug!("{msg}");
            } else {
                warn!("{msg} (further skips logged at debug level)");
            }
            continue;
        }
        let (a, b) = if level == 0 {
            (p0.clone(), p1.clone())
        } else {
            let sigma = (1.0 / scale - 1.0) * 0.5;
            (
                p0.gaussian_blur(sigma).resize(lh, lw),
                p1.gaussian_blur(sigma).resize(lh, lw),
            )
        };
        let ea = expand_plane(&a, params.poly_n, params.poly_sigma);
        let eb = expand_plane(&b, params.poly_n, params.poly_sigma);
        let mut current = match flow.take() {
            None => FlowField::zeros(lh, lw),
            Some(f) => resize_flow(&f, lh, lw, (1.0 / params.pyramid_scale) as f32),
        };
        let (ea, eb) = (interleave(&ea), interleave(&eb));
        for _ in 0..params.iterations {
            update_flow(&ea, &eb, lh, lw, &mut current, params.window);
        }
        flow = Some(current);
    }
    let flow = flow.unwrap_or_else(|| FlowField::zeros(h, w));
    if !flow.is_finite() {
        return Err(Error::Flow {
            provenance: String::new(),
            message: "non-finite displacement".into(),
        });
    }
    Ok(flow)
}
