//! Layer kinds with forward and exact backward passes.
//!
//! Activations carry a leading batch dimension: `(N, C, H, W)` for spatial
//! layers and `(N, F)` after the first linear layer, which flattens.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{matmul_acc, matmul_tn_acc, transpose};
use super::tensor::Tensor;
use super::{Mode, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    LogSoftmax,
}

fn out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::LogSoftmax => "logsoftmax",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                bad(format!("conv parameters must be positive: {self:?}"))
            }
            LayerSpec::MaxPool { kernel, stride, padding } if kernel == 0 || stride == 0 || 2 * padding > kernel => {
                bad(format!("maxpool needs kernel, stride >= 1 and padding <= kernel / 2: {self:?}"))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => bad(format!("dropout rate {rate} not in [0, 1)")),
            LayerSpec::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => bad(format!("linear sizes must be positive: {self:?}")),
            _ => Ok(()),
        }
    }

    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: String| Err(Error::shape(self.kind(), expected, format!("{input:?}")));
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match input {
                [c, h, w] if *c == in_channels => {
                    match (out_len(*h, kernel, stride, padding), out_len(*w, kernel, stride, padding)) {
                        (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                        _ => mismatch(format!("spatial size >= kernel {kernel} after padding")),
                    }
                }
                _ => mismatch(format!("[{in_channels}, H, W]")),
            },
            LayerSpec::MaxPool { kernel, stride, padding } => match input {
                [c, h, w] => match (out_len(*h, kernel, stride, padding), out_len(*w, kernel, stride, padding)) {
                    (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                    _ => mismatch(format!("spatial size >= kernel {kernel} after padding")),
                },
                _ => mismatch("[C, H, W]".into()),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.iter().product::<usize>() == in_features {
                    Ok(vec![out_features])
                } else {
                    mismatch(format!("{in_features} features"))
                }
            }
            LayerSpec::LogSoftmax => match input {
                [_] => Ok(input.to_vec()),
                _ => mismatch("[K]".into()),
            },
        }
    }

    /// Shapes of (weight, bias) for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    /// Inputs feeding each output unit, for He initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }
}

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

/// A layer instance with its parameters.
#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    id: u64,
    version: u64,
}

#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ParamGrads<T> {
    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        self.weight.add_assign(&other.weight);
        self.bias.add_assign(&other.bias);
    }
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    layer_id: u64,
    version: u64,
    saved: Saved<T>,
}

#[derive(Clone, Debug)]
enum Saved<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Argmax { input_shape: Vec<usize>, argmax: Vec<usize> },
    Mask(Vec<T>),
    Nothing,
}

impl<T: Real> Layer<T> {
    /// Layer with zero parameters.
    pub fn new(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let (weight, bias) = match spec.param_shapes() {
            Some((w, b)) => (Tensor::zeros(&w), Tensor::zeros(&b)),
            None => (Tensor::zeros(&[0]), Tensor::zeros(&[0])),
        };
        Ok(Self {
            spec,
            weight,
            bias,
            id: NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn has_params(&self) -> bool {
        self.spec.param_shapes().is_some()
    }

    /// Marks parameters as changed; outstanding caches become stale.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn set_params(&mut self, weight: Tensor<T>, bias: Tensor<T>) -> Result<()> {
        let (ws, bs) = self
            .spec
            .param_shapes()
            .ok_or_else(|| Error::Invalid(format!("{} layer has no parameters", self.spec.kind())))?;
        if weight.shape() != ws.as_slice() || bias.shape() != bs.as_slice() {
            return Err(Error::shape(
                self.spec.kind(),
                format!("{ws:?} / {bs:?}"),
                format!("{:?} / {:?}", weight.shape(), bias.shape()),
            ));
        }
        self.weight = weight;
        self.bias = bias;
        self.touch();
        Ok(())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Vec<usize>> {
        if input.shape().len() < 2 {
            return Err(Error::shape(self.spec.kind(), "[N, ...]", format!("{:?}", input.shape())));
        }
        self.spec.output_shape(&input.shape()[1..])
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<(Tensor<T>, Cache<T>)> {
        let item_out = self.check_input(input)?;
        let n = input.batch();
        let mut out_shape = vec![n];
        out_shape.extend(&item_out);
        let (output, saved) = match self.spec {
            LayerSpec::Conv { .. } => (self.conv_forward(input, &out_shape), Saved::Input(input.clone())),
            LayerSpec::MaxPool { kernel, stride, padding } => {
                let (out, argmax) = maxpool_forward(input, &out_shape, kernel, stride, padding);
                (
                    out,
                    Saved::Argmax {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::Relu => {
                let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
                (out.clone(), Saved::Output(out))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Eval || rate == 0.0 {
                    (input.clone(), Saved::Nothing)
                } else {
                    let keep = T::from_f64(1.0 / (1.0 - rate)).unwrap();
                    let mask: Vec<T> = (0..input.len())
                        .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
                        .collect();
                    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
                    (Tensor::from_vec(input.shape(), data)?, Saved::Mask(mask))
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let w = self.weight.data();
                let mut out = Tensor::zeros(&out_shape);
                for b in 0..n {
                    let x = input.item(b);
                    let o = out.item_mut(b);
                    for (j, ov) in o.iter_mut().enumerate() {
                        let row = &w[j * in_features..(j + 1) * in_features];
                        let mut acc = T::zero();
                        for (&wv, &xv) in row.iter().zip(x) {
                            acc += wv * xv;
                        }
                        *ov = acc + self.bias.data()[j];
                    }
                }
                debug_assert_eq!(out.shape()[1], out_features);
                (out, Saved::Input(input.clone()))
            }
            LayerSpec::LogSoftmax => {
                let mut out = input.clone();
                for b in 0..n {
                    log_softmax_in_place(out.item_mut(b));
                }
                (out.clone(), Saved::Output(out))
            }
        };
        Ok((
            output,
            Cache {
                layer_id: self.id,
                version: self.version,
                saved,
            },
        ))
    }

    /// Gradient with respect to the input (when requested) and the parameters.
    pub fn backward(
        &self,
        index: usize,
        cache: &Cache<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Option<ParamGrads<T>>)> {
        if cache.layer_id != self.id {
            return Err(Error::StaleCache {
                layer: index,
                reason: "cache was produced by a different layer".into(),
            });
        }
        if cache.version != self.version {
            return Err(Error::StaleCache {
                layer: index,
                reason: "parameters changed since the forward pass".into(),
            });
        }
        let stale = || Error::StaleCache {
            layer: index,
            reason: "cache contents do not match the layer kind".into(),
        };
        match (&self.spec, &cache.saved) {
            (LayerSpec::Conv { .. }, Saved::Input(x)) => {
                let (gi, pg) = self.conv_backward(x, grad_out, need_input_grad);
                Ok((gi, Some(pg)))
            }
            (LayerSpec::MaxPool { .. }, Saved::Argmax { input_shape, argmax }) => {
                let mut gi = Tensor::zeros(input_shape);
                let per_in = gi.len() / input_shape[0];
                let per_out = grad_out.len() / input_shape[0];
                for b in 0..input_shape[0] {
                    let g = grad_out.item(b);
                    let dst = gi.item_mut(b);
                    for (k, &src) in argmax[b * per_out..(b + 1) * per_out].iter().enumerate() {
                        dst[src] += g[k];
                    }
                }
                debug_assert_eq!(per_in * input_shape[0], gi.len());
                Ok((Some(gi), None))
            }
            (LayerSpec::Relu, Saved::Output(out)) => {
                let data = grad_out
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                    .collect();
                Ok((Some(Tensor::from_vec(out.shape(), data)?), None))
            }
            (LayerSpec::Dropout { .. }, Saved::Mask(mask)) => {
                let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Ok((Some(Tensor::from_vec(grad_out.shape(), data)?), None))
            }
            (LayerSpec::Dropout { .. }, Saved::Nothing) => Ok((Some(grad_out.clone()), None)),
            (
                LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                Saved::Input(x),
            ) => {
                let (f, o, n) = (*in_features, *out_features, x.batch());
                let mut gw = Tensor::zeros(self.weight.shape());
                matmul_tn_acc(grad_out.data(), x.data(), gw.data_mut(), n, o, f);
                let mut gb = Tensor::zeros(&[o]);
                for b in 0..n {
                    for (acc, &g) in gb.data_mut().iter_mut().zip(grad_out.item(b)) {
                        *acc += g;
                    }
                }
                let gi = if need_input_grad {
                    let mut gx = Tensor::zeros(x.shape());
                    matmul_acc(grad_out.data(), self.weight.data(), gx.data_mut(), n, o, f);
                    Some(gx)
                } else {
                    None
                };
                Ok((gi, Some(ParamGrads { weight: gw, bias: gb })))
            }
            (LayerSpec::LogSoftmax, Saved::Output(out)) => {
                let mut gi = grad_out.clone();
                for b in 0..out.batch() {
                    let y = out.item(b);
                    let g = gi.item_mut(b);
                    let total: T = g.iter().copied().sum();
                    for (gv, &yv) in g.iter_mut().zip(y) {
                        *gv -= yv.exp() * total;
                    }
                }
                Ok((Some(gi), None))
            }
            _ => Err(stale()),
        }
    }

    fn conv_dims(&self, input_shape: &[usize]) -> ConvDims {
        let LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec
        else {
            unreachable!("conv_dims on a non-conv layer")
        };
        let (h, w) = (input_shape[2], input_shape[3]);
        ConvDims {
            c: in_channels,
            o: out_channels,
            k: kernel,
            s: stride,
            p: padding,
            h,
            w,
            oh: out_len(h, kernel, stride, padding).unwrap(),
            ow: out_len(w, kernel, stride, padding).unwrap(),
        }
    }

    fn conv_forward(&self, input: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
        let d = self.conv_dims(input.shape());
        let (q, p) = (d.c * d.k * d.k, d.oh * d.ow);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..input.batch() {
            let cols = im2col(input.item(b), &d);
            let o = out.item_mut(b);
            matmul_acc(self.weight.data(), &cols, o, d.o, q, p);
            for (oc, &bias) in self.bias.data().iter().enumerate() {
                for v in &mut o[oc * p..(oc + 1) * p] {
                    *v += bias;
                }
            }
        }
        out
    }

    fn conv_backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>, need_input_grad: bool) -> (Option<Tensor<T>>, ParamGrads<T>) {
        let d = self.conv_dims(input.shape());
        let (q, p) = (d.c * d.k * d.k, d.oh * d.ow);
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        let mut gi = need_input_grad.then(|| Tensor::zeros(input.shape()));
        for b in 0..input.batch() {
            let g = grad_out.item(b);
            let cols_t = transpose(&im2col(input.item(b), &d), q, p);
            matmul_acc(g, &cols_t, gw.data_mut(), d.o, p, q);
            for (oc, acc) in gb.data_mut().iter_mut().enumerate() {
                *acc += g[oc * p..(oc + 1) * p].iter().copied().sum::<T>();
            }
            if let Some(gi) = gi.as_mut() {
                let mut gcols = vec![T::zero(); q * p];
                matmul_tn_acc(self.weight.data(), g, &mut gcols, d.o, q, p);
                col2im_acc(&gcols, gi.item_mut(b), &d);
            }
        }
        (gi, ParamGrads { weight: gw, bias: gb })
    }
}

/// Convolution geometry for one item.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub o: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfolds `(C, H, W)` into a `(C*k*k, OH*OW)` matrix; padding reads as zero.
pub(crate) fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let p = d.oh * d.ow;
    let mut cols = vec![T::zero(); d.c * d.k * d.k * p];
    for c in 0..d.c {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * d.s + ky) as isize - d.p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &x[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.s + kx) as isize - d.p as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[oy * d.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`, accumulating into `x`.
pub(crate) fn col2im_acc<T: Real>(cols: &[T], x: &mut [T], d: &ConvDims) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * d.s + ky) as isize - d.p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.s + kx) as isize - d.p as isize;
                        if ix >= 0 && ix < d.w as isize {
                            x[base + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Direct cross-correlation of one item, used to validate the im2col path.
pub fn conv_naive<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    (c, h, w): (usize, usize, usize),
    (o, k, s, p): (usize, usize, usize, usize),
) -> Vec<T> {
    let oh = out_len(h, k, s, p).expect("valid geometry");
    let ow = out_len(w, k, s, p).expect("valid geometry");
    let mut out = vec![T::zero(); o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                x[(ic * h + iy as usize) * w + ix as usize]
                            } else {
                                T::zero()
                            };
                            acc += weight[((oc * c + ic) * k + ky) * k + kx] * v;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc + bias[oc];
            }
        }
    }
    out
}

fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Vec<usize>) {
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out.len());
    for b in 0..input.batch() {
        let x = input.item(b);
        let o = out.item_mut(b);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    o[(ch * oh + oy) * ow + ox] = best;
                    argmax.push(best_idx);
                }
            }
        }
    }
    (out, argmax)
}

pub fn log_softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}
