//! Attribution maps for one stream: deep Taylor decomposition (z+ rule in
//! hidden layers, z^B box rule at the input), gradient saliency and guided
//! backpropagation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::gemm::{matmul_acc, matmul_tn_acc};
use crate::nncore::layers::{col2im_acc, im2col, ConvDims};
use crate::nncore::{Cache, LayerSpec, Mode, Network, Real, Tensor};
use crate::augment::{AugmentConfig, AugmentedSample};
use crate::twostream::{argmax, input_bounds, stream_input, Stream, TwoStreamModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dtd,
    Saliency,
    Guided,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dtd => "dtd",
            Method::Saliency => "saliency",
            Method::Guided => "guided",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtd" => Ok(Method::Dtd),
            "saliency" => Ok(Method::Saliency),
            "guided" => Ok(Method::Guided),
            _ => Err(Error::Config(format!("unknown method {s:?} (dtd, saliency, guided)"))),
        }
    }
}

/// Attribution over one stream input, shaped `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap<T> {
    pub values: Tensor<T>,
    /// The score whose relevance was distributed.
    pub decomposed_output: f64,
    pub method: Method,
}

/// Index of the layer producing the class scores (the last layer before a
/// trailing log-softmax).
fn score_layer<T: Real>(net: &Network<T>) -> usize {
    let n = net.layers().len();
    match net.layers().last().map(|l| &l.spec) {
        Some(LayerSpec::LogSoftmax) if n > 1 => n - 2,
        _ => n - 1,
    }
}

fn check_input<T: Real>(net: &Network<T>, input: &Tensor<T>) -> Result<()> {
    if input.shape() != net.input_shape() {
        return Err(Error::shape(
            "relevance input",
            format!("{:?}", net.input_shape()),
            format!("{:?}", input.shape()),
        ));
    }
    Ok(())
}

fn batched<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend(input.shape());
    input.clone().reshape(&shape)
}

/// Eval-mode forward pass up to the score layer, keeping caches.
fn forward_cached<T: Real>(net: &Network<T>, input: &Tensor<T>, top: usize) -> Result<(Vec<Tensor<T>>, Vec<Cache<T>>)> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut acts = vec![batched(input)?];
    let mut caches = Vec::with_capacity(top + 1);
    for layer in &net.layers()[..=top] {
        let (y, c) = layer.forward(acts.last().unwrap(), Mode::Eval, &mut rng)?;
        acts.push(y);
        caches.push(c);
    }
    Ok((acts, caches))
}

fn target_score<T: Real>(scores: &Tensor<T>, target: usize) -> Result<T> {
    scores.data().get(target).copied().ok_or(Error::LabelOutOfRange {
        label: target,
        classes: scores.len(),
    })
}

/// Deep Taylor decomposition of the target class score.
///
/// `bounds` gives the `(low, high)` value range of each input channel. The
/// score is clamped at zero before propagation since the rules only
/// distribute non-negative relevance.
pub fn dtd_relevance<T: Real>(
    net: &Network<T>,
    input: &Tensor<T>,
    target: usize,
    bounds: &[(T, T)],
) -> Result<RelevanceMap<T>> {
    let trace = dtd_trace(net, input, target, bounds)?;
    Ok(trace.map)
}

/// Relevance map plus the total relevance entering each layer from above,
/// from the score layer down to the input.
pub struct DtdTrace<T> {
    pub map: RelevanceMap<T>,
    pub layer_totals: Vec<f64>,
}

pub fn dtd_trace<T: Real>(net: &Network<T>, input: &Tensor<T>, target: usize, bounds: &[(T, T)]) -> Result<DtdTrace<T>> {
    check_input(net, input)?;
    if bounds.len() != input.shape()[0] {
        return Err(Error::shape("relevance bounds", input.shape()[0], bounds.len()));
    }
    let top = score_layer(net);
    let (acts, _) = forward_cached(net, input, top)?;
    let score = target_score(&acts[top + 1], target)?;
    let seed = score.max(T::zero());
    let mut relevance = Tensor::zeros(acts[top + 1].shape());
    relevance.data_mut()[target] = seed;
    let mut totals = vec![seed.to_f64().unwrap()];

    for i in (0..=top).rev() {
        let layer = &net.layers()[i];
        let x = &acts[i];
        relevance = match &layer.spec {
            LayerSpec::Linear { in_features, .. } => {
                let w_plus: Vec<T> = layer.weight.data().iter().map(|&w| w.max(T::zero())).collect();
                let out = relevance.len();
                let xs = x.data();
                let mut s = vec![T::zero(); out];
                for j in 0..out {
                    let row = &w_plus[j * in_features..(j + 1) * in_features];
                    let z: T = row.iter().zip(xs).map(|(&w, &v)| w * v).sum();
                    s[j] = if z == T::zero() { T::zero() } else { relevance.data()[j] / z };
                }
                let mut c = vec![T::zero(); *in_features];
                matmul_acc(&s, &w_plus, &mut c, 1, out, *in_features);
                let r: Vec<T> = xs.iter().zip(&c).map(|(&v, &cv)| v * cv).collect();
                Tensor::from_vec(x.shape(), r)?
            }
            LayerSpec::Conv { .. } if i == 0 => conv_box_rule(layer, x, &relevance, bounds)?,
            LayerSpec::Conv { .. } => conv_zplus(layer, x, &relevance)?,
            LayerSpec::MaxPool { kernel, stride, padding } => {
                maxpool_winner(x, &relevance, *kernel, *stride, *padding)?
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => relevance,
            LayerSpec::LogSoftmax => {
                return Err(Error::Invalid("log-softmax below the score layer".into()));
            }
        };
        totals.push(relevance.sum().to_f64().unwrap());
    }
    let values = relevance.reshape(input.shape())?;
    Ok(DtdTrace {
        map: RelevanceMap {
            values,
            decomposed_output: seed.to_f64().unwrap(),
            method: Method::Dtd,
        },
        layer_totals: totals,
    })
}

fn conv_dims<T: Real>(spec: &LayerSpec, x: &Tensor<T>) -> ConvDims {
    let LayerSpec::Conv {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    } = *spec
    else {
        unreachable!()
    };
    let (h, w) = (x.shape()[2], x.shape()[3]);
    ConvDims {
        c: in_channels,
        o: out_channels,
        k: kernel,
        s: stride,
        p: padding,
        h,
        w,
        oh: (h + 2 * padding - kernel) / stride + 1,
        ow: (w + 2 * padding - kernel) / stride + 1,
    }
}

/// `s = R / z` with zero denominators contributing nothing.
fn ratio<T: Real>(r: &[T], z: &[T]) -> Vec<T> {
    r.iter()
        .zip(z)
        .map(|(&r, &z)| if z == T::zero() { T::zero() } else { r / z })
        .collect()
}

fn conv_zplus<T: Real>(layer: &crate::nncore::Layer<T>, x: &Tensor<T>, relevance: &Tensor<T>) -> Result<Tensor<T>> {
    let d = conv_dims(&layer.spec, x);
    let (q, p) = (d.c * d.k * d.k, d.oh * d.ow);
    let w_plus: Vec<T> = layer.weight.data().iter().map(|&w| w.max(T::zero())).collect();
    let cols = im2col(x.item(0), &d);
    let mut z = vec![T::zero(); d.o * p];
    matmul_acc(&w_plus, &cols, &mut z, d.o, q, p);
    let s = ratio(relevance.data(), &z);
    let mut c_cols = vec![T::zero(); q * p];
    matmul_tn_acc(&w_plus, &s, &mut c_cols, d.o, q, p);
    let mut c = vec![T::zero(); x.len()];
    col2im_acc(&c_cols, &mut c, &d);
    let r = x.data().iter().zip(&c).map(|(&v, &cv)| v * cv).collect();
    Tensor::from_vec(x.shape(), r)
}

/// z^B rule: `R_i = sum_j (x_i w_ij - l_i w+_ij - h_i w-_ij) / z_j * R_j`.
fn conv_box_rule<T: Real>(
    layer: &crate::nncore::Layer<T>,
    x: &Tensor<T>,
    relevance: &Tensor<T>,
    bounds: &[(T, T)],
) -> Result<Tensor<T>> {
    let d = conv_dims(&layer.spec, x);
    let (q, p, plane) = (d.c * d.k * d.k, d.oh * d.ow, d.h * d.w);
    let w = layer.weight.data();
    let w_plus: Vec<T> = w.iter().map(|&v| v.max(T::zero())).collect();
    let w_minus: Vec<T> = w.iter().map(|&v| v.min(T::zero())).collect();
    let low: Vec<T> = bounds.iter().flat_map(|&(l, _)| std::iter::repeat(l).take(plane)).collect();
    let high: Vec<T> = bounds.iter().flat_map(|&(_, h)| std::iter::repeat(h).take(plane)).collect();
    // padded taps read 0 for x, l and h alike, so they carry no relevance
    let (cx, cl, ch) = (im2col(x.item(0), &d), im2col(&low, &d), im2col(&high, &d));

    let mut z = vec![T::zero(); d.o * p];
    matmul_acc(w, &cx, &mut z, d.o, q, p);
    let mut zl = vec![T::zero(); d.o * p];
    matmul_acc(&w_plus, &cl, &mut zl, d.o, q, p);
    let mut zh = vec![T::zero(); d.o * p];
    matmul_acc(&w_minus, &ch, &mut zh, d.o, q, p);
    for ((zv, &l), &h) in z.iter_mut().zip(&zl).zip(&zh) {
        *zv = *zv - l - h;
    }
    let s = ratio(relevance.data(), &z);

    let back = |weights: &[T]| {
        let mut cols = vec![T::zero(); q * p];
        matmul_tn_acc(weights, &s, &mut cols, d.o, q, p);
        let mut img = vec![T::zero(); x.len()];
        col2im_acc(&cols, &mut img, &d);
        img
    };
    let (cw, cp, cm) = (back(w), back(&w_plus), back(&w_minus));
    let r = (0..x.len())
        .map(|i| x.data()[i] * cw[i] - low[i] * cp[i] - high[i] * cm[i])
        .collect();
    Tensor::from_vec(x.shape(), r)
}

/// Routes each pooled value's relevance to the first maximal input of its
/// window.
fn maxpool_winner<T: Real>(
    x: &Tensor<T>,
    relevance: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (relevance.shape()[2], relevance.shape()[3]);
    let xs = x.data();
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(usize, T)> = None;
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
                        if best.map_or(true, |(_, v)| xs[idx] > v) {
                            best = Some((idx, xs[idx]));
                        }
                    }
                }
                if let Some((idx, _)) = best {
                    out.data_mut()[idx] += relevance.data()[(ch * oh + oy) * ow + ox];
                }
            }
        }
    }
    Ok(out)
}

/// Absolute gradient of the target class score with respect to the input.
pub fn saliency<T: Real>(net: &Network<T>, input: &Tensor<T>, target: usize) -> Result<RelevanceMap<T>> {
    let (grad, score) = score_gradient(net, input, target, false)?;
    Ok(RelevanceMap {
        values: grad.map(|v| v.abs()),
        decomposed_output: score,
        method: Method::Saliency,
    })
}

/// Backward pass in which ReLUs pass only positive gradients at positive
/// forward inputs.
pub fn guided_backprop<T: Real>(net: &Network<T>, input: &Tensor<T>, target: usize) -> Result<RelevanceMap<T>> {
    let (grad, score) = score_gradient(net, input, target, true)?;
    Ok(RelevanceMap {
        values: grad,
        decomposed_output: score,
        method: Method::Guided,
    })
}

/// Signed gradient of the target score with respect to the input.
pub fn score_gradient<T: Real>(net: &Network<T>, input: &Tensor<T>, target: usize, guided: bool) -> Result<(Tensor<T>, f64)> {
    check_input(net, input)?;
    let top = score_layer(net);
    let (acts, caches) = forward_cached(net, input, top)?;
    let score = target_score(&acts[top + 1], target)?;
    let mut grad = Tensor::zeros(acts[top + 1].shape());
    grad.data_mut()[target] = T::one();
    for i in (0..=top).rev() {
        let layer = &net.layers()[i];
        grad = match (&layer.spec, guided) {
            (LayerSpec::Relu, true) => {
                let data = grad
                    .data()
                    .iter()
                    .zip(acts[i].data())
                    .map(|(&g, &x)| if x > T::zero() && g > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(acts[i].shape(), data)?
            }
            _ => layer
                .backward(i, &caches[i], &grad, true)?
                .0
                .expect("input gradient requested"),
        };
    }
    Ok((grad.reshape(input.shape())?, score.to_f64().unwrap()))
}

pub fn explain<T: Real>(
    method: Method,
    net: &Network<T>,
    input: &Tensor<T>,
    target: usize,
    bounds: &[(T, T)],
) -> Result<RelevanceMap<T>> {
    match method {
        Method::Dtd => dtd_relevance(net, input, target, bounds),
        Method::Saliency => saliency(net, input, target),
        Method::Guided => guided_backprop(net, input, target),
    }
}

/// Attribution of one augmented sample for one stream. The target defaults
/// to the fused prediction; probabilities are the softmax of the fused
/// log-probabilities.
pub fn explain_sample(
    model: &TwoStreamModel,
    sample: &AugmentedSample,
    method: Method,
    stream: Stream,
    target: Option<usize>,
    augment: &AugmentConfig,
) -> Result<RelevanceRecord> {
    let prediction = model.predict(&[sample])?[0];
    let probabilities = softmax2(prediction.fused);
    let target = target.unwrap_or_else(|| argmax(&prediction.fused));
    let cfg = model.stream_config(stream);
    let input = Tensor::from_vec(&cfg.input_shape(), stream_input(stream, sample, cfg)?)?;
    let map = explain(method, model.stream(stream), &input, target, &input_bounds(stream, sample))?;
    let crop = sample.provenance.crop as usize;
    let crop_offset = *augment.crop_offsets.get(crop).ok_or_else(|| {
        Error::Config(format!(
            "sample crop index {crop} not in the {} configured crop offsets",
            augment.crop_offsets.len()
        ))
    })?;
    Ok(RelevanceRecord {
        event_id: sample.provenance.event_id.clone(),
        label: sample.label,
        target_class: target,
        method,
        stream,
        decomposed_output: map.decomposed_output,
        probabilities,
        flip: sample.provenance.flip,
        crop_offset,
        frame_size: augment.frame_size,
        frame_indices: sample.provenance.frame_indices.clone(),
        shape: map.values.shape().to_vec(),
        values: map.values.into_data(),
    })
}

fn softmax2(logp: [f32; 2]) -> [f64; 2] {
    let m = logp[0].max(logp[1]) as f64;
    let e0 = (logp[0] as f64 - m).exp();
    let e1 = (logp[1] as f64 - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// One stored attribution map with the sample context needed for analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub event_id: String,
    pub label: u8,
    pub target_class: usize,
    pub method: Method,
    pub stream: Stream,
    pub decomposed_output: f64,
    /// Fused class probabilities.
    pub probabilities: [f64; 2],
    pub flip: bool,
    pub crop_offset: (usize, usize),
    pub frame_size: usize,
    pub frame_indices: Vec<u16>,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub values: Vec<f32>,
}

impl RelevanceRecord {
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.values[c * n..(c + 1) * n]
    }

    /// Channel-summed 2-D map.
    pub fn channel_sum(&self) -> Vec<f64> {
        let n = self.height() * self.width();
        let mut out = vec![0.0; n];
        for c in 0..self.channels() {
            for (o, &v) in out.iter_mut().zip(self.plane(c)) {
                *o += v as f64;
            }
        }
        out
    }
}

const REL_MAGIC: &[u8; 5] = b"BREL1";
const REL_VERSION: u16 = 1;
const REL_HEADER_LEN: u64 = 5 + 2 + 8;

/// Sequential writer of relevance records.
/// Layout: `"BREL1" | version u16 | count u64`, then per record
/// `len u32 | crc32 u32 | deflate(json_len u32 | json | f32 values)`.
pub struct RelevanceWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: u64,
}

impl RelevanceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(REL_MAGIC).map_err(io)?;
        out.write_u16::<LittleEndian>(REL_VERSION).map_err(io)?;
        out.write_u64::<LittleEndian>(0).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            count: 0,
        })
    }

    pub fn push(&mut self, record: &RelevanceRecord) -> Result<()> {
        let expected: usize = record.shape.iter().product();
        if expected != record.values.len() {
            return Err(Error::shape("relevance record", expected, record.values.len()));
        }
        let json = serde_json::to_vec(record).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut raw = Vec::with_capacity(4 + json.len() + record.values.len() * 4);
        raw.write_u32::<LittleEndian>(json.len() as u32).unwrap();
        raw.extend_from_slice(&json);
        for &v in &record.values {
            raw.write_f32::<LittleEndian>(v).unwrap();
        }
        let io = |e| Error::io(&self.path, e);
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).map_err(io)?;
        let payload = enc.finish().map_err(io)?;
        self.out.write_u32::<LittleEndian>(payload.len() as u32).map_err(io)?;
        self.out.write_u32::<LittleEndian>(crc32fast::hash(&payload)).map_err(io)?;
        self.out.write_all(&payload).map_err(io)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<u64> {
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        let mut file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(REL_HEADER_LEN - 8)).map_err(io)?;
        file.write_u64::<LittleEndian>(self.count).map_err(io)?;
        file.sync_all().map_err(io)?;
        Ok(self.count)
    }
}

pub fn read_relevance(path: &Path) -> Result<Vec<RelevanceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != REL_MAGIC {
        return Err(Error::Corrupt(format!("{}: not a relevance file", path.display())));
    }
    let bad = |chunk: u64| move |e: std::io::Error| Error::Corrupt(format!("relevance record {chunk}: {e}"));
    let version = r.read_u16::<LittleEndian>().map_err(bad(0))?;
    if version != REL_VERSION {
        return Err(Error::Corrupt(format!("unsupported relevance version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(bad(0))?;
    let mut out = Vec::with_capacity(count as usize);
    for chunk in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(bad(chunk))? as usize;
        let crc = r.read_u32::<LittleEndian>().map_err(bad(chunk))?;
        let mut payload = vec![0; len];
        r.read_exact(&mut payload).map_err(bad(chunk))?;
        if crc32fast::hash(&payload) != crc {
            return Err(Error::Checksum { chunk });
        }
        let mut raw = Vec::new();
        DeflateDecoder::new(&payload[..]).read_to_end(&mut raw).map_err(bad(chunk))?;
        let mut cur = &raw[..];
        let json_len = cur.read_u32::<LittleEndian>().map_err(bad(chunk))? as usize;
        if json_len > cur.len() {
            return Err(Error::Corrupt(format!("relevance record {chunk}: header overruns payload")));
        }
        let mut rec: RelevanceRecord = serde_json::from_slice(&cur[..json_len])
            .map_err(|e| Error::Corrupt(format!("relevance record {chunk}: {e}")))?;
        cur = &cur[json_len..];
        let n: usize = rec.shape.iter().product();
        if cur.len() != n * 4 {
            return Err(Error::Corrupt(format!("relevance record {chunk}: value count mismatch")));
        }
        let mut values = vec![0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut values).map_err(bad(chunk))?;
        rec.values = values;
        out.push(rec);
    }
    Ok(out)
}
