//! Two-stream bout classifier: a spatial stream on one grayscale frame and a
//! temporal stream on a stack of flow planes, fused by averaging their
//! log-probabilities.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{distinct_source_batches, AugmentConfig, AugmentedSample, ContainerReader, Provenance};
use crate::error::{Error, Result};
use crate::nncore::{nll_loss, Adam, AdamState, Checkpoint, Gradients, LayerSpec, Mode, Network, Real, Tensor};

pub const DEFAULT_SEED: u64 = 462_019;
pub const CLASSES: usize = 2;

/// Samples pushed through the network together. Gradients are summed per
/// group and then across groups in index order, so results do not depend on
/// the thread count.
const GROUP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (full, desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Spatial,
    Temporal,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Spatial => "spatial",
            Stream::Temporal => "temporal",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Stream::Spatial),
            "temporal" => Ok(Stream::Temporal),
            _ => Err(Error::Config(format!("unknown stream {s:?} (spatial, temporal)"))),
        }
    }
}

/// Layer widths and input geometry of one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub stream: Stream,
    pub in_channels: usize,
    pub input_size: usize,
    pub conv_widths: [usize; 5],
    pub fc_widths: [usize; 2],
    pub dropout: f64,
}

impl StreamConfig {
    /// Full-size layout: 224 px input, 1 or 170 input channels.
    pub fn full(stream: Stream) -> Self {
        Self {
            stream,
            in_channels: match stream {
                Stream::Spatial => 1,
                Stream::Temporal => 170,
            },
            input_size: 224,
            conv_widths: [96, 256, 512, 512, 512],
            fc_widths: [4096, 2048],
            dropout: 0.5,
        }
    }

    /// Quarter-width layout on 64 px inputs with a 16-frame flow stack.
    pub fn desk(stream: Stream) -> Self {
        Self {
            in_channels: match stream {
                Stream::Spatial => 1,
                Stream::Temporal => 32,
            },
            input_size: 64,
            conv_widths: [24, 64, 128, 128, 128],
            fc_widths: [1024, 512],
            ..Self::full(stream)
        }
    }

    pub fn preset(preset: Preset, stream: Stream) -> Self {
        match preset {
            Preset::Full => Self::full(stream),
            Preset::Desk => Self::desk(stream),
        }
    }

    /// Preset widths with input geometry taken from an augmentation config.
    pub fn for_augment(preset: Preset, stream: Stream, augment: &AugmentConfig) -> Self {
        let mut cfg = Self::preset(preset, stream);
        cfg.input_size = augment.crop_size;
        if stream == Stream::Temporal {
            cfg.in_channels = augment.flow_channels();
        }
        cfg
    }

    pub fn layer_specs(&self) -> Vec<(&'static str, LayerSpec)> {
        let [c1, c2, c3, c4, c5] = self.conv_widths;
        let [f6, f7] = self.fc_widths;
        let conv = |in_channels, out_channels, kernel, stride, padding| LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        let pool = LayerSpec::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let spatial_out = {
            // conv1 /2, pool1 /2, conv2 /2, pool2 /2, pool5 /2
            let mut s = self.input_size;
            for _ in 0..5 {
                s = (s + 1) / 2;
            }
            s
        };
        let dropout = LayerSpec::Dropout { rate: self.dropout };
        vec![
            ("conv1", conv(self.in_channels, c1, 7, 2, 3)),
            ("relu1", LayerSpec::Relu),
            ("pool1", pool.clone()),
            ("conv2", conv(c1, c2, 5, 2, 2)),
            ("relu2", LayerSpec::Relu),
            ("pool2", pool.clone()),
            ("conv3", conv(c2, c3, 3, 1, 1)),
            ("relu3", LayerSpec::Relu),
            ("conv4", conv(c3, c4, 3, 1, 1)),
            ("relu4", LayerSpec::Relu),
            ("conv5", conv(c4, c5, 3, 1, 1)),
            ("relu5", LayerSpec::Relu),
            ("pool5", pool),
            (
                "fc6",
                LayerSpec::Linear {
                    in_features: c5 * spatial_out * spatial_out,
                    out_features: f6,
                },
            ),
            ("relu6", LayerSpec::Relu),
            ("drop6", dropout.clone()),
            (
                "fc7",
                LayerSpec::Linear {
                    in_features: f6,
                    out_features: f7,
                },
            ),
            ("relu7", LayerSpec::Relu),
            ("drop7", dropout),
            (
                "fc8",
                LayerSpec::Linear {
                    in_features: f7,
                    out_features: CLASSES,
                },
            ),
            ("logsoftmax", LayerSpec::LogSoftmax),
        ]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_size, self.input_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_size < 32 {
            return Err(Error::Config(format!(
                "{} stream needs >= 1 channel and >= 32 px input, got {} x {}",
                self.stream, self.in_channels, self.input_size
            )));
        }
        if self.conv_widths.contains(&0) || self.fc_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.stream == Stream::Spatial && self.in_channels != 1 {
            return Err(Error::Config("the spatial stream takes one grayscale channel".into()));
        }
        Ok(())
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Network<f32>> {
        self.validate()?;
        Network::new(&self.input_shape(), &self.layer_specs(), rng)
    }
}

/// Per-stream and fused log-probabilities for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub spatial: [f32; CLASSES],
    pub temporal: [f32; CLASSES],
    pub fused: [f32; CLASSES],
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Elementwise mean of the two log-probability vectors.
pub fn fuse_predictions<T: Real>(spatial: &[T], temporal: &[T]) -> Vec<T> {
    let two = T::one() + T::one();
    spatial.iter().zip(temporal).map(|(&s, &t)| (s + t) / two).collect()
}

/// Negative log-likelihood of `label` under the fused prediction.
pub fn fused_nll<T: Real>(spatial: &[T], temporal: &[T], label: usize) -> Result<T> {
    if spatial.len() != temporal.len() {
        return Err(Error::shape("fused_nll", spatial.len(), temporal.len()));
    }
    nll_loss(&fuse_predictions(spatial, temporal), label)
}

#[derive(Clone, Debug)]
pub struct TwoStreamModel {
    pub spatial_config: StreamConfig,
    pub temporal_config: StreamConfig,
    pub spatial: Network<f32>,
    pub temporal: Network<f32>,
}

impl TwoStreamModel {
    pub fn new<R: Rng + ?Sized>(spatial: StreamConfig, temporal: StreamConfig, rng: &mut R) -> Result<Self> {
        if spatial.stream != Stream::Spatial || temporal.stream != Stream::Temporal {
            return Err(Error::Config("stream configs passed in the wrong order".into()));
        }
        if spatial.input_size != temporal.input_size {
            return Err(Error::Config(format!(
                "stream input sizes differ: {} vs {}",
                spatial.input_size, temporal.input_size
            )));
        }
        let s = spatial.build(rng)?;
        let t = temporal.build(rng)?;
        Ok(Self {
            spatial_config: spatial,
            temporal_config: temporal,
            spatial: s,
            temporal: t,
        })
    }

    pub fn stream(&self, stream: Stream) -> &Network<f32> {
        match stream {
            Stream::Spatial => &self.spatial,
            Stream::Temporal => &self.temporal,
        }
    }

    pub fn stream_config(&self, stream: Stream) -> &StreamConfig {
        match stream {
            Stream::Spatial => &self.spatial_config,
            Stream::Temporal => &self.temporal_config,
        }
    }

    /// Stacks samples into the input tensor of one stream.
    pub fn input(&self, stream: Stream, samples: &[&AugmentedSample]) -> Result<Tensor<f32>> {
        let cfg = self.stream_config(stream);
        let mut data = Vec::with_capacity(samples.len() * cfg.in_channels * cfg.input_size * cfg.input_size);
        for s in samples {
            data.extend(stream_input(stream, s, cfg)?);
        }
        let mut shape = vec![samples.len()];
        shape.extend(cfg.input_shape());
        Tensor::from_vec(&shape, data)
    }

    pub fn predict(&self, samples: &[&AugmentedSample]) -> Result<Vec<Prediction>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = self.spatial.forward(&self.input(Stream::Spatial, samples)?, Mode::Eval, &mut rng)?;
        let t = self.temporal.forward(&self.input(Stream::Temporal, samples)?, Mode::Eval, &mut rng)?;
        Ok((0..samples.len())
            .map(|i| {
                let (sp, tp) = (s.item(i), t.item(i));
                let fused = fuse_predictions(sp, tp);
                Prediction {
                    spatial: [sp[0], sp[1]],
                    temporal: [tp[0], tp[1]],
                    fused: [fused[0], fused[1]],
                }
            })
            .collect())
    }

    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Checkpoint {
        let mut tensors = Vec::new();
        for (prefix, net) in [("spatial", &self.spatial), ("temporal", &self.temporal)] {
            for (name, t) in net.named_params() {
                tensors.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("spatial".into(), serde_json::to_value(&self.spatial_config).unwrap());
            map.insert("temporal".into(), serde_json::to_value(&self.temporal_config).unwrap());
        }
        Checkpoint { tensors, meta }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = |key: &str| -> Result<StreamConfig> {
            serde_json::from_value(ckpt.meta.get(key).cloned().unwrap_or_default())
                .map_err(|e| Error::Corrupt(format!("checkpoint {key} config: {e}")))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(cfg("spatial")?, cfg("temporal")?, &mut rng)?;
        for (prefix, net) in [("spatial.", &mut model.spatial), ("temporal.", &mut model.temporal)] {
            let own: Vec<(String, Tensor<f32>)> = ckpt
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect();
            net.load_params(&own)?;
        }
        Ok(model)
    }
}

/// Input values of one sample for one stream: grayscale scaled to [0, 1],
/// or dequantized flow in pixels.
pub fn stream_input(stream: Stream, sample: &AugmentedSample, cfg: &StreamConfig) -> Result<Vec<f32>> {
    let (h, w) = (sample.spatial.height(), sample.spatial.width());
    if h != cfg.input_size || w != cfg.input_size {
        return Err(Error::shape(
            format!("{stream} input"),
            format!("{0}x{0}", cfg.input_size),
            format!("{h}x{w}"),
        ));
    }
    match stream {
        Stream::Spatial => Ok(sample.spatial.pixels().iter().map(|&v| v as f32 / 255.0).collect()),
        Stream::Temporal => {
            if sample.channels != cfg.in_channels {
                return Err(Error::shape("temporal input", format!("{} channels", cfg.in_channels), sample.channels));
            }
            Ok((0..sample.channels).flat_map(|c| sample.flow_channel(c)).collect())
        }
    }
}

/// Per-channel value bounds of a stream input, used as the input-layer
/// domain for relevance propagation.
pub fn input_bounds(stream: Stream, sample: &AugmentedSample) -> Vec<(f32, f32)> {
    match stream {
        Stream::Spatial => vec![(0.0, 1.0)],
        Stream::Temporal => sample.scale_meta.iter().map(|s| (s.min, s.max)).collect(),
    }
}

/// Tiles or averages a first-layer kernel `[out, 3, k, k]` to `target`
/// input channels. Tiled copies get uniform noise of amplitude
/// `noise_scale * std(pretrained)`.
pub fn adapt_input_weights<R: Rng + ?Sized>(
    pretrained: &Tensor<f32>,
    target_channels: usize,
    rng: &mut R,
    noise_scale: f64,
) -> Result<Tensor<f32>> {
    let shape = pretrained.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("adapt_input_weights", "[out, 3, k, k]", format!("{shape:?}")));
    }
    let (out, taps) = (shape[0], shape[2] * shape[3]);
    let src = pretrained.data();
    let at = |o: usize, c: usize, t: usize| src[(o * 3 + c) * taps + t];
    match target_channels {
        1 => {
            let mut data = Vec::with_capacity(out * taps);
            for o in 0..out {
                for t in 0..taps {
                    data.push(((at(o, 0, t) as f64 + at(o, 1, t) as f64 + at(o, 2, t) as f64) / 3.0) as f32);
                }
            }
            Tensor::from_vec(&[out, 1, shape[2], shape[3]], data)
        }
        n if n >= 3 => {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / src.len() as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / src.len() as f64;
            let amplitude = noise_scale * var.sqrt();
            let mut data = Vec::with_capacity(out * n * taps);
            for o in 0..out {
                for c in 0..n {
                    for t in 0..taps {
                        let noise = if amplitude > 0.0 {
                            rng.gen_range(-amplitude..=amplitude)
                        } else {
                            0.0
                        };
                        data.push((at(o, c % 3, t) as f64 + noise) as f32);
                    }
                }
            }
            Tensor::from_vec(&[out, n, shape[2], shape[3]], data)
        }
        n => Err(Error::Config(format!("cannot adapt 3 input channels to {n}"))),
    }
}

/// Averages contiguous blocks of output units: class `c` gets the mean of
/// units `[c*b, (c+1)*b)` with `b = units / n_classes`. Works on weight
/// `[units, features]` and bias `[units]` tensors.
pub fn adapt_output_weights(pretrained: &Tensor<f32>, n_classes: usize) -> Result<Tensor<f32>> {
    let units = pretrained.shape().first().copied().unwrap_or(0);
    if n_classes == 0 || units == 0 || units % n_classes != 0 {
        return Err(Error::Config(format!("{units} output units do not split into {n_classes} classes")));
    }
    let block = units / n_classes;
    let row = pretrained.len() / units;
    let mut data = vec![0f64; n_classes * row];
    for u in 0..units {
        let dst = &mut data[(u / block) * row..(u / block + 1) * row];
        for (d, &v) in dst.iter_mut().zip(&pretrained.data()[u * row..(u + 1) * row]) {
            *d += v as f64;
        }
    }
    let mut shape = pretrained.shape().to_vec();
    shape[0] = n_classes;
    Tensor::from_vec(&shape, data.into_iter().map(|v| (v / block as f64) as f32).collect())
}

/// Replaces a stream's first and last layers with weights adapted from an
/// RGB, 1000-class network. `pretrained` uses the stream's layer names.
pub fn apply_pretrained<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    pretrained: &[(String, Tensor<f32>)],
    rng: &mut R,
    noise_scale: f64,
) -> Result<()> {
    let find = |name: &str| {
        pretrained
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("pretrained weights lack {name}")))
    };
    let first = net.layer_index("conv1").ok_or_else(|| Error::Config("network has no conv1".into()))?;
    let last = net.layer_index("fc8").ok_or_else(|| Error::Config("network has no fc8".into()))?;
    let in_channels = net.layers()[first].weight.shape()[1];
    let w1 = adapt_input_weights(find("conv1.weight")?, in_channels, rng, noise_scale)?;
    net.layers_mut()[first].set_params(w1, find("conv1.bias")?.clone())?;
    let w8 = adapt_output_weights(find("fc8.weight")?, CLASSES)?;
    let b8 = adapt_output_weights(find("fc8.bias")?, CLASSES)?;
    net.layers_mut()[last].set_params(w8, b8)?;
    for (i, name) in net.names().to_vec().iter().enumerate() {
        if i == first || i == last || !net.layers()[i].has_params() {
            continue;
        }
        if let (Ok(w), Ok(b)) = (find(&format!("{name}.weight")), find(&format!("{name}.bias"))) {
            net.layers_mut()[i].set_params(w.clone(), b.clone())?;
        }
    }
    Ok(())
}

/// Random access to labelled samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn fetch(&mut self, index: usize) -> Result<AugmentedSample>;
    fn headers(&mut self) -> Result<Vec<(u8, Provenance)>>;
}

impl SampleSource for ContainerReader {
    fn len(&self) -> usize {
        ContainerReader::len(self)
    }
    fn fetch(&mut self, index: usize) -> Result<AugmentedSample> {
        self.get(index)
    }
    fn headers(&mut self) -> Result<Vec<(u8, Provenance)>> {
        ContainerReader::headers(self)
    }
}

impl SampleSource for Vec<AugmentedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn fetch(&mut self, index: usize) -> Result<AugmentedSample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("sample index {index} out of range ({})", self.as_slice().len())))
    }
    fn headers(&mut self) -> Result<Vec<(u8, Provenance)>> {
        Ok(self.iter().map(|s| (s.label, s.provenance.clone())).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            epochs: 5,
            batch_size: 32,
            seed: DEFAULT_SEED,
            adam: Adam::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub full: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: TwoStreamModel,
}

/// Fused negative log-likelihood of one labelled batch and its gradients.
fn batch_step(
    model: &TwoStreamModel,
    samples: &[&AugmentedSample],
    rng_seed: u64,
    rng_stream: u64,
) -> Result<(f64, Gradients<f32>, Gradients<f32>, Option<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(rng_stream);
    let n = samples.len();
    let (s_out, s_caches, s_bad) = model.spatial.forward_train(&model.input(Stream::Spatial, samples)?, &mut rng)?;
    let (t_out, t_caches, t_bad) = model.temporal.forward_train(&model.input(Stream::Temporal, samples)?, &mut rng)?;
    let mut loss = 0.0;
    let mut s_grad = Tensor::zeros(s_out.shape());
    let mut t_grad = Tensor::zeros(t_out.shape());
    for (i, s) in samples.iter().enumerate() {
        let label = s.label as usize;
        if label >= CLASSES {
            return Err(Error::LabelOutOfRange { label, classes: CLASSES });
        }
        let fused = fuse_predictions(s_out.item(i), t_out.item(i));
        loss -= fused[label] as f64;
        // d(-fused[label]) / d(stream logp[label]) = -1/2
        s_grad.item_mut(i)[label] = -0.5;
        t_grad.item_mut(i)[label] = -0.5;
    }
    let bad = s_bad.map(|l| format!("spatial.{l}")).or(t_bad.map(|l| format!("temporal.{l}")));
    let sg = model.spatial.backward(&s_caches, &s_grad)?;
    let tg = model.temporal.backward(&t_caches, &t_grad)?;
    debug_assert_eq!(n, s_out.batch());
    Ok((loss, sg, tg, bad))
}

/// Accuracy of each stream and of the fused prediction.
pub fn evaluate(model: &TwoStreamModel, source: &mut dyn SampleSource) -> Result<Metrics> {
    let preds = predict_source(model, source)?;
    Ok(metrics_of(&preds))
}

pub fn metrics_of(preds: &[(u8, Prediction)]) -> Metrics {
    let n = preds.len();
    if n == 0 {
        return Metrics::default();
    }
    let acc = |f: &dyn Fn(&Prediction) -> &[f32]| {
        preds.iter().filter(|(l, p)| argmax(f(p)) == *l as usize).count() as f64 / n as f64
    };
    Metrics {
        full: acc(&|p| &p.fused),
        spatial: acc(&|p| &p.spatial),
        temporal: acc(&|p| &p.temporal),
        count: n,
    }
}

/// Labels and predictions for every sample of a source, in order.
pub fn predict_source(model: &TwoStreamModel, source: &mut dyn SampleSource) -> Result<Vec<(u8, Prediction)>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(source.len());
    let mut start = 0;
    while start < source.len() {
        let end = (start + CHUNK).min(source.len());
        let samples = (start..end).map(|i| source.fetch(i)).collect::<Result<Vec<_>>>()?;
        let preds = samples
            .par_chunks(GROUP)
            .map(|g| model.predict(&g.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        out.extend(samples.iter().map(|s| s.label).zip(preds.into_iter().flatten()));
        start = end;
    }
    Ok(out)
}

/// Trains both streams on the fused loss. Batches hold samples from distinct
/// events. The model with the best fused validation accuracy (earliest on
/// ties) is returned alongside the per-epoch history.
pub fn train(
    model: &mut TwoStreamModel,
    train_set: &mut dyn SampleSource,
    valid_set: &mut dyn SampleSource,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let headers = train_set.headers()?;
    let sources: Vec<&str> = headers.iter().map(|(_, p)| p.event_id.as_str()).collect();
    let mut spatial_state = AdamState::new();
    let mut temporal_state = AdamState::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, TwoStreamModel)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = crate::nncore::lr_schedule(config.lr, epoch);
        let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
        order_rng.set_stream(epoch as u64);
        let batches = distinct_source_batches(&sources, config.batch_size, &mut order_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let samples = batch.iter().map(|&i| train_set.fetch(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&AugmentedSample> = samples.iter().collect();
            let parts = refs
                .par_chunks(GROUP)
                .enumerate()
                .map(|(g, chunk)| {
                    let stream = ((epoch as u64) << 40) | ((b as u64) << 16) | g as u64;
                    batch_step(model, chunk, config.seed ^ 0x5eed_d80f, stream)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut parts = parts.into_iter();
            let (mut loss, mut sg, mut tg, mut bad) = parts.next().expect("non-empty batch");
            for (l, s, t, b2) in parts {
                loss += l;
                sg.add_assign(&s);
                tg.add_assign(&t);
                bad = bad.or(b2);
            }
            let inv = 1.0 / batch.len() as f32;
            sg.scale(inv);
            tg.scale(inv);
            let loss = loss / batch.len() as f64;
            if !loss.is_finite() || !sg.is_finite() || !tg.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    layer: bad.unwrap_or_else(|| "loss".into()),
                });
            }
            loss_sum += loss * batch.len() as f64;
            config
                .adam
                .step(&mut model.spatial, &sg, &mut spatial_state, lr, config.weight_decay)?;
            config
                .adam
                .step(&mut model.temporal, &tg, &mut temporal_state, lr, config.weight_decay)?;
            if b % 20 == 0 {
                debug!("epoch {epoch} batch {b}/{} loss {loss:.4}", batches.len());
            }
        }
        let valid = evaluate(model, valid_set)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            valid,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4}, valid full {:.4} spatial {:.4} temporal {:.4}",
            record.train_loss, valid.full, valid.spatial, valid.temporal
        );
        on_epoch(&record);
        if best.as_ref().map_or(true, |(acc, _, _)| valid.full > *acc) {
            best = Some((valid.full, epoch, model.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub lr: f64,
    pub weight_decay: f64,
    pub valid: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub rows: Vec<SearchRow>,
    pub best_lr: f64,
    pub best_weight_decay: f64,
}

/// Picks the row with the highest fused validation accuracy; ties go to the
/// smaller learning rate, then the smaller weight decay.
pub fn best_row(rows: &[SearchRow]) -> Option<&SearchRow> {
    rows.iter().reduce(|best, r| {
        let better = r.valid.full > best.valid.full
            || (r.valid.full == best.valid.full
                && (r.lr < best.lr || (r.lr == best.lr && r.weight_decay < best.weight_decay)));
        if better {
            r
        } else {
            best
        }
    })
}

/// Trains a fresh model for every (lr, weight decay) pair and ranks them by
/// the best fused validation accuracy reached.
pub fn hyperparameter_search(
    lrs: &[f64],
    weight_decays: &[f64],
    base: &TrainConfig,
    mut fresh_model: impl FnMut() -> Result<TwoStreamModel>,
    train_set: &mut dyn SampleSource,
    valid_set: &mut dyn SampleSource,
    mut on_row: impl FnMut(&SearchRow),
) -> Result<SearchResult> {
    if lrs.is_empty() || weight_decays.is_empty() {
        return Err(Error::Config("search grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(lrs.len() * weight_decays.len());
    for &lr in lrs {
        for &weight_decay in weight_decays {
            let mut model = fresh_model()?;
            let config = TrainConfig {
                lr,
                weight_decay,
                ..base.clone()
            };
            let outcome = train(&mut model, train_set, valid_set, &config, |_| {})?;
            let valid = outcome.history[outcome.best_epoch - 1].valid;
            let row = SearchRow { lr, weight_decay, valid };
            on_row(&row);
            rows.push(row);
        }
    }
    let best = best_row(&rows).expect("non-empty grid").clone();
    Ok(SearchResult {
        rows,
        best_lr: best.lr,
        best_weight_decay: best.weight_decay,
    })
}
