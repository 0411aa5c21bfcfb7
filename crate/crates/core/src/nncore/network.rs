//! Sequential composition of named layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Cache, Layer, LayerSpec, ParamGrads};
use super::tensor::Tensor;
use super::{Mode, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Network<T> {
    names: Vec<String>,
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
}

/// Parameter gradients, one slot per layer (`None` for parameter-free layers).
#[derive(Clone, Debug)]
pub struct Gradients<T>(pub Vec<Option<ParamGrads<T>>>);

impl<T: Real> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.0.iter_mut().flatten() {
            g.weight.scale(factor);
            g.bias.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.weight.is_finite() && g.bias.is_finite())
    }
}

impl<T: Real> Network<T> {
    /// Builds the network, checking that consecutive shapes agree. Weights
    /// get He-normal initialization and biases start at zero.
    pub fn new<R: Rng + ?Sized>(input_shape: &[usize], specs: &[(&str, LayerSpec)], rng: &mut R) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (name, spec) in specs {
            spec.validate()?;
            shape = spec.output_shape(&shape)?;
            let mut layer = Layer::new(spec.clone())?;
            if let Some((ws, bs)) = spec.param_shapes() {
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                let n: usize = ws.iter().product();
                let w = (0..n).map(|_| T::from_f64(normal.sample(rng)).unwrap()).collect();
                layer.set_params(Tensor::from_vec(&ws, w)?, Tensor::zeros(&bs))?;
            }
            names.push(name.to_string());
            layers.push(layer);
        }
        Ok(Self {
            names,
            layers,
            input_shape: input_shape.to_vec(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.spec.output_shape(&s))
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x, mode, rng)?.0;
        }
        Ok(x)
    }

    /// Forward pass keeping every cache. Also reports the first layer whose
    /// output is non-finite, if any.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>, Option<String>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut first_bad = None;
        for (name, layer) in self.names.iter().zip(&self.layers) {
            let (y, cache) = layer.forward(&x, Mode::Train, rng)?;
            if first_bad.is_none() && !y.is_finite() {
                first_bad = Some(name.clone());
            }
            caches.push(cache);
            x = y;
        }
        Ok((x, caches, first_bad))
    }

    /// Backpropagates `grad_out`. The input gradient of the first layer is
    /// never computed.
    pub fn backward(&self, caches: &[Cache<T>], grad_out: &Tensor<T>) -> Result<Gradients<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::StaleCache {
                layer: caches.len().min(self.layers.len()),
                reason: format!("{} caches for {} layers", caches.len(), self.layers.len()),
            });
        }
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (gi, pg) = layer.backward(i, cache, &g, i > 0)?;
            grads[i] = pg;
            match gi {
                Some(gi) => g = gi,
                None => break,
            }
        }
        Ok(Gradients(grads))
    }

    /// Eval-mode activations: the input followed by each layer's output.
    pub fn activations(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for layer in &self.layers {
            let y = layer.forward(acts.last().unwrap(), Mode::Eval, &mut rng)?.0;
            acts.push(y);
        }
        Ok(acts)
    }

    /// Named parameter tensors in layer order (`<layer>.weight`, `<layer>.bias`).
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.names.iter().zip(&self.layers) {
            if layer.has_params() {
                out.push((format!("{name}.weight"), &layer.weight));
                out.push((format!("{name}.bias"), &layer.bias));
            }
        }
        out
    }

    /// Replaces parameters by name; every parameterized layer must be covered.
    pub fn load_params(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, layer) in self.names.iter().zip(self.layers.iter_mut()) {
            if !layer.has_params() {
                continue;
            }
            let find = |suffix: &str| {
                let key = format!("{name}.{suffix}");
                tensors
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Corrupt(format!("checkpoint has no tensor {key}")))
            };
            layer.set_params(find("weight")?, find("bias")?)?;
        }
        Ok(())
    }
}
