use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, dims4};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::patch::{PatchSize, STOCK_SIZES};
use crate::scalar::Scalar;

/// One of the five stock classifiers; they differ in input patch size and
/// the width of the hidden dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl ModelId {
    pub const ALL: [ModelId; 5] = [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4, ModelId::M5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn patch_size(self) -> PatchSize {
        STOCK_SIZES[self.index()]
    }

    pub fn hidden_nodes(self) -> usize {
        [150, 250, 350, 400, 600][self.index()]
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.index() + 1)
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(ModelId::M1),
            "M2" => Ok(ModelId::M2),
            "M3" => Ok(ModelId::M3),
            "M4" => Ok(ModelId::M4),
            "M5" => Ok(ModelId::M5),
            _ => Err(Error::invalid(format!("unknown model id `{s}` (expected M1..M5)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv3D { out_channels: usize, kernel: [usize; 3] },
    MaxPool3D { window: [usize; 3] },
    Dropout { rate: f64 },
    Dense { nodes: usize },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Activation applied to the output of layer `i`: ReLU after every
/// convolution and every dense layer except the one feeding the softmax.
pub fn activation_after(layers: &[LayerSpec], i: usize) -> Activation {
    match layers[i] {
        LayerSpec::Conv3D { .. } => Activation::Relu,
        LayerSpec::Dense { .. } if !matches!(layers.get(i + 1), Some(LayerSpec::Softmax)) => {
            Activation::Relu
        }
        _ => Activation::Identity,
    }
}

/// Architecture of one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model_id: ModelId,
    pub input: PatchSize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// The published architecture with 64 filters per convolution.
    pub fn stock(model_id: ModelId) -> Self {
        Self::with_channels(model_id, 64)
    }

    /// Stock architecture with a different filter count, for desk-scale runs.
    pub fn with_channels(model_id: ModelId, channels: usize) -> Self {
        let layers = vec![
            LayerSpec::Conv3D {
                out_channels: channels,
                kernel: [3, 5, 5],
            },
            LayerSpec::MaxPool3D { window: [3, 3, 3] },
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Conv3D {
                out_channels: channels,
                kernel: [3, 5, 5],
            },
            LayerSpec::MaxPool3D { window: [2, 2, 2] },
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Dense {
                nodes: model_id.hidden_nodes(),
            },
            LayerSpec::Dense { nodes: 2 },
            LayerSpec::Softmax,
        ];
        ModelSpec {
            model_id,
            input: model_id.patch_size(),
            layers,
        }
    }

    /// Output shape of every layer, checking the stack is well formed.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![1, self.input.d, self.input.h, self.input.w];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (LayerSpec::Conv3D { out_channels, kernel }, [_, d, h, w]) => {
                    if *out_channels == 0 || kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
                        return Err(Error::invalid(format!("layer {i}: bad convolution {layer:?}")));
                    }
                    vec![*out_channels, *d, *h, *w]
                }
                (LayerSpec::MaxPool3D { window }, [c, d, h, w]) => {
                    if window.iter().zip([d, h, w]).any(|(&k, n)| k == 0 || k > *n) {
                        return Err(Error::Shape(format!(
                            "layer {i}: pool window {window:?} larger than input {shape:?}"
                        )));
                    }
                    vec![*c, d / window[0], h / window[1], w / window[2]]
                }
                (LayerSpec::Dropout { rate }, _) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::invalid(format!("layer {i}: dropout rate {rate}")));
                    }
                    shape.clone()
                }
                (LayerSpec::Dense { nodes }, _) => {
                    if *nodes == 0 {
                        return Err(Error::invalid(format!("layer {i}: dense layer with 0 nodes")));
                    }
                    vec![*nodes]
                }
                (LayerSpec::Softmax, [_]) => shape.clone(),
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i} ({layer:?}) cannot follow output shape {shape:?}"
                    )))
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Feature shape entering the first dense layer.
    pub fn pre_flatten_shape(&self) -> Result<Vec<usize>> {
        let shapes = self.layer_shapes()?;
        let first_dense = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. }))
            .ok_or_else(|| Error::invalid("model has no dense layer"))?;
        Ok(if first_dense == 0 {
            vec![1, self.input.d, self.input.h, self.input.w]
        } else {
            shapes[first_dense - 1].clone()
        })
    }

    /// Names and shapes of the learnable tensors, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.layer_shapes()?;
        let mut in_shape = vec![1, self.input.d, self.input.h, self.input.w];
        let mut out = Vec::new();
        let (mut n_conv, mut n_dense) = (0, 0);
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv3D { out_channels, kernel } => {
                    n_conv += 1;
                    let mut w = vec![*out_channels, in_shape[0]];
                    w.extend_from_slice(kernel);
                    out.push((format!("conv{n_conv}.weight"), w));
                    out.push((format!("conv{n_conv}.bias"), vec![*out_channels]));
                }
                LayerSpec::Dense { nodes } => {
                    n_dense += 1;
                    let fan_in: usize = in_shape.iter().product();
                    out.push((format!("dense{n_dense}.weight"), vec![*nodes, fan_in]));
                    out.push((format!("dense{n_dense}.bias"), vec![*nodes]));
                }
                _ => {}
            }
            in_shape = shape.clone();
        }
        Ok(out)
    }

    /// Glorot-uniform weights from a seeded RNG, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<Parameters<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .param_shapes()?
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let receptive: usize = shape[2..].iter().product();
                    let fan_in = shape[1] * receptive;
                    let fan_out = shape[0] * receptive;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Parameters { tensors })
    }

    /// Spec plus freshly initialized parameters.
    pub fn build<T: Scalar>(model_id: ModelId, channels: usize, seed: u64) -> Result<(Self, Parameters<T>)> {
        let spec = Self::with_channels(model_id, channels);
        let params = spec.init_params(seed)?;
        Ok((spec, params))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Learnable tensors of a model: weight then bias for each convolution and
/// dense layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros_like(&self) -> Self {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: Tensor::zeros(t.tensor.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: t.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Errors naming the first tensor whose name or shape differs from `spec`.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.param_shapes()?;
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} expects {} tensors, found {}",
                spec.model_id,
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || shape.as_slice() != t.tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?}, {} expects `{name}` with shape {shape:?}",
                    t.name,
                    t.tensor.shape(),
                    spec.model_id
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Parameters<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.tensor.data_mut().iter_mut().zip(b.tensor.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.tensor.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.tensor.fill(T::zero());
        }
    }

    /// Bitwise equality, treating NaNs with equal payloads as equal.
    pub fn bitwise_eq(&self, other: &Parameters<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

#[derive(Debug, Clone)]
enum StepCache<T> {
    Conv {
        input: Tensor<T>,
        output: Tensor<T>,
    },
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Dropout {
        mask: Option<Vec<T>>,
    },
    Dense {
        input: Vec<T>,
        input_shape: Vec<usize>,
        output: Vec<T>,
        relu: bool,
    },
    Softmax,
}

/// Activations recorded by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    steps: Vec<StepCache<T>>,
    logits: Vec<T>,
    probs: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn probabilities(&self) -> &[T] {
        &self.probs
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// True when both passes switched every ReLU and pooling window the same
    /// way, i.e. they ran through the same linear piece of the network.
    pub fn same_pattern(&self, other: &Trace<T>) -> bool {
        let on = |v: &[T]| v.iter().map(|&x| x > T::zero()).collect::<Vec<_>>();
        self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|pair| match pair {
                (StepCache::Conv { output: a, .. }, StepCache::Conv { output: b, .. }) => on(a.data()) == on(b.data()),
                (StepCache::Pool { argmax: a, .. }, StepCache::Pool { argmax: b, .. }) => a == b,
                (StepCache::Dropout { mask: a }, StepCache::Dropout { mask: b }) => a == b,
                (StepCache::Dense { output: a, relu: ra, .. }, StepCache::Dense { output: b, relu: rb, .. }) => {
                    ra == rb && (!ra || on(a) == on(b))
                }
                (StepCache::Softmax, StepCache::Softmax) => true,
                _ => false,
            })
    }
}

fn learnable<T>(params: &Parameters<T>, k: usize) -> Result<(&Tensor<T>, &Tensor<T>)> {
    match (params.tensors.get(2 * k), params.tensors.get(2 * k + 1)) {
        (Some(w), Some(b)) => Ok((&w.tensor, &b.tensor)),
        _ => Err(Error::Shape(format!("missing parameters for learnable layer {k}"))),
    }
}

/// Runs one sample through the network. Passing an RNG selects training
/// mode (dropout active); `None` is inference.
pub fn forward_traced<T: Scalar>(
    spec: &ModelSpec,
    params: &Parameters<T>,
    input: &Tensor<T>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Trace<T>> {
    let expected = [1, spec.input.d, spec.input.h, spec.input.w];
    if input.shape() != expected {
        return Err(Error::Shape(format!(
            "{} expects input {:?}, got {:?}",
            spec.model_id,
            expected,
            input.shape()
        )));
    }
    let mut current = input.clone();
    let mut steps = Vec::with_capacity(spec.layers.len());
    let mut k = 0;
    let mut logits = Vec::new();
    let mut probs = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let act = activation_after(&spec.layers, i);
        match layer {
            LayerSpec::Conv3D { .. } => {
                let (w, b) = learnable(params, k)?;
                k += 1;
                let mut out = layers::conv3d_forward(&current, w, b)?;
                if act == Activation::Relu {
                    layers::relu_in_place(out.data_mut());
                }
                let input = std::mem::replace(&mut current, out.clone());
                steps.push(StepCache::Conv { input, output: out });
            }
            LayerSpec::MaxPool3D { window } => {
                let (out, argmax) = layers::maxpool3d_forward(&current, *window)?;
                let input_shape = current.shape().to_vec();
                current = out;
                steps.push(StepCache::Pool { argmax, input_shape });
            }
            LayerSpec::Dropout { rate } => {
                let (out, mask) = match rng.as_deref_mut() {
                    Some(r) => layers::dropout(&current, *rate, r, true)?,
                    None => (current.clone(), None),
                };
                current = out;
                steps.push(StepCache::Dropout { mask });
            }
            LayerSpec::Dense { nodes } => {
                let (w, b) = learnable(params, k)?;
                k += 1;
                let input_shape = current.shape().to_vec();
                let flat = std::mem::replace(&mut current, Tensor::zeros(vec![1])).into_data();
                let mut out = layers::dense_forward(&flat, w, b)?;
                let relu = act == Activation::Relu;
                if relu {
                    layers::relu_in_place(&mut out);
                }
                current = Tensor::new(vec![*nodes], out.clone())?;
                steps.push(StepCache::Dense {
                    input: flat,
                    input_shape,
                    output: out,
                    relu,
                });
            }
            LayerSpec::Softmax => {
                logits = current.data().to_vec();
                probs = layers::softmax(&logits);
                current = Tensor::new(vec![probs.len()], probs.clone())?;
                steps.push(StepCache::Softmax);
            }
        }
    }
    if probs.is_empty() {
        logits = current.data().to_vec();
        probs = logits.clone();
    }
    Ok(Trace { steps, logits, probs })
}

/// Reverse pass. `upstream` is the loss gradient with respect to the logits
/// (the input of the softmax layer). Parameter gradients are added into
/// `grads`; the input gradient is returned when requested.
pub fn backward_traced<T: Scalar>(
    spec: &ModelSpec,
    params: &Parameters<T>,
    trace: &Trace<T>,
    upstream: &[T],
    grads: &mut Parameters<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    if trace.steps.len() != spec.layers.len() {
        return Err(Error::Shape("trace does not belong to this model".into()));
    }
    if upstream.len() != trace.logits.len() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, logits have {}",
            upstream.len(),
            trace.logits.len()
        )));
    }
    let mut k = spec
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Conv3D { .. } | LayerSpec::Dense { .. }))
        .count();
    let mut grad = Tensor::new(vec![upstream.len()], upstream.to_vec())?;
    for (i, step) in trace.steps.iter().enumerate().rev() {
        match step {
            StepCache::Softmax => {}
            StepCache::Dense {
                input,
                input_shape,
                output,
                relu,
            } => {
                k -= 1;
                let (w, _) = learnable(params, k)?;
                let mut g = grad.into_data();
                if *relu {
                    layers::relu_backward(&mut g, output);
                }
                let mut gin = vec![T::zero(); input.len()];
                let (gw, gb) = split_pair(grads, k)?;
                layers::dense_backward(input, w, &g, gw, gb, Some(&mut gin))?;
                grad = Tensor::new(input_shape.clone(), gin)?;
            }
            StepCache::Dropout { mask } => {
                layers::dropout_backward(grad.data_mut(), mask.as_deref());
            }
            StepCache::Pool { argmax, input_shape } => {
                grad = layers::maxpool3d_backward(&grad, argmax, input_shape)?;
            }
            StepCache::Conv { input, output } => {
                k -= 1;
                let (w, _) = learnable(params, k)?;
                if activation_after(&spec.layers, i) == Activation::Relu {
                    layers::relu_backward(grad.data_mut(), output.data());
                }
                dims4(input, "conv input")?;
                let want_in = i > 0 || need_input_grad;
                let mut gin = if want_in {
                    Some(Tensor::zeros(input.shape().to_vec()))
                } else {
                    None
                };
                let (gw, gb) = split_pair(grads, k)?;
                layers::conv3d_backward(input, w, &grad, gw, gb, gin.as_mut())?;
                match gin {
                    Some(g) => grad = g,
                    None => return Ok(None),
                }
            }
        }
    }
    Ok(if need_input_grad { Some(grad) } else { None })
}

fn split_pair<T>(grads: &mut Parameters<T>, k: usize) -> Result<(&mut Tensor<T>, &mut Tensor<T>)> {
    match grads.tensors.get_mut(2 * k..2 * k + 2) {
        Some([w, b]) => Ok((&mut w.tensor, &mut b.tensor)),
        _ => Err(Error::Shape(format!("missing gradient buffers for learnable layer {k}"))),
    }
}

/// A model together with its parameters and the trace of its last
/// training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub spec: ModelSpec,
    pub params: Parameters<T>,
    trace: Option<Trace<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: ModelSpec, params: Parameters<T>) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(Network {
            spec,
            params,
            trace: None,
        })
    }

    /// Builds a stock-shaped model with `channels` filters and seeded weights.
    pub fn build(model_id: ModelId, channels: usize, seed: u64) -> Result<Self> {
        let (spec, params) = ModelSpec::build(model_id, channels, seed)?;
        Self::new(spec, params)
    }

    /// Forward pass that keeps its activations for [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor<T>, rng: Option<&mut dyn RngCore>) -> Result<Vec<T>> {
        let trace = forward_traced(&self.spec, &self.params, input, rng)?;
        let probs = trace.probs.clone();
        self.trace = Some(trace);
        Ok(probs)
    }

    /// Inference-mode probabilities; does not touch the stored trace.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        Ok(forward_traced(&self.spec, &self.params, input, None)?.probs)
    }

    /// Gradients of the loss whose logit gradient is `upstream`, using the
    /// activations of the last [`Network::forward`] call.
    pub fn backward(&self, upstream: &[T]) -> Result<(Parameters<T>, Tensor<T>)> {
        let trace = self.trace.as_ref().ok_or(Error::NoForwardPass)?;
        let mut grads = self.params.zeros_like();
        let input_grad = backward_traced(&self.spec, &self.params, trace, upstream, &mut grads, true)?
            .expect("input gradient requested");
        Ok((grads, input_grad))
    }

    pub fn last_trace(&self) -> Option<&Trace<T>> {
        self.trace.as_ref()
    }
}
