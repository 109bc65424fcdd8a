//! Sequential convolutional networks with reverse-mode differentiation.
//!
//! The layer vocabulary is fixed (conv2d / relu / maxpool2d / dense /
//! global_avg_pool / dropout / flatten); networks always end in a single
//! scalar output. The ReLU backward rule is switchable so guided
//! backpropagation reuses the same machinery.

mod adam;
mod checkpoint;
pub mod ops;

pub use adam::{train_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use ops::{ConvDims, PoolDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// One layer of the fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Dense {
        out_features: usize,
    },
    GlobalAvgPool,
    Dropout {
        p: f64,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// How gradients pass through ReLU sites on the way back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluBackwardPolicy {
    /// Exact reverse-mode gradient.
    Standard,
    /// Multiplies by both the forward-positivity and the upstream-positivity
    /// indicators, cutting gradients that would decrease the output.
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone)]
struct LayerParams<T: Element> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// Activations recorded by one forward pass; required for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Element> {
    net_id: u64,
    net_version: u64,
    /// acts[0] is the input; acts[i + 1] the output of layer i.
    acts: Vec<Tensor<T>>,
    /// Scaled keep-masks for dropout layers active during the pass.
    drop_masks: Vec<Option<Vec<T>>>,
    pub prediction: T,
}

impl<T: Element> ForwardCache<T> {
    /// Output activation of the named layer (by index into the layer list).
    fn output_of(&self, layer_idx: usize) -> &Tensor<T> {
        &self.acts[layer_idx + 1]
    }
}

/// A fixed sequence of layers plus their parameters.
///
/// Immutable while shared for concurrent forward/backward passes; training
/// mutates parameters and therefore needs exclusive access.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T: Element> {
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<T>>>,
    /// shapes[0] is the input shape; shapes[i + 1] the output shape of layer i.
    shapes: Vec<Vec<usize>>,
    mode: Mode,
    id: u64,
    version: u64,
    rng: ChaCha8Rng,
}

impl<T: Element> NetworkGraph<T> {
    /// Builds the network, checking shape compatibility layer by layer and
    /// initializing conv/dense parameters (He normal) from `seed`.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut names = std::collections::HashSet::new();
        for l in &layers {
            if !names.insert(l.name.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate layer identifier '{}'",
                    l.name
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = vec![input_shape.to_vec()];
        let mut params: Vec<Option<LayerParams<T>>> = Vec::with_capacity(layers.len());
        for spec in &layers {
            let cur = shapes.last().unwrap().clone();
            let (out_shape, p) = infer_layer(spec, &cur, &mut rng)?;
            shapes.push(out_shape);
            params.push(p);
        }
        let out_numel: usize = shapes.last().unwrap().iter().product();
        if out_numel != 1 {
            return Err(Error::Shape(format!(
                "network must end in a single scalar output, final shape is {:?}",
                shapes.last().unwrap()
            )));
        }
        Ok(NetworkGraph {
            layers,
            params,
            shapes,
            mode: Mode::Inference,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            rng,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of the named layer.
    pub fn layer_output_shape(&self, name: &str) -> Result<&[usize]> {
        let idx = self.layer_index(name)?;
        Ok(&self.shapes[idx + 1])
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = self.layer_index(name)?;
        self.params[idx]
            .as_ref()
            .map(|p| &p.weight)
            .ok_or_else(|| Error::InvalidArgument(format!("layer '{name}' has no parameters")))
    }

    pub fn bias(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = self.layer_index(name)?;
        self.params[idx]
            .as_ref()
            .map(|p| &p.bias)
            .ok_or_else(|| Error::InvalidArgument(format!("layer '{name}' has no parameters")))
    }

    pub fn set_weight(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self.layer_index(name)?;
        let slot = self.params[idx]
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("layer '{name}' has no parameters")))?;
        if slot.weight.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "weight for '{name}' must have shape {:?}, got {:?}",
                slot.weight.shape(),
                value.shape()
            )));
        }
        slot.weight = value;
        self.version += 1;
        Ok(())
    }

    pub fn set_bias(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self.layer_index(name)?;
        let slot = self.params[idx]
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("layer '{name}' has no parameters")))?;
        if slot.bias.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "bias for '{name}' must have shape {:?}, got {:?}",
                slot.bias.shape(),
                value.shape()
            )));
        }
        slot.bias = value;
        self.version += 1;
        Ok(())
    }

    /// Flat list of parameter tensors (weight then bias per parameterized
    /// layer, in layer order). Defines the slot order used by optimizers,
    /// gradients and checkpoints.
    pub fn param_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, p) in self.layers.iter().zip(&self.params) {
            if let Some(p) = p {
                out.push((format!("{}.weight", spec.name), &p.weight));
                out.push((format!("{}.bias", spec.name), &p.bias));
            }
        }
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.version += 1;
        let mut out = Vec::new();
        for p in self.params.iter_mut().flatten() {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.param_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Fresh seed for a per-item dropout stream during training.
    pub(crate) fn next_dropout_seed(&mut self) -> u64 {
        self.rng.gen()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.input_shape() {
            return Err(Error::Shape(format!(
                "network expects input shape {:?}, got {:?}",
                self.input_shape(),
                input.shape()
            )));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<()> {
        if cache.net_id != self.id || cache.net_version != self.version {
            return Err(Error::StaleCache);
        }
        Ok(())
    }

    /// Deterministic forward pass. In train mode dropout needs an RNG
    /// stream, so this entry point only serves inference mode.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(T, ForwardCache<T>)> {
        if self.mode == Mode::Train {
            return Err(Error::InvalidArgument(
                "forward() is inference-only; train-mode passes go through forward_with_rng".into(),
            ));
        }
        self.forward_inner(input, None)
    }

    /// Forward pass with an explicit RNG for dropout (active in train mode).
    pub fn forward_with_rng(&self, input: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<(T, ForwardCache<T>)> {
        self.forward_inner(input, Some(rng))
    }

    fn forward_inner(&self, input: &Tensor<T>, mut rng: Option<&mut ChaCha8Rng>) -> Result<(T, ForwardCache<T>)> {
        self.check_input(input)?;
        if let Some(i) = input.first_non_finite() {
            return Err(Error::NonFinite {
                layer: format!("input[{i}]"),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        let mut drop_masks: Vec<Option<Vec<T>>> = vec![None; self.layers.len()];
        for (i, spec) in self.layers.iter().enumerate() {
            let x = &acts[i];
            let out_shape = &self.shapes[i + 1];
            let mut y = Tensor::zeros(out_shape);
            match &spec.kind {
                LayerKind::Conv2d { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let d = conv_dims(&spec.kind, &self.shapes[i], out_shape);
                    ops::conv2d_forward(x.data(), p.weight.data(), p.bias.data(), &d, y.data_mut());
                }
                LayerKind::Relu => {
                    for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = if v > T::zero() { v } else { T::zero() };
                    }
                }
                LayerKind::MaxPool2d { .. } => {
                    let d = pool_dims(&spec.kind, &self.shapes[i], out_shape);
                    ops::maxpool_forward(x.data(), &d, y.data_mut());
                }
                LayerKind::Dense { out_features } => {
                    let p = self.params[i].as_ref().unwrap();
                    ops::dense_forward(x.data(), p.weight.data(), p.bias.data(), *out_features, y.data_mut());
                }
                LayerKind::GlobalAvgPool => {
                    let (c, h, w) = chw(&self.shapes[i]);
                    let inv = T::from_f64(1.0 / (h * w) as f64).unwrap();
                    for ch in 0..c {
                        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
                        let mut acc = T::zero();
                        for &v in plane {
                            acc = acc + v;
                        }
                        y.data_mut()[ch] = acc * inv;
                    }
                }
                LayerKind::Dropout { p } => {
                    if self.mode == Mode::Train {
                        let rng = rng.as_mut().ok_or_else(|| {
                            Error::InvalidArgument("train-mode dropout needs an RNG stream".into())
                        })?;
                        let keep = 1.0 - *p;
                        let scale = T::from_f64(1.0 / keep).unwrap();
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| {
                                if rng.gen::<f64>() < *p {
                                    T::zero()
                                } else {
                                    scale
                                }
                            })
                            .collect();
                        for ((o, &v), &m) in y.data_mut().iter_mut().zip(x.data()).zip(&mask) {
                            *o = v * m;
                        }
                        drop_masks[i] = Some(mask);
                    } else {
                        // Inference dropout is the identity.
                        y.data_mut().copy_from_slice(x.data());
                    }
                }
                LayerKind::Flatten => {
                    y.data_mut().copy_from_slice(x.data());
                }
            }
            if y.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    layer: spec.name.clone(),
                });
            }
            acts.push(y);
        }
        let prediction = acts.last().unwrap().data()[0];
        Ok((
            prediction,
            ForwardCache {
                net_id: self.id,
                net_version: self.version,
                acts,
                drop_masks,
                prediction,
            },
        ))
    }

    /// Gradient of the scalar output with respect to the input.
    pub fn backward_to_input(&self, cache: &ForwardCache<T>, policy: ReluBackwardPolicy) -> Result<Tensor<T>> {
        let (grad, _) = self.backprop(cache, policy, None, false, T::one())?;
        let grad = grad.expect("input gradient requested");
        if grad.first_non_finite().is_some() {
            return Err(Error::NonFinite {
                layer: "backward(input)".into(),
            });
        }
        Ok(grad)
    }

    /// Gradient of the scalar output with respect to the named layer's
    /// output feature maps, shaped like those maps.
    pub fn backward_to_layer(&self, cache: &ForwardCache<T>, layer_id: &str) -> Result<Tensor<T>> {
        let idx = self.layer_index(layer_id)?;
        let (grad, _) = self.backprop(cache, ReluBackwardPolicy::Standard, Some(idx), false, T::one())?;
        let grad = grad.expect("layer gradient requested");
        if grad.first_non_finite().is_some() {
            return Err(Error::NonFinite {
                layer: format!("backward({layer_id})"),
            });
        }
        Ok(grad)
    }

    /// Parameter gradients for `seed_grad * d(output)/d(params)`, in
    /// `param_tensors` slot order.
    pub fn backward_params(&self, cache: &ForwardCache<T>, seed_grad: T) -> Result<Vec<Tensor<T>>> {
        let (_, grads) = self.backprop(cache, ReluBackwardPolicy::Standard, None, true, seed_grad)?;
        let grads = grads.expect("parameter gradients requested");
        for g in &grads {
            if g.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    layer: "backward(params)".into(),
                });
            }
        }
        Ok(grads)
    }

    /// Shared reverse sweep. Walks layers from the output back; optionally
    /// stops at the output of layer `stop_at` and optionally collects
    /// parameter gradients.
    fn backprop(
        &self,
        cache: &ForwardCache<T>,
        policy: ReluBackwardPolicy,
        stop_at: Option<usize>,
        want_params: bool,
        seed_grad: T,
    ) -> Result<(Option<Tensor<T>>, Option<Vec<Tensor<T>>>)> {
        self.check_cache(cache)?;
        let mut param_grads: Vec<Tensor<T>> = Vec::new();
        if want_params {
            for (_, t) in self.param_tensors() {
                param_grads.push(Tensor::zeros(t.shape()));
            }
        }
        // Map layer index -> slot base in param_grads.
        let mut slot_base = vec![usize::MAX; self.layers.len()];
        {
            let mut next = 0usize;
            for (i, p) in self.params.iter().enumerate() {
                if p.is_some() {
                    slot_base[i] = next;
                    next += 2;
                }
            }
        }

        let mut grad = Tensor::filled(self.shapes.last().unwrap(), seed_grad);
        for i in (0..self.layers.len()).rev() {
            if let Some(stop) = stop_at {
                if i == stop {
                    return Ok((Some(grad), None));
                }
            }
            let spec = &self.layers[i];
            let x = &cache.acts[i];
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let mut gin = Tensor::zeros(in_shape);
            match &spec.kind {
                LayerKind::Conv2d { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let d = conv_dims(&spec.kind, in_shape, out_shape);
                    ops::conv2d_backward_input(grad.data(), p.weight.data(), &d, gin.data_mut());
                    if want_params {
                        let base = slot_base[i];
                        let (gw, gb) = param_grads.split_at_mut(base + 1);
                        ops::conv2d_backward_params(
                            grad.data(),
                            x.data(),
                            &d,
                            gw[base].data_mut(),
                            gb[0].data_mut(),
                        );
                    }
                }
                LayerKind::Relu => {
                    for ((gi, &g), &v) in gin.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
                        let pass = match policy {
                            ReluBackwardPolicy::Standard => v > T::zero(),
                            ReluBackwardPolicy::Guided => v > T::zero() && g > T::zero(),
                        };
                        *gi = if pass { g } else { T::zero() };
                    }
                }
                LayerKind::MaxPool2d { .. } => {
                    let d = pool_dims(&spec.kind, in_shape, out_shape);
                    ops::maxpool_backward(grad.data(), x.data(), &d, gin.data_mut());
                }
                LayerKind::Dense { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let in_f: usize = in_shape.iter().product();
                    ops::dense_backward_input(grad.data(), p.weight.data(), in_f, gin.data_mut());
                    if want_params {
                        let base = slot_base[i];
                        let (gw, gb) = param_grads.split_at_mut(base + 1);
                        ops::dense_backward_params(
                            grad.data(),
                            x.data(),
                            gw[base].data_mut(),
                            gb[0].data_mut(),
                        );
                    }
                }
                LayerKind::GlobalAvgPool => {
                    let (c, h, w) = chw(in_shape);
                    let inv = T::from_f64(1.0 / (h * w) as f64).unwrap();
                    for ch in 0..c {
                        let g = grad.data()[ch] * inv;
                        for v in &mut gin.data_mut()[ch * h * w..(ch + 1) * h * w] {
                            *v = g;
                        }
                    }
                }
                LayerKind::Dropout { .. } => match &cache.drop_masks[i] {
                    Some(mask) => {
                        for ((gi, &g), &m) in gin.data_mut().iter_mut().zip(grad.data()).zip(mask) {
                            *gi = g * m;
                        }
                    }
                    None => gin.data_mut().copy_from_slice(grad.data()),
                },
                LayerKind::Flatten => {
                    gin.data_mut().copy_from_slice(grad.data());
                }
            }
            grad = gin;
        }
        if want_params {
            Ok((Some(grad), Some(param_grads)))
        } else {
            Ok((Some(grad), None))
        }
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn conv_dims(kind: &LayerKind, in_shape: &[usize], out_shape: &[usize]) -> ConvDims {
    match kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => ConvDims {
            in_c: in_shape[0],
            in_h: in_shape[1],
            in_w: in_shape[2],
            out_c: *out_channels,
            out_h: out_shape[1],
            out_w: out_shape[2],
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
        },
        _ => unreachable!(),
    }
}

fn pool_dims(kind: &LayerKind, in_shape: &[usize], out_shape: &[usize]) -> PoolDims {
    match kind {
        LayerKind::MaxPool2d { kernel, stride } => PoolDims {
            channels: in_shape[0],
            in_h: in_shape[1],
            in_w: in_shape[2],
            out_h: out_shape[1],
            out_w: out_shape[2],
            kernel: *kernel,
            stride: *stride,
        },
        _ => unreachable!(),
    }
}

/// Shape inference plus parameter initialization for one layer.
fn infer_layer<T: Element>(
    spec: &LayerSpec,
    input: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Option<LayerParams<T>>)> {
    let name = &spec.name;
    match &spec.kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if input.len() != 3 {
                return Err(Error::Shape(format!(
                    "conv2d '{name}' needs a [C,H,W] input, got {input:?}"
                )));
            }
            if *kernel < 1 || *stride < 1 || *out_channels < 1 {
                return Err(Error::InvalidArgument(format!(
                    "conv2d '{name}': kernel/stride/out_channels must be >= 1"
                )));
            }
            let (c, h, w) = chw(input);
            if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                return Err(Error::Shape(format!(
                    "conv2d '{name}': kernel {kernel} too large for input {input:?} with padding {padding}"
                )));
            }
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            let fan_in = c * kernel * kernel;
            let weight = he_init(&[*out_channels, c, *kernel, *kernel], fan_in, rng);
            let bias = Tensor::zeros(&[*out_channels]);
            Ok((vec![*out_channels, oh, ow], Some(LayerParams { weight, bias })))
        }
        LayerKind::Relu => Ok((input.to_vec(), None)),
        LayerKind::MaxPool2d { kernel, stride } => {
            if input.len() != 3 {
                return Err(Error::Shape(format!(
                    "maxpool2d '{name}' needs a [C,H,W] input, got {input:?}"
                )));
            }
            if *kernel < 1 || *stride < 1 {
                return Err(Error::InvalidArgument(format!(
                    "maxpool2d '{name}': kernel/stride must be >= 1"
                )));
            }
            let (c, h, w) = chw(input);
            if *kernel > h || *kernel > w {
                return Err(Error::Shape(format!(
                    "maxpool2d '{name}': kernel {kernel} exceeds input {input:?}"
                )));
            }
            Ok((vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1], None))
        }
        LayerKind::Dense { out_features } => {
            if input.len() != 1 {
                return Err(Error::Shape(format!(
                    "dense '{name}' needs a flattened rank-1 input, got {input:?}"
                )));
            }
            if *out_features < 1 {
                return Err(Error::InvalidArgument(format!(
                    "dense '{name}': out_features must be >= 1"
                )));
            }
            let in_f = input[0];
            let weight = he_init(&[*out_features, in_f], in_f, rng);
            let bias = Tensor::zeros(&[*out_features]);
            Ok((vec![*out_features], Some(LayerParams { weight, bias })))
        }
        LayerKind::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(Error::Shape(format!(
                    "global_avg_pool '{name}' needs a [C,H,W] input, got {input:?}"
                )));
            }
            Ok((vec![input[0]], None))
        }
        LayerKind::Dropout { p } => {
            if !(0.0..1.0).contains(p) {
                return Err(Error::InvalidArgument(format!(
                    "dropout '{name}': p must satisfy 0 <= p < 1, got {p}"
                )));
            }
            Ok((input.to_vec(), None))
        }
        LayerKind::Flatten => Ok((vec![input.iter().product()], None)),
    }
}

fn he_init<T: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std).unwrap()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
