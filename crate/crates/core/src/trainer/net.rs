//! Trainable mirror of [`Model`] with forward caches and backprop.

use num_traits::Float;

use crate::model::{Layer, Model};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Mean softmax cross-entropy against the labels.
    CrossEntropy,
    /// `(1/N) sum_n 0.5 * |logits_n - onehot(label_n)|²`.
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm normalizes with batch statistics.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub enum NetLayer<T> {
    Conv {
        weight: Vec<T>,
        bias: Vec<T>,
        shape: [usize; 4],
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        epsilon: T,
    },
    Relu,
    MaxPool,
    Flatten,
    Linear {
        weight: Vec<T>,
        bias: Vec<T>,
        outputs: usize,
        features: usize,
    },
    Add {
        source: usize,
    },
}

impl<T: Float> NetLayer<T> {
    /// Trainable parameter buffers in a fixed order.
    pub fn params(&self) -> Vec<&Vec<T>> {
        match self {
            NetLayer::Conv { weight, bias, .. } | NetLayer::Linear { weight, bias, .. } => {
                vec![weight, bias]
            }
            NetLayer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            NetLayer::Conv { weight, bias, .. } | NetLayer::Linear { weight, bias, .. } => {
                vec![weight, bias]
            }
            NetLayer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }
}

/// Gradients shaped like [`NetLayer::params`], one entry per layer.
pub type Grads<T> = Vec<Vec<Vec<T>>>;

#[derive(Debug, Clone)]
pub struct Net<T> {
    id: String,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<NetLayer<T>>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
}

enum LayerCache<T> {
    None,
    Relu,
    BatchNorm {
        normalized: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Pool {
        argmax: Vec<usize>,
    },
}

/// Activations retained by [`Net::forward`] for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    input: Vec<T>,
    outputs: Vec<Vec<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Float> ForwardCache<T> {
    pub fn logits(&self) -> &[T] {
        self.outputs
            .last()
            .map(|v| v.as_slice())
            .unwrap_or(&self.input)
    }

    /// Which ReLU units are active and which inputs won each pooling window.
    /// Two inputs with equal patterns lie in the same piecewise-smooth region.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for (out, cache) in self.outputs.iter().zip(&self.caches) {
            match cache {
                LayerCache::Pool { argmax } => pattern.extend_from_slice(argmax),
                LayerCache::Relu => pattern.extend(out.iter().map(|&v| (v > T::zero()) as usize)),
                _ => {}
            }
        }
        pattern
    }
}

fn cast<T: Float>(v: f32) -> T {
    T::from(v).expect("f32 fits every float type")
}

fn to_f32<T: Float>(v: T) -> f32 {
    v.to_f32().expect("float converts to f32")
}

fn vec_of<T: Float>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&v| cast(v)).collect()
}

fn tensor_of<T: Float>(shape: Vec<usize>, v: &[T]) -> Tensor {
    Tensor::new(shape, v.iter().map(|&x| to_f32(x)).collect()).expect("shape tracked")
}

impl<T: Float + Send + Sync> Net<T> {
    pub fn from_model(model: &Model) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let s = weight.shape();
                    NetLayer::Conv {
                        weight: vec_of(weight),
                        bias: vec_of(bias),
                        shape: [s[0], s[1], s[2], s[3]],
                        stride: *stride,
                        padding: *padding,
                    }
                }
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => NetLayer::BatchNorm {
                    gamma: vec_of(gamma),
                    beta: vec_of(beta),
                    running_mean: vec_of(running_mean),
                    running_var: vec_of(running_var),
                    epsilon: cast(*epsilon),
                },
                Layer::Relu => NetLayer::Relu,
                Layer::MaxPool2d => NetLayer::MaxPool,
                Layer::Flatten => NetLayer::Flatten,
                Layer::Linear { weight, bias } => NetLayer::Linear {
                    weight: vec_of(weight),
                    bias: vec_of(bias),
                    outputs: weight.shape()[0],
                    features: weight.shape()[1],
                },
                Layer::Add { source } => NetLayer::Add { source: *source },
            })
            .collect();
        Self {
            id: model.id().to_string(),
            input_shape: model.input_shape(),
            num_classes: model.num_classes(),
            layers,
            shapes: model.layer_shapes(),
        }
    }

    pub fn to_model(&self) -> Model {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                NetLayer::Conv {
                    weight,
                    bias,
                    shape,
                    stride,
                    padding,
                } => Layer::Conv2d {
                    weight: tensor_of(shape.to_vec(), weight),
                    bias: tensor_of(vec![shape[0]], bias),
                    stride: *stride,
                    padding: *padding,
                },
                NetLayer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => Layer::BatchNorm2d {
                    gamma: tensor_of(vec![gamma.len()], gamma),
                    beta: tensor_of(vec![beta.len()], beta),
                    running_mean: tensor_of(vec![running_mean.len()], running_mean),
                    running_var: tensor_of(vec![running_var.len()], running_var),
                    epsilon: to_f32(*epsilon),
                },
                NetLayer::Relu => Layer::Relu,
                NetLayer::MaxPool => Layer::MaxPool2d,
                NetLayer::Flatten => Layer::Flatten,
                NetLayer::Linear {
                    weight,
                    bias,
                    outputs,
                    features,
                } => Layer::Linear {
                    weight: tensor_of(vec![*outputs, *features], weight),
                    bias: tensor_of(vec![*outputs], bias),
                },
                NetLayer::Add { source } => Layer::Add { source: *source },
            })
            .collect();
        Model::new(self.id.clone(), self.input_shape, self.num_classes, layers)
            .expect("shapes preserved")
    }

    pub fn layers(&self) -> &[NetLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NetLayer<T>] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn in_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    /// Runs the network on `batch` samples laid out as `[N, C, H, W]`.
    pub fn forward(&self, input: &[T], batch: usize, mode: Mode) -> ForwardCache<T> {
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x: &[T] = if i == 0 { input } else { &outputs[i - 1] };
            let shape = self.in_shape(i);
            let (out, cache) = match layer {
                NetLayer::Conv {
                    weight,
                    bias,
                    shape: ws,
                    stride,
                    padding,
                } => {
                    let g = geometry(batch, shape, ws, *stride, *padding);
                    (
                        kernels::conv2d_forward(&g, x, weight, bias),
                        LayerCache::None,
                    )
                }
                NetLayer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => batchnorm_forward(
                    x,
                    batch,
                    shape,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    *epsilon,
                    mode,
                ),
                NetLayer::Relu => (kernels::relu(x), LayerCache::Relu),
                NetLayer::MaxPool => {
                    let (out, argmax) =
                        kernels::maxpool2x2_forward(batch * shape[0], shape[1], shape[2], x);
                    (out, LayerCache::Pool { argmax })
                }
                NetLayer::Flatten => (x.to_vec(), LayerCache::None),
                NetLayer::Linear {
                    weight,
                    bias,
                    outputs: o,
                    features,
                } => (
                    kernels::linear_forward(batch, *features, *o, x, weight, bias),
                    LayerCache::None,
                ),
                NetLayer::Add { source } => {
                    let skip = &outputs[*source];
                    (
                        x.iter().zip(skip).map(|(&a, &b)| a + b).collect(),
                        LayerCache::None,
                    )
                }
            };
            outputs.push(out);
            caches.push(cache);
        }
        ForwardCache {
            batch,
            input: input.to_vec(),
            outputs,
            caches,
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub fn loss(&self, logits: &[T], labels: &[usize], loss: Loss) -> (T, Vec<T>) {
        let k = self.num_classes;
        let n = T::from(labels.len()).expect("batch size");
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(logits.len());
        match loss {
            Loss::CrossEntropy => {
                let probs = kernels::softmax_rows(k, logits);
                for ((row, prow), &label) in logits
                    .chunks_exact(k)
                    .zip(probs.chunks_exact(k))
                    .zip(labels)
                {
                    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
                    total = total + (lse - row[label]);
                    for (c, &p) in prow.iter().enumerate() {
                        let target = if c == label { T::one() } else { T::zero() };
                        grad.push((p - target) / n);
                    }
                }
            }
            Loss::SquaredError => {
                let half = T::from(0.5).expect("0.5");
                for (row, &label) in logits.chunks_exact(k).zip(labels) {
                    for (c, &z) in row.iter().enumerate() {
                        let target = if c == label { T::one() } else { T::zero() };
                        let d = z - target;
                        total = total + half * d * d;
                        grad.push(d / n);
                    }
                }
            }
        }
        (total / n, grad)
    }

    /// Parameter gradients given the gradient of the loss at the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: Vec<T>) -> Grads<T> {
        let batch = cache.batch;
        let count = self.layers.len();
        let mut out_grads: Vec<Option<Vec<T>>> = vec![None; count];
        let mut grads: Grads<T> = self
            .layers
            .iter()
            .map(|l| l.params().iter().map(|_| Vec::new()).collect())
            .collect();
        if count == 0 {
            return grads;
        }
        out_grads[count - 1] = Some(grad_logits);
        for i in (0..count).rev() {
            let Some(g) = out_grads[i].take() else {
                continue;
            };
            let x: &[T] = if i == 0 {
                &cache.input
            } else {
                &cache.outputs[i - 1]
            };
            let shape = self.in_shape(i);
            let grad_in: Option<Vec<T>> = match &self.layers[i] {
                NetLayer::Conv {
                    weight,
                    shape: ws,
                    stride,
                    padding,
                    ..
                } => {
                    let geo = geometry(batch, shape, ws, *stride, *padding);
                    let (gw, gb) = kernels::conv2d_backward_params(&geo, x, &g);
                    grads[i] = vec![gw, gb];
                    (i > 0).then(|| kernels::conv2d_backward_input(&geo, weight, &g))
                }
                NetLayer::BatchNorm { gamma, .. } => {
                    let LayerCache::BatchNorm {
                        normalized,
                        inv_std,
                        ..
                    } = &cache.caches[i]
                    else {
                        unreachable!("batchnorm cache")
                    };
                    let (gx, gg, gbeta) =
                        batchnorm_backward(&g, batch, shape, gamma, normalized, inv_std);
                    grads[i] = vec![gg, gbeta];
                    Some(gx)
                }
                NetLayer::Relu => Some(kernels::relu_backward(&cache.outputs[i], &g)),
                NetLayer::MaxPool => {
                    let LayerCache::Pool { argmax } = &cache.caches[i] else {
                        unreachable!("pool cache")
                    };
                    Some(kernels::maxpool2x2_backward(x.len(), argmax, &g))
                }
                NetLayer::Flatten => Some(g),
                NetLayer::Linear {
                    weight,
                    outputs,
                    features,
                    ..
                } => {
                    let (gx, gw, gb) =
                        kernels::linear_backward(batch, *features, *outputs, x, weight, &g);
                    grads[i] = vec![gw, gb];
                    Some(gx)
                }
                NetLayer::Add { source } => {
                    accumulate(&mut out_grads[*source], &g);
                    Some(g)
                }
            };
            if let (Some(gx), true) = (grad_in, i > 0) {
                accumulate(&mut out_grads[i - 1], &gx);
            }
        }
        grads
    }

    /// Moves batchnorm running statistics toward the batch statistics
    /// recorded in `cache`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let m = T::from(BN_MOMENTUM).expect("momentum");
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let (
                NetLayer::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                LayerCache::BatchNorm { mean, var, .. },
            ) = (layer, &cache.caches[i])
            {
                let shape = if i == 0 {
                    &self.input_shape[..]
                } else {
                    &self.shapes[i - 1][..]
                };
                let count = T::from(cache.batch * shape[1] * shape[2]).expect("count");
                let unbias = if count > T::one() {
                    count / (count - T::one())
                } else {
                    T::one()
                };
                for c in 0..running_mean.len() {
                    running_mean[c] = (T::one() - m) * running_mean[c] + m * mean[c];
                    running_var[c] = (T::one() - m) * running_var[c] + m * var[c] * unbias;
                }
            }
        }
    }
}

fn accumulate<T: Float>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

fn geometry(
    batch: usize,
    in_shape: &[usize],
    ws: &[usize; 4],
    stride: usize,
    padding: usize,
) -> ConvGeometry {
    ConvGeometry {
        batch,
        in_channels: in_shape[0],
        height: in_shape[1],
        width: in_shape[2],
        out_channels: ws[0],
        kernel_h: ws[2],
        kernel_w: ws[3],
        stride,
        padding,
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_forward<T: Float>(
    x: &[T],
    batch: usize,
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
    mode: Mode,
) -> (Vec<T>, LayerCache<T>) {
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let count = T::from(batch * plane).expect("count");
    let (mean, var) = match mode {
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (i, chunk) in x.chunks_exact(plane).enumerate() {
                let ch = i % c;
                mean[ch] = chunk.iter().fold(mean[ch], |s, &v| s + v);
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            for (i, chunk) in x.chunks_exact(plane).enumerate() {
                let ch = i % c;
                let mu = mean[ch];
                var[ch] = chunk.iter().fold(var[ch], |s, &v| s + (v - mu) * (v - mu));
            }
            var.iter_mut().for_each(|v| *v = *v / count);
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + epsilon).sqrt())
        .collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let ch = i % c;
        for &v in chunk {
            let xh = (v - mean[ch]) * inv_std[ch];
            normalized.push(xh);
            out.push(gamma[ch] * xh + beta[ch]);
        }
    }
    (
        out,
        LayerCache::BatchNorm {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)` for training-mode batchnorm.
fn batchnorm_backward<T: Float>(
    g: &[T],
    batch: usize,
    shape: &[usize],
    gamma: &[T],
    normalized: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let count = T::from(batch * plane).expect("count");
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for (i, (gc, xc)) in g
        .chunks_exact(plane)
        .zip(normalized.chunks_exact(plane))
        .enumerate()
    {
        let ch = i % c;
        for (&gv, &xv) in gc.iter().zip(xc) {
            g_gamma[ch] = g_gamma[ch] + gv * xv;
            g_beta[ch] = g_beta[ch] + gv;
        }
    }
    let mut gx = Vec::with_capacity(g.len());
    for (i, (gc, xc)) in g
        .chunks_exact(plane)
        .zip(normalized.chunks_exact(plane))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma[ch] * inv_std[ch] / count;
        for (&gv, &xv) in gc.iter().zip(xc) {
            gx.push(k * (count * gv - g_beta[ch] - xv * g_gamma[ch]));
        }
    }
    (gx, g_gamma, g_beta)
}

/// `f32` view of an input tensor as the net's float type.
pub fn input_of<T: Float>(t: &Tensor) -> Vec<T> {
    vec_of(t)
}
