//! Layer graphs, the inference forward pass and batchnorm folding.

pub mod arch;
pub mod bundle;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

pub use arch::{kaiming_uniform, Architecture, CIFAR_INPUT};
pub use bundle::{load_bundle, save_bundle, BundleError};

pub const DEFAULT_BN_EPSILON: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("layer {layer}: {source}")]
    Tensor {
        layer: usize,
        #[source]
        source: TensorError,
    },
    #[error("layer {layer} ({kind}): {reason}")]
    InvalidLayer {
        layer: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("input batch shape {got:?} does not match model input [N, {expected:?}]")]
    InputShape {
        expected: [usize; 3],
        got: Vec<usize>,
    },
    #[error("model output shape {got:?} is not a {num_classes}-class logit vector")]
    OutputShape { num_classes: usize, got: Vec<usize> },
    #[error("layer {layer}: non-finite activation")]
    NonFinite { layer: usize },
    #[error("batchnorm at layer {layer} is not directly preceded by a convolution")]
    UnfoldableBatchNorm { layer: usize },
    #[error("{0}")]
    Hook(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f32,
    },
    Relu,
    MaxPool2d,
    Flatten,
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    /// Adds the output of an earlier layer to the running activation.
    Add {
        source: usize,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm2d { .. } => "batchnorm2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Linear { .. } => "linear",
            Layer::Add { .. } => "add",
        }
    }

    /// Conv and linear layers carry weights that get quantized.
    pub fn has_weights(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Linear { .. })
    }

    pub fn weights(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                vec![weight, bias]
            }
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            _ => Vec::new(),
        }
    }
}

/// Where an activation can be observed during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Input,
    Layer(usize),
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::Input => write!(f, "input"),
            Site::Layer(i) => write!(f, "layer{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    id: String,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
    /// Layer indices whose outputs feed an `Add`.
    skip_sources: BTreeSet<usize>,
}

impl Model {
    pub fn new(
        id: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        let last = shapes
            .last()
            .cloned()
            .unwrap_or_else(|| input_shape.to_vec());
        if last != [num_classes] || num_classes == 0 {
            return Err(ModelError::OutputShape {
                num_classes,
                got: last,
            });
        }
        let skip_sources = layers
            .iter()
            .filter_map(|l| match l {
                Layer::Add { source } => Some(*source),
                _ => None,
            })
            .collect();
        Ok(Self {
            id: id.into(),
            input_shape,
            num_classes,
            layers,
            skip_sources,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        infer_shapes(&self.layers, self.input_shape).expect("validated at construction")
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }

    /// Rebuilds the model with weight tensors replaced by `f(layer, weight)`.
    /// Shapes must be preserved.
    pub fn map_weights(&self, mut f: impl FnMut(usize, &Tensor) -> Tensor) -> Result<Self> {
        let mut layers = self.layers.clone();
        for (i, layer) in layers.iter_mut().enumerate() {
            if let Some((w, _)) = layer.weights_mut() {
                let replaced = f(i, w);
                if replaced.shape() != w.shape() {
                    return Err(ModelError::InvalidLayer {
                        layer: i,
                        kind: "weights",
                        reason: format!(
                            "replacement shape {:?} != {:?}",
                            replaced.shape(),
                            w.shape()
                        ),
                    });
                }
                *w = replaced;
            }
        }
        Model::new(self.id.clone(), self.input_shape, self.num_classes, layers)
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_observed(batch, |_, _| Ok(()))
    }

    /// Forward pass that hands every activation to `observe` before it is
    /// consumed downstream: first the input batch, then each layer's output.
    /// The hook may rewrite the activation in place.
    pub fn forward_observed<F>(&self, batch: &Tensor, mut observe: F) -> Result<Tensor>
    where
        F: FnMut(Site, &mut Tensor) -> Result<()>,
    {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(ModelError::InputShape {
                expected: self.input_shape,
                got: shape.to_vec(),
            });
        }
        let mut x = batch.clone();
        observe(Site::Input, &mut x)?;
        let mut saved: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |source| ModelError::Tensor { layer: i, source };
            let mut out = match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => tensor::conv2d(&x, weight, bias, *stride, *padding).map_err(wrap)?,
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => batchnorm_inference(&x, gamma, beta, running_mean, running_var, *epsilon),
                Layer::Relu => tensor::relu(&x),
                Layer::MaxPool2d => tensor::maxpool2d(&x).map_err(wrap)?,
                Layer::Flatten => tensor::flatten(&x).map_err(wrap)?,
                Layer::Linear { weight, bias } => tensor::linear(&x, weight, bias).map_err(wrap)?,
                Layer::Add { source } => {
                    let skip = saved[*source].as_ref().expect("skip source saved");
                    tensor::add(&x, skip).map_err(wrap)?
                }
            };
            if !out.is_finite() {
                return Err(ModelError::NonFinite { layer: i });
            }
            observe(Site::Layer(i), &mut out)?;
            if self.skip_sources.contains(&i) {
                saved[i] = Some(out.clone());
            }
            x = out;
        }
        Ok(x)
    }

    /// Folds every `BatchNorm2d` into the convolution right before it.
    pub fn fold_batchnorm(&self) -> Result<Model> {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        // old index -> new index of the layer producing the same activation
        let mut remap = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => {
                    // A skip edge reading the raw conv output cannot survive folding.
                    let conv_is_skip_source = i > 0 && self.skip_sources.contains(&(i - 1));
                    match layers.last_mut() {
                        Some(Layer::Conv2d { weight, bias, .. }) if !conv_is_skip_source => {
                            fold_into_conv(
                                weight,
                                bias,
                                gamma,
                                beta,
                                running_mean,
                                running_var,
                                *epsilon,
                            );
                        }
                        _ => return Err(ModelError::UnfoldableBatchNorm { layer: i }),
                    }
                    remap.push(layers.len() - 1);
                }
                Layer::Add { source } => {
                    layers.push(Layer::Add {
                        source: remap[*source],
                    });
                    remap.push(layers.len() - 1);
                }
                other => {
                    layers.push(other.clone());
                    remap.push(layers.len() - 1);
                }
            }
        }
        Model::new(self.id.clone(), self.input_shape, self.num_classes, layers)
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm2d { .. }))
    }
}

fn fold_into_conv(
    weight: &mut Tensor,
    bias: &mut Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f32,
) {
    let out_channels = weight.shape()[0];
    let per_channel = weight.len() / out_channels.max(1);
    for o in 0..out_channels {
        let factor = gamma.data()[o] / (var.data()[o] + epsilon).sqrt();
        for w in &mut weight.data_mut()[o * per_channel..(o + 1) * per_channel] {
            *w *= factor;
        }
        let b = &mut bias.data_mut()[o];
        *b = (*b - mean.data()[o]) * factor + beta.data()[o];
    }
}

fn batchnorm_inference(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f32,
) -> Tensor {
    let shape = x.shape();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let ch = i % c;
        let inv = 1.0 / (var.data()[ch] + epsilon).sqrt();
        let (g, b, m) = (gamma.data()[ch], beta.data()[ch], mean.data()[ch]);
        for v in chunk {
            *v = (*v - m) * inv * g + b;
        }
    }
    out
}

/// Validates that layers compose and returns each layer's per-sample output
/// shape.
pub fn infer_shapes(layers: &[Layer], input_shape: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let bad = |reason: String| ModelError::InvalidLayer {
            layer: i,
            kind: layer.kind(),
            reason,
        };
        cur = match layer {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let ws = weight.shape();
                if cur.len() != 3 || ws.len() != 4 || ws[1] != cur[0] {
                    return Err(bad(format!(
                        "input {cur:?} incompatible with kernel {ws:?}"
                    )));
                }
                if bias.shape() != [ws[0]] {
                    return Err(bad(format!(
                        "bias shape {:?} for {} output channels",
                        bias.shape(),
                        ws[0]
                    )));
                }
                if *stride == 0 {
                    return Err(bad("stride must be at least 1".into()));
                }
                if cur[1] + 2 * padding < ws[2] || cur[2] + 2 * padding < ws[3] {
                    return Err(bad(format!(
                        "kernel {ws:?} larger than padded input {cur:?}"
                    )));
                }
                vec![
                    ws[0],
                    (cur[1] + 2 * padding - ws[2]) / stride + 1,
                    (cur[2] + 2 * padding - ws[3]) / stride + 1,
                ]
            }
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            } => {
                if cur.len() != 3 {
                    return Err(bad(format!("expects [C, H, W], got {cur:?}")));
                }
                for t in [gamma, beta, running_mean, running_var] {
                    if t.shape() != [cur[0]] {
                        return Err(bad(format!(
                            "parameter shape {:?} for {} channels",
                            t.shape(),
                            cur[0]
                        )));
                    }
                }
                if epsilon.is_nan() || *epsilon <= 0.0 {
                    return Err(bad(format!("epsilon must be positive, got {epsilon}")));
                }
                if running_var.data().iter().any(|&v| v + epsilon <= 0.0) {
                    return Err(bad("running variance plus epsilon must be positive".into()));
                }
                cur
            }
            Layer::Relu => cur,
            Layer::MaxPool2d => {
                if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                    return Err(bad(format!("cannot pool {cur:?}")));
                }
                vec![cur[0], cur[1] / 2, cur[2] / 2]
            }
            Layer::Flatten => vec![cur.iter().product()],
            Layer::Linear { weight, bias } => {
                let ws = weight.shape();
                if cur.len() != 1 || ws.len() != 2 || ws[1] != cur[0] {
                    return Err(bad(format!(
                        "input {cur:?} incompatible with weight {ws:?}"
                    )));
                }
                if bias.shape() != [ws[0]] {
                    return Err(bad(format!(
                        "bias shape {:?} for {} outputs",
                        bias.shape(),
                        ws[0]
                    )));
                }
                vec![ws[0]]
            }
            Layer::Add { source } => {
                if *source >= i {
                    return Err(bad(format!("source {source} is not an earlier layer")));
                }
                if shapes[*source] != cur {
                    return Err(bad(format!("skip shape {:?} != {cur:?}", shapes[*source])));
                }
                cur
            }
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flatten_identity(n: usize) -> Model {
        let eye = Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        Model::new(
            "id",
            [n, 1, 1],
            n,
            vec![
                Layer::Flatten,
                Layer::Linear {
                    weight: eye,
                    bias: Tensor::zeros(vec![n]),
                },
            ],
        )
        .unwrap()
    }

    fn conv_bn(gamma: Vec<f32>, beta: Vec<f32>, mean: Vec<f32>, var: Vec<f32>) -> Model {
        let weight = Tensor::from_fn(vec![2, 1, 1, 1], |i| 1.5 - i as f32);
        let bias = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        Model::new(
            "cbn",
            [1, 2, 2],
            8,
            vec![
                Layer::Conv2d {
                    weight,
                    bias,
                    stride: 1,
                    padding: 0,
                },
                Layer::BatchNorm2d {
                    gamma: Tensor::new(vec![2], gamma).unwrap(),
                    beta: Tensor::new(vec![2], beta).unwrap(),
                    running_mean: Tensor::new(vec![2], mean).unwrap(),
                    running_var: Tensor::new(vec![2], var).unwrap(),
                    epsilon: DEFAULT_BN_EPSILON,
                },
                Layer::Flatten,
            ],
        )
        .unwrap()
    }

    #[test]
    fn flatten_linear_identity_returns_input() {
        let m = flatten_identity(4);
        let x = Tensor::new(
            vec![2, 4, 1, 1],
            vec![1.0, -2.0, 3.5, 0.0, 9.0, 8.0, -7.0, 6.0],
        )
        .unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = flatten_identity(4);
        let err = m.forward(&Tensor::zeros(vec![1, 3, 1, 1])).unwrap_err();
        assert!(matches!(err, ModelError::InputShape { .. }));
    }

    #[test]
    fn forward_reports_nonfinite_layer() {
        let mut w = Tensor::zeros(vec![2, 2]);
        w.data_mut()[0] = f32::MAX;
        let m = Model::new(
            "big",
            [2, 1, 1],
            2,
            vec![
                Layer::Flatten,
                Layer::Linear {
                    weight: w,
                    bias: Tensor::zeros(vec![2]),
                },
            ],
        )
        .unwrap();
        let x = Tensor::full(vec![1, 2, 1, 1], 10.0);
        assert_eq!(
            m.forward(&x).unwrap_err(),
            ModelError::NonFinite { layer: 1 }
        );
    }

    #[test]
    fn fold_identity_normalization_keeps_conv() {
        let var = vec![0.5f32, 2.0];
        let gamma: Vec<f32> = var
            .iter()
            .map(|v| (v + DEFAULT_BN_EPSILON).sqrt())
            .collect();
        let m = conv_bn(gamma, vec![0.0; 2], vec![0.0; 2], var);
        let folded = m.fold_batchnorm().unwrap();
        assert_eq!(folded.layers().len(), 2);
        assert_eq!(folded.layers()[0], m.layers()[0]);
    }

    #[test]
    fn fold_zero_gamma_gives_beta_bias() {
        let m = conv_bn(
            vec![0.0; 2],
            vec![3.0, -4.0],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
        );
        let folded = m.fold_batchnorm().unwrap();
        let (w, b) = folded.layers()[0].weights().unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.data(), &[3.0, -4.0]);
    }

    #[test]
    fn fold_rejects_orphan_batchnorm() {
        let c = 2;
        let bn = Layer::BatchNorm2d {
            gamma: Tensor::full(vec![c], 1.0),
            beta: Tensor::zeros(vec![c]),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::full(vec![c], 1.0),
            epsilon: DEFAULT_BN_EPSILON,
        };
        let m = Model::new(
            "orphan",
            [c, 1, 1],
            c,
            vec![Layer::Relu, bn, Layer::Flatten],
        )
        .unwrap();
        assert_eq!(
            m.fold_batchnorm().unwrap_err(),
            ModelError::UnfoldableBatchNorm { layer: 1 }
        );
    }

    #[test]
    fn fold_remaps_skip_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Architecture::ToyNetSkip.build(10, &mut rng);
        let folded = m.fold_batchnorm().unwrap();
        assert!(!folded.has_batchnorm());
        let add_sources: Vec<usize> = folded
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Add { source } => Some(*source),
                _ => None,
            })
            .collect();
        assert_eq!(add_sources.len(), 1);
        assert!(matches!(folded.layers()[add_sources[0]], Layer::MaxPool2d));
    }

    #[test]
    fn add_must_reference_earlier_layer() {
        let err = Model::new(
            "bad",
            [1, 1, 1],
            1,
            vec![Layer::Add { source: 0 }, Layer::Flatten],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::InvalidLayer { layer: 0, .. }));
    }

    #[test]
    fn output_must_be_logits() {
        let err = Model::new("bad", [2, 2, 2], 3, vec![Layer::Flatten]).unwrap_err();
        assert!(matches!(err, ModelError::OutputShape { .. }));
    }

    #[test]
    fn observer_sees_input_then_every_layer() {
        let m = flatten_identity(3);
        let mut seen = Vec::new();
        m.forward_observed(&Tensor::zeros(vec![1, 3, 1, 1]), |site, _| {
            seen.push(site);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![Site::Input, Site::Layer(0), Site::Layer(1)]);
    }
}
