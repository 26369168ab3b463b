//! Built-in architectures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, Model, DEFAULT_BN_EPSILON};
use crate::tensor::Tensor;

pub const CIFAR_INPUT: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Conv3x3(3→16)-BN-ReLU-Pool, Conv3x3(16→32)-BN-ReLU-Pool,
    /// Linear(2048→128)-ReLU, Linear(128→K).
    ToyNet,
    /// ToyNet with an extra Conv3x3(32→32)-BN-ReLU block whose output is
    /// added back onto the second pooled feature map.
    ToyNetSkip,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::ToyNet => "toynet",
            Architecture::ToyNetSkip => "toynetskip",
        }
    }

    /// Builds the architecture for 3x32x32 inputs with Kaiming-uniform
    /// fan-in initialization, zero biases and identity batchnorm.
    pub fn build(self, num_classes: usize, rng: &mut impl Rng) -> Model {
        let mut layers = vec![
            conv(3, 16, rng),
            batchnorm(16),
            Layer::Relu,
            Layer::MaxPool2d,
            conv(16, 32, rng),
            batchnorm(32),
            Layer::Relu,
            Layer::MaxPool2d,
        ];
        if self == Architecture::ToyNetSkip {
            let source = layers.len() - 1;
            layers.extend([
                conv(32, 32, rng),
                batchnorm(32),
                Layer::Relu,
                Layer::Add { source },
            ]);
        }
        layers.extend([
            Layer::Flatten,
            linear(32 * 8 * 8, 128, rng),
            Layer::Relu,
            linear(128, num_classes, rng),
        ]);
        Model::new(self.name(), CIFAR_INPUT, num_classes, layers)
            .expect("built-in architecture is well formed")
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn conv(cin: usize, cout: usize, rng: &mut impl Rng) -> Layer {
    Layer::Conv2d {
        weight: kaiming_uniform(vec![cout, cin, 3, 3], cin * 9, rng),
        bias: Tensor::zeros(vec![cout]),
        stride: 1,
        padding: 1,
    }
}

fn batchnorm(c: usize) -> Layer {
    Layer::BatchNorm2d {
        gamma: Tensor::full(vec![c], 1.0),
        beta: Tensor::zeros(vec![c]),
        running_mean: Tensor::zeros(vec![c]),
        running_var: Tensor::full(vec![c], 1.0),
        epsilon: DEFAULT_BN_EPSILON,
    }
}

fn linear(fin: usize, fout: usize, rng: &mut impl Rng) -> Layer {
    Layer::Linear {
        weight: kaiming_uniform(vec![fout, fin], fin, rng),
        bias: Tensor::zeros(vec![fout]),
    }
}
