//! SGD training of the ToyNet family and finite-difference gradient checks.

mod gradcheck;
mod net;

pub use gradcheck::{
    grad_check, grad_check_with, GradCheck, GradCheckConfig, ParamRef,
    ABS_FLOOR as GRAD_CHECK_FLOOR,
};
pub use net::{ForwardCache, Grads, Loss, Mode, Net, NetLayer, BN_MOMENTUM};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Split};
use crate::model::{Architecture, Model};
use crate::tensor::kernels;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("dataset images {data:?} do not match model input {model:?}")]
    InputShape { data: [usize; 3], model: [usize; 3] },
    #[error("dataset has {data} classes but model has {model}")]
    Classes { data: usize, model: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate at each milestone.
    pub lr_decay: f64,
    /// Zero-based epochs at which the decay takes effect.
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Leading training images used.
    pub train_samples: usize,
    /// Leading test images evaluated after each epoch.
    pub test_samples: usize,
    /// Random horizontal flip and 4-pixel pad-crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 0.05,
            lr_decay: 0.1,
            lr_milestones: vec![20, 25],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            train_samples: 10_000,
            test_samples: 10_000,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0
            || self.batch_size == 0
            || self.train_samples == 0
            || self.test_samples == 0
        {
            return fail("epochs, batch_size, train_samples and test_samples must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("lr must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]");
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_milestones must be strictly increasing");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be finite and non-negative");
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Builds `arch` from the seeded generator and trains it.
pub fn train_arch(
    arch: Architecture,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = arch.build(train.num_classes, &mut rng);
    fit(model, train, test, cfg, rng)
}

/// Trains `initial` in place of a freshly built architecture.
pub fn train(
    initial: Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Trained> {
    fit(
        initial,
        train,
        test,
        cfg,
        ChaCha8Rng::seed_from_u64(cfg.seed),
    )
}

fn fit(
    initial: Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<Trained> {
    cfg.validate()?;
    let train = train.subset(0, cfg.train_samples, Split::Train);
    let test = test.subset(0, cfg.test_samples, Split::Test);
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if test.is_empty() {
        return Err(TrainError::EmptyDataset("test"));
    }
    for data in [&train, &test] {
        if data.image_shape() != initial.input_shape() {
            return Err(TrainError::InputShape {
                data: data.image_shape(),
                model: initial.input_shape(),
            });
        }
        if data.num_classes > initial.num_classes() {
            return Err(TrainError::Classes {
                data: data.num_classes,
                model: initial.num_classes(),
            });
        }
    }

    let mut net: Net<f32> = Net::from_model(&initial);
    let mut velocity: Grads<f32> = net
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let sample_len = net.input_len();
    let shape = train.image_shape();
    let images = train.images.data();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut input = Vec::with_capacity(chunk.len() * sample_len);
            for &i in chunk {
                let img = &images[i * sample_len..(i + 1) * sample_len];
                if cfg.augment {
                    augment_into(img, shape, &mut rng, &mut input);
                } else {
                    input.extend_from_slice(img);
                }
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let cache = net.forward(&input, chunk.len(), Mode::Train);
            let (loss, grad) = net.loss(cache.logits(), &labels, Loss::CrossEntropy);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch: epoch + 1 });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += cache
                .logits()
                .chunks_exact(net.num_classes())
                .zip(&labels)
                .filter(|(row, &y)| kernels::argmax(row) == y)
                .count();
            let grads = net.backward(&cache, grad);
            sgd_step(
                &mut net,
                &mut velocity,
                &grads,
                lr,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
            );
            net.update_running_stats(&cache);
        }
        let test_acc = accuracy(&net, &test, cfg.batch_size);
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
        });
    }
    Ok(Trained {
        model: net.to_model(),
        log,
    })
}

/// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
fn sgd_step(
    net: &mut Net<f32>,
    velocity: &mut Grads<f32>,
    grads: &Grads<f32>,
    lr: f32,
    momentum: f32,
    wd: f32,
) {
    for ((layer, vel), grad) in net
        .layers_mut()
        .iter_mut()
        .zip(velocity.iter_mut())
        .zip(grads)
    {
        for ((p, v), g) in layer.params_mut().into_iter().zip(vel.iter_mut()).zip(grad) {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Evaluation-mode accuracy of `net` on `data`.
pub fn accuracy(net: &Net<f32>, data: &Dataset, batch_size: usize) -> f64 {
    let mut correct = 0;
    for (x, labels) in data.batches(batch_size) {
        let cache = net.forward(x.data(), labels.len(), Mode::Eval);
        correct += cache
            .logits()
            .chunks_exact(net.num_classes())
            .zip(labels)
            .filter(|(row, &y)| kernels::argmax(row) == y)
            .count();
    }
    correct as f64 / data.len().max(1) as f64
}

pub const PAD: usize = 4;

/// Appends a randomly flipped, zero-padded and re-cropped copy of `img`.
fn augment_into(img: &[f32], shape: [usize; 3], rng: &mut impl Rng, out: &mut Vec<f32>) {
    let [c, h, w] = shape;
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
    let dx = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = y as isize + dy;
            for x in 0..w {
                let sx = x as isize + dx;
                let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0.0
                } else {
                    let sx = if flip {
                        w - 1 - sx as usize
                    } else {
                        sx as usize
                    };
                    plane[sy as usize * w + sx]
                };
                out.push(v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Normalization;
    use crate::model::Layer;
    use crate::tensor::Tensor;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.5).unwrap();
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            data.push(c + noise.sample(&mut rng));
            data.push(-c + noise.sample(&mut rng));
            labels.push(y);
        }
        let images = Tensor::new(vec![n, 2, 1, 1], data).unwrap();
        Dataset::new(
            "blobs",
            Split::Train,
            images,
            labels,
            2,
            Normalization::default(),
        )
        .unwrap()
    }

    fn two_layer(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Layer::Flatten,
            Layer::Linear {
                weight: crate::model::kaiming_uniform(vec![16, 2], 2, &mut rng),
                bias: Tensor::zeros(vec![16]),
            },
            Layer::Relu,
            Layer::Linear {
                weight: crate::model::kaiming_uniform(vec![2, 16], 16, &mut rng),
                bias: Tensor::zeros(vec![2]),
            },
        ];
        Model::new("two-layer", [2, 1, 1], 2, layers).unwrap()
    }

    fn plain(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr,
            lr_milestones: vec![],
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let data = blobs(64, 1);
        let model = two_layer(2);
        let out = train(model.clone(), &data, &data, &plain(3, 0.0)).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn memorizes_single_sample() {
        let data = blobs(1, 3);
        let out = train(two_layer(4), &data, &data, &plain(200, 0.05)).unwrap();
        assert_eq!(out.log.last().unwrap().train_acc, 1.0);
    }

    #[test]
    fn separable_blobs_generalize() {
        let (tr, te) = (blobs(400, 5), blobs(400, 6));
        let out = train(two_layer(7), &tr, &te, &plain(20, 0.05)).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.test_acc > 0.95, "{last:?}");
        assert!(last.train_loss < out.log[0].train_loss);
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = blobs(64, 8);
        let err = train(two_layer(9), &data, &data, &plain(50, 1e30)).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(64, 10);
        let cfg = plain(3, 0.05);
        let a = train(two_layer(11), &data, &data, &cfg).unwrap();
        let b = train(two_layer(11), &data, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn schedule_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert!((cfg.lr_at(20) - 0.005).abs() < 1e-12);
        assert!((cfg.lr_at(29) - 0.0005).abs() < 1e-12);
        assert!(TrainConfig {
            epochs: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..cfg
        }
        .validate()
        .is_err());
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn augmentation_keeps_content() {
        let img: Vec<f32> = (0..3 * 8 * 8).map(|v| v as f32 + 1.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let mut out = Vec::new();
            augment_into(&img, [3, 8, 8], &mut rng, &mut out);
            assert_eq!(out.len(), img.len());
            assert!(out.iter().all(|&v| v == 0.0 || img.contains(&v)));
        }
    }
}
