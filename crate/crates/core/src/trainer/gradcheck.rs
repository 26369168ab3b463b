use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{Grads, Loss, Mode, Net};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Lower bound on the number of parameters compared.
    pub samples: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Batchnorm uses batch statistics when `Train`.
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            samples: 200,
            seed: 0,
            loss: Loss::CrossEntropy,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub slot: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<ParamRef>,
    /// Parameters whose step had to shrink to keep both probes in the
    /// activation region of the unperturbed point.
    pub reduced_steps: usize,
    /// Parameters compared across a kink even at the smallest step.
    pub kinked: usize,
}

/// Steps tried per parameter: `epsilon`, `epsilon / 10`, ... down to this.
pub const MIN_EPSILON: f64 = 1e-7;

/// Denominator floor, so that exactly-zero gradients (a conv bias in front of
/// training-mode batchnorm) are compared against round-off absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

/// Largest relative disagreement `|a - n| / max(|a|, |n|, ABS_FLOOR)` between
/// backprop and central differences, in `f64`.
pub fn grad_check(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> GradCheck {
    grad_check_with(model, batch, labels, cfg, |_| {})
}

/// As [`grad_check`], with `tamper` applied to the analytic gradients first.
pub fn grad_check_with(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    cfg: &GradCheckConfig,
    tamper: impl FnOnce(&mut Grads<f64>),
) -> GradCheck {
    let n = batch.shape()[0];
    let input: Vec<f64> = super::net::input_of(batch);
    let mut net: Net<f64> = Net::from_model(model);
    let cache = net.forward(&input, n, cfg.mode);
    let pattern = cache.activation_pattern();
    let (_, g) = net.loss(cache.logits(), labels, cfg.loss);
    let mut grads = net.backward(&cache, g);
    tamper(&mut grads);

    let tensors: Vec<(usize, usize, usize)> = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            layer
                .params()
                .into_iter()
                .enumerate()
                .map(move |(s, p)| (l, s, p.len()))
        })
        .filter(|&(_, _, len)| len > 0)
        .collect();
    // Small tensors (biases, BN affine) are taken whole and their unused
    // share is spread over the larger ones, so the total reaches `samples`
    // whenever the model has that many parameters.
    let mut quota = vec![0usize; tensors.len()];
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by_key(|&t| tensors[t].2);
    let mut remaining = cfg.samples;
    for (k, &t) in order.iter().enumerate() {
        let share = remaining.div_ceil(tensors.len() - k);
        quota[t] = share.min(tensors[t].2);
        remaining -= quota[t].min(remaining);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks = Vec::new();
    for (&(layer, slot, len), &take) in tensors.iter().zip(&quota) {
        if take == len {
            picks.extend((0..len).map(|index| ParamRef { layer, slot, index }));
        } else {
            let mut chosen = rand::seq::index::sample(&mut rng, len, take).into_vec();
            chosen.sort_unstable();
            picks.extend(
                chosen
                    .into_iter()
                    .map(|index| ParamRef { layer, slot, index }),
            );
        }
    }

    // Loss at the probe and whether it shares the unperturbed ReLU/pool
    // pattern; a central difference straddling a kink measures neither side.
    let probe = |net: &Net<f64>| {
        let c = net.forward(&input, n, cfg.mode);
        (
            net.loss(c.logits(), labels, cfg.loss).0,
            c.activation_pattern() == pattern,
        )
    };
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        reduced_steps: 0,
        kinked: 0,
    };
    for p in picks {
        let original = net.layers()[p.layer].params()[p.slot][p.index];
        let mut eps = cfg.epsilon;
        let numeric = loop {
            set(&mut net, p, original + eps);
            let (up, up_smooth) = probe(&net);
            set(&mut net, p, original - eps);
            let (down, down_smooth) = probe(&net);
            set(&mut net, p, original);
            let numeric = (up - down) / (2.0 * eps);
            if up_smooth && down_smooth {
                break numeric;
            }
            if eps / 10.0 < MIN_EPSILON {
                result.kinked += 1;
                break numeric;
            }
            eps /= 10.0;
        };
        if eps < cfg.epsilon {
            result.reduced_steps += 1;
        }
        let analytic = grads[p.layer][p.slot][p.index];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        result.checked += 1;
        if err > result.max_rel_error || err.is_nan() {
            result.max_rel_error = err;
            result.worst = Some(p);
        }
    }
    result
}

fn set(net: &mut Net<f64>, p: ParamRef, v: f64) {
    net.layers_mut()[p.layer].params_mut()[p.slot][p.index] = v;
}
