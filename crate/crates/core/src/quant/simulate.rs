//! Calibration of activation grids and simulated quantized inference.

use std::collections::BTreeMap;

use super::observer::{activation_params_histogram, HistogramObserver};
use super::{
    fake_quantize_in_place, fake_quantize_per_channel, weight_params_minmax, QuantError,
    QuantParams, Result,
};
use crate::model::{Layer, Model, Site};
use crate::tensor::Tensor;

/// Activation observer sites of a batchnorm-free model: the input, the output
/// of every conv/linear (taken after the ReLU when one follows) and the
/// output of every add.
pub fn observer_sites(model: &Model) -> Vec<Site> {
    let layers = model.layers();
    let mut sites = vec![Site::Input];
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Conv2d { .. } | Layer::Linear { .. } => {
                let site = if matches!(layers.get(i + 1), Some(Layer::Relu)) {
                    i + 1
                } else {
                    i
                };
                sites.push(Site::Layer(site));
            }
            Layer::Add { .. } => sites.push(Site::Layer(i)),
            _ => {}
        }
    }
    sites
}

/// Observers accumulated over one full-precision calibration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    observers: BTreeMap<Site, HistogramObserver>,
    samples: usize,
}

impl Calibration {
    pub fn observer(&self, site: Site) -> Option<&HistogramObserver> {
        self.observers.get(&site)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.observers.keys().copied()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Freezes one asymmetric grid per site at `bits`.
    pub fn freeze(&self, bits: u32) -> Result<ActivationParams> {
        let sites = self
            .observers
            .iter()
            .map(|(&site, obs)| Ok((site, activation_params_histogram(obs, bits)?)))
            .collect::<Result<_>>()?;
        Ok(ActivationParams { bits, sites })
    }
}

/// Runs `model` in full precision over `batches`, feeding every site's
/// activations into its own histogram observer.
pub fn calibrate<'a>(
    model: &Model,
    batches: impl IntoIterator<Item = &'a Tensor>,
    sites: &[Site],
    bin_count: usize,
) -> Result<Calibration> {
    if model.has_batchnorm() {
        return Err(QuantError::Unfolded);
    }
    let mut observers: BTreeMap<Site, HistogramObserver> = sites
        .iter()
        .map(|&s| (s, HistogramObserver::new(bin_count)))
        .collect();
    let mut samples = 0;
    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        samples += batch.shape()[0];
        let mut failure = None;
        model.forward_observed(batch, |site, t| {
            if let Some(obs) = observers.get_mut(&site) {
                if let Err(e) = obs.observe(t.data()) {
                    failure = Some(e);
                }
            }
            Ok(())
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    if samples == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    Ok(Calibration { observers, samples })
}

/// Frozen activation grids keyed by observer site.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationParams {
    pub bits: u32,
    pub sites: BTreeMap<Site, QuantParams>,
}

/// A folded model with per-channel weight grids and frozen activation grids.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    base: Model,
    simulated: Model,
    weight_params: Vec<Option<Vec<QuantParams>>>,
    activations: ActivationParams,
    w_bits: u32,
}

impl QuantizedModel {
    /// Assembles a quantized model from explicit grids. `weight_params[i]`
    /// must be present exactly for the conv/linear layers.
    pub fn from_parts(
        base: Model,
        weight_params: Vec<Option<Vec<QuantParams>>>,
        activations: ActivationParams,
        w_bits: u32,
    ) -> Result<Self> {
        if base.has_batchnorm() {
            return Err(QuantError::Unfolded);
        }
        for site in observer_sites(&base) {
            if !activations.sites.contains_key(&site) {
                return Err(QuantError::MissingParams(site));
            }
        }
        if weight_params.len() != base.layers().len() {
            return Err(QuantError::WeightParams {
                layer: weight_params.len(),
                expected: base.layers().len(),
                got: weight_params.len(),
            });
        }
        let mut quantized: Vec<Option<Tensor>> = vec![None; base.layers().len()];
        for (i, (layer, params)) in base.layers().iter().zip(&weight_params).enumerate() {
            match (layer.weights(), params) {
                (Some((w, _)), Some(p)) => {
                    if p.len() != w.shape()[0] {
                        return Err(QuantError::WeightParams {
                            layer: i,
                            expected: w.shape()[0],
                            got: p.len(),
                        });
                    }
                    quantized[i] = Some(fake_quantize_per_channel(w, p)?);
                }
                (None, None) => {}
                (Some((w, _)), None) => {
                    return Err(QuantError::WeightParams {
                        layer: i,
                        expected: w.shape()[0],
                        got: 0,
                    })
                }
                (None, Some(p)) => {
                    return Err(QuantError::WeightParams {
                        layer: i,
                        expected: 0,
                        got: p.len(),
                    })
                }
            }
        }
        let simulated =
            base.map_weights(|i, _| quantized[i].take().expect("weights quantized above"))?;
        Ok(Self {
            base,
            simulated,
            weight_params,
            activations,
            w_bits,
        })
    }

    pub fn base(&self) -> &Model {
        &self.base
    }

    /// The base model with fake-quantized weights.
    pub fn simulated(&self) -> &Model {
        &self.simulated
    }

    pub fn weight_params(&self, layer: usize) -> Option<&[QuantParams]> {
        self.weight_params.get(layer).and_then(|p| p.as_deref())
    }

    pub fn activation_params(&self) -> &ActivationParams {
        &self.activations
    }

    pub fn w_bits(&self) -> u32 {
        self.w_bits
    }

    pub fn a_bits(&self) -> u32 {
        self.activations.bits
    }

    /// Forward pass with fake-quantized weights and every observer site's
    /// activation rounded onto its frozen grid. Arithmetic stays `f32`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let sites = &self.activations.sites;
        Ok(self.simulated.forward_observed(batch, |site, t| {
            if let Some(p) = sites.get(&site) {
                fake_quantize_in_place(t, p);
            }
            Ok(())
        })?)
    }
}

/// Quantizes the weights of a folded `model` to `w_bits` (per-channel
/// min/max) and attaches frozen activation grids.
pub fn quantize_model(
    model: &Model,
    w_bits: u32,
    activations: &ActivationParams,
) -> Result<QuantizedModel> {
    if model.has_batchnorm() {
        return Err(QuantError::Unfolded);
    }
    let weight_params = model
        .layers()
        .iter()
        .map(|l| {
            l.weights()
                .map(|(w, _)| weight_params_minmax(w, w_bits))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::from_parts(model.clone(), weight_params, activations.clone(), w_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn folded_toynet(seed: u64) -> Model {
        Architecture::ToyNet
            .build(10, &mut ChaCha8Rng::seed_from_u64(seed))
            .fold_batchnorm()
            .unwrap()
    }

    fn random_batch(n: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(vec![n, 3, 32, 32], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn toynet_sites() {
        let m = folded_toynet(0);
        // folded: conv relu pool conv relu pool flatten linear relu linear
        assert_eq!(
            observer_sites(&m),
            vec![
                Site::Input,
                Site::Layer(1),
                Site::Layer(4),
                Site::Layer(8),
                Site::Layer(9)
            ]
        );
    }

    #[test]
    fn unfolded_model_rejected() {
        let m = Architecture::ToyNet.build(10, &mut ChaCha8Rng::seed_from_u64(0));
        let batch = Tensor::zeros(vec![1, 3, 32, 32]);
        assert_eq!(
            calibrate(&m, [&batch], &[Site::Input], 16).unwrap_err(),
            QuantError::Unfolded
        );
    }

    #[test]
    fn empty_calibration_rejected() {
        let m = folded_toynet(0);
        let none: Vec<Tensor> = Vec::new();
        assert_eq!(
            calibrate(&m, &none, &observer_sites(&m), 16).unwrap_err(),
            QuantError::EmptyCalibration
        );
    }

    #[test]
    fn single_batch_single_site_mass() {
        let m = folded_toynet(1);
        let batch = random_batch(3, &mut ChaCha8Rng::seed_from_u64(2));
        let cal = calibrate(&m, [&batch], &[Site::Layer(4)], 128).unwrap();
        assert_eq!(
            cal.observer(Site::Layer(4)).unwrap().total_mass(),
            3 * 32 * 16 * 16
        );
    }

    #[test]
    fn calibration_is_deterministic() {
        let m = folded_toynet(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches: Vec<Tensor> = (0..3).map(|_| random_batch(2, &mut rng)).collect();
        let sites = observer_sites(&m);
        let a = calibrate(&m, &batches, &sites, 256)
            .unwrap()
            .freeze(8)
            .unwrap();
        let b = calibrate(&m, &batches, &sites, 256)
            .unwrap()
            .freeze(8)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_site_params_rejected() {
        let m = folded_toynet(5);
        let batch = random_batch(2, &mut ChaCha8Rng::seed_from_u64(6));
        let mut act = calibrate(&m, [&batch], &observer_sites(&m), 64)
            .unwrap()
            .freeze(8)
            .unwrap();
        act.sites.remove(&Site::Layer(4));
        assert_eq!(
            quantize_model(&m, 8, &act).unwrap_err(),
            QuantError::MissingParams(Site::Layer(4))
        );
    }

    #[test]
    fn quantized_forward_is_deterministic() {
        let m = folded_toynet(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(4, &mut rng);
        let act = calibrate(&m, [&batch], &observer_sites(&m), 512)
            .unwrap()
            .freeze(8)
            .unwrap();
        let qm = quantize_model(&m, 6, &act).unwrap();
        let a = qm.forward(&batch).unwrap();
        let b = qm.forward(&batch).unwrap();
        assert_eq!(a, b);
        assert_eq!((qm.w_bits(), qm.a_bits()), (6, 8));
        assert!(qm.weight_params(0).is_some() && qm.weight_params(1).is_none());
    }
}
