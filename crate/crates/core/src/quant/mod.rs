//! Uniform quantization grids and fake quantization.
//!
//! Weights use per-channel symmetric signed grids derived from min/max;
//! activations use per-tensor asymmetric unsigned grids whose clip range is
//! picked by a histogram observer. Quantized inference is simulated: values
//! are rounded onto their grid and mapped back to `f32`.

pub mod observer;
pub mod simulate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Site};
use crate::tensor::Tensor;

pub use observer::HistogramObserver;
pub use simulate::{
    calibrate, observer_sites, quantize_model, ActivationParams, Calibration, QuantizedModel,
};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("bit width {0} outside supported range {MIN_BITS}..={MAX_BITS}")]
    InvalidBits(u32),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f32),
    #[error("zero point {zero_point} outside [{q_min}, {q_max}]")]
    InvalidZeroPoint {
        zero_point: i32,
        q_min: i32,
        q_max: i32,
    },
    #[error("per-channel granularity requires the symmetric signed scheme")]
    InvalidSpec,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("observer has not seen any values")]
    EmptyObserver,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("model still contains batchnorm layers; fold them first")]
    Unfolded,
    #[error("no frozen activation parameters for site {0}")]
    MissingParams(Site),
    #[error("weight parameters for layer {layer}: expected {expected} channels, got {got}")]
    WeightParams {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SymmetricSigned,
    AsymmetricUnsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One grid per output channel (axis 0 of the weight).
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u32, scheme: Scheme, granularity: Granularity) -> Result<Self> {
        check_bits(bits)?;
        if granularity == Granularity::PerChannel && scheme != Scheme::SymmetricSigned {
            return Err(QuantError::InvalidSpec);
        }
        Ok(Self {
            bits,
            scheme,
            granularity,
        })
    }

    pub fn weights(bits: u32) -> Result<Self> {
        Self::new(bits, Scheme::SymmetricSigned, Granularity::PerChannel)
    }

    pub fn activations(bits: u32) -> Result<Self> {
        Self::new(bits, Scheme::AsymmetricUnsigned, Granularity::PerTensor)
    }

    /// Integer range `(q_min, q_max)` of the scheme.
    pub fn int_range(&self) -> (i32, i32) {
        int_range(self.scheme, self.bits)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(QuantError::InvalidBits(bits));
    }
    Ok(())
}

fn int_range(scheme: Scheme, bits: u32) -> (i32, i32) {
    match scheme {
        // ±(2^(b-1) - 1) keeps the grid symmetric with z = 0
        Scheme::SymmetricSigned => {
            let m = (1i32 << (bits - 1)) - 1;
            (-m, m)
        }
        Scheme::AsymmetricUnsigned => (0, (1i32 << bits) - 1),
    }
}

/// An affine integer grid `{ scale * (q - zero_point) : q in [q_min, q_max] }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantParams {
    pub fn symmetric(scale: f32, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let (q_min, q_max) = int_range(Scheme::SymmetricSigned, bits);
        Self::checked(scale, 0, q_min, q_max)
    }

    pub fn asymmetric(scale: f32, zero_point: i32, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let (q_min, q_max) = int_range(Scheme::AsymmetricUnsigned, bits);
        Self::checked(scale, zero_point, q_min, q_max)
    }

    fn checked(scale: f32, zero_point: i32, q_min: i32, q_max: i32) -> Result<Self> {
        let p = Self {
            scale,
            zero_point,
            q_min,
            q_max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(QuantError::InvalidScale(self.scale));
        }
        if self.q_min > self.q_max || self.zero_point < self.q_min || self.zero_point > self.q_max {
            return Err(QuantError::InvalidZeroPoint {
                zero_point: self.zero_point,
                q_min: self.q_min,
                q_max: self.q_max,
            });
        }
        Ok(())
    }

    /// Integer code of `x`: round half to even, then clamp.
    pub fn quantize(&self, x: f32) -> i32 {
        let q = (x as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(self.q_min as f64, self.q_max as f64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        (self.scale as f64 * (q as f64 - self.zero_point as f64)) as f32
    }

    pub fn fake(&self, x: f32) -> f32 {
        self.dequantize(self.quantize(x))
    }

    /// Smallest and largest representable values.
    pub fn range(&self) -> (f32, f32) {
        (self.dequantize(self.q_min), self.dequantize(self.q_max))
    }
}

/// Rounds every element of `x` onto the grid of `p`.
pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    p.validate()?;
    Ok(x.map(|v| p.fake(v)))
}

pub(crate) fn fake_quantize_in_place(x: &mut Tensor, p: &QuantParams) {
    for v in x.data_mut() {
        *v = p.fake(*v);
    }
}

/// Fake-quantizes each output channel (axis 0) of `w` with its own grid.
pub fn fake_quantize_per_channel(w: &Tensor, params: &[QuantParams]) -> Result<Tensor> {
    let channels = w.shape().first().copied().unwrap_or(0);
    if params.len() != channels {
        return Err(QuantError::WeightParams {
            layer: 0,
            expected: channels,
            got: params.len(),
        });
    }
    for p in params {
        p.validate()?;
    }
    let mut out = w.clone();
    let per = w.len() / channels.max(1);
    for (chunk, p) in out.data_mut().chunks_exact_mut(per.max(1)).zip(params) {
        for v in chunk {
            *v = p.fake(*v);
        }
    }
    Ok(out)
}

/// Per-output-channel symmetric grids from the channel's absolute maximum.
/// An all-zero channel gets scale 1.
pub fn weight_params_minmax(w: &Tensor, bits: u32) -> Result<Vec<QuantParams>> {
    check_bits(bits)?;
    if !w.is_finite() {
        return Err(QuantError::NonFinite("weights"));
    }
    let channels = w.shape().first().copied().unwrap_or(0);
    let per = w.len() / channels.max(1);
    let (_, q_max) = int_range(Scheme::SymmetricSigned, bits);
    (0..channels)
        .map(|o| {
            let chunk = &w.data()[o * per..(o + 1) * per];
            let lo = chunk.iter().copied().fold(0.0f32, f32::min);
            let hi = chunk.iter().copied().fold(0.0f32, f32::max);
            let max_abs = lo.abs().max(hi.abs());
            let scale = if max_abs == 0.0 {
                1.0
            } else {
                max_abs / q_max as f32
            };
            QuantParams::symmetric(scale, bits)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_ranges() {
        let p = QuantParams::symmetric(0.1, 8).unwrap();
        assert_eq!((p.q_min, p.q_max, p.zero_point), (-127, 127, 0));
        let p = QuantParams::asymmetric(0.1, 3, 4).unwrap();
        assert_eq!((p.q_min, p.q_max), (0, 15));
    }

    #[test]
    fn grid_examples() {
        let p = QuantParams::symmetric(0.1, 8).unwrap();
        assert_eq!(p.fake(0.0), 0.0);
        assert_eq!(p.fake(0.06), 0.1);
        assert_eq!(p.fake(-0.27), (0.1f32 as f64 * -3.0) as f32);
        assert_eq!(p.fake(20.0), (0.1f32 as f64 * 127.0) as f32);
        assert!((p.fake(20.0) - 12.7).abs() < 1e-5);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        assert_eq!(p.quantize(0.5), 0);
        assert_eq!(p.quantize(1.5), 2);
        assert_eq!(p.quantize(2.5), 2);
        assert_eq!(p.quantize(-0.5), 0);
        assert_eq!(p.quantize(-1.5), -2);
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(
            QuantParams::symmetric(0.0, 8).unwrap_err(),
            QuantError::InvalidScale(0.0)
        );
        assert!(QuantParams::symmetric(-1.0, 8).is_err());
        assert!(QuantParams::asymmetric(1.0, 300, 8).is_err());
        assert_eq!(
            QuantParams::symmetric(1.0, 1).unwrap_err(),
            QuantError::InvalidBits(1)
        );
        let bad = QuantParams {
            scale: -0.5,
            zero_point: 0,
            q_min: -1,
            q_max: 1,
        };
        assert!(fake_quantize(&Tensor::zeros(vec![2]), &bad).is_err());
    }

    #[test]
    fn spec_combinations() {
        assert!(QuantSpec::weights(8).is_ok());
        assert_eq!(QuantSpec::activations(8).unwrap().int_range(), (0, 255));
        assert_eq!(
            QuantSpec::new(8, Scheme::AsymmetricUnsigned, Granularity::PerChannel).unwrap_err(),
            QuantError::InvalidSpec
        );
    }

    #[test]
    fn minmax_channel_example() {
        let w = Tensor::new(vec![2, 2], vec![-0.4, 0.2, 0.0, 0.0]).unwrap();
        let params = weight_params_minmax(&w, 8).unwrap();
        assert!((params[0].scale - 0.4 / 127.0).abs() < 1e-9);
        assert!((params[0].scale - 0.0031496).abs() < 1e-7);
        assert!((params[0].fake(0.2) - 0.2015748).abs() < 1e-6);
        assert_eq!(params[1].scale, 1.0);
        let recon = fake_quantize_per_channel(&w, &params).unwrap();
        assert_eq!(&recon.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn minmax_rejects_nonfinite() {
        let w = Tensor::new(vec![1, 2], vec![f32::INFINITY, 0.0]).unwrap();
        assert_eq!(
            weight_params_minmax(&w, 8).unwrap_err(),
            QuantError::NonFinite("weights")
        );
    }
}
