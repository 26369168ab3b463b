//! Confidence, accuracy and calibration statistics.
//!
//! Confidence is the largest softmax probability of a prediction. Binning
//! uses `B` equal-width bins where bin `b` covers `(b/B, (b+1)/B]` and the
//! first bin is also closed at 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, kernels, Tensor, TensorError};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("{logits} logit rows but {labels} labels")]
    LengthMismatch { logits: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("bin count must be at least 1")]
    InvalidBins,
    #[error("no predictions")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub label: usize,
    pub predicted: usize,
    pub confidence: f32,
    pub probs: Vec<f32>,
}

impl PredictionRecord {
    /// Builds a record from a probability vector; ties in the argmax go to
    /// the lowest class index.
    pub fn from_probs(label: usize, probs: Vec<f32>) -> Self {
        let predicted = kernels::argmax(&probs);
        Self {
            label,
            predicted,
            confidence: probs[predicted],
            probs,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.label == self.predicted
    }

    pub fn outcome(&self) -> Outcome {
        Outcome {
            confidence: self.confidence as f64,
            correct: self.is_correct(),
        }
    }
}

/// The two facts the calibration statistics need from a prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    /// Zero for empty bins.
    pub accuracy: f64,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

/// One record per row of `logits`.
pub fn predict(logits: &Tensor, labels: &[usize]) -> Result<Vec<PredictionRecord>> {
    let probs = tensor::softmax(logits)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if n != labels.len() {
        return Err(MetricsError::LengthMismatch {
            logits: n,
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(MetricsError::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    Ok(probs
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &label)| PredictionRecord::from_probs(label, row.to_vec()))
        .collect())
}

/// Bin index of a confidence in `[0, 1]`.
pub fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let scaled = (confidence * num_bins as f64).ceil();
    if scaled <= 1.0 {
        0
    } else {
        (scaled as usize - 1).min(num_bins - 1)
    }
}

pub fn bin_bounds(b: usize, num_bins: usize) -> (f64, f64) {
    (b as f64 / num_bins as f64, (b + 1) as f64 / num_bins as f64)
}

pub fn reliability(records: &[PredictionRecord], num_bins: usize) -> Result<Reliability> {
    let outcomes: Vec<Outcome> = records.iter().map(PredictionRecord::outcome).collect();
    reliability_of(&outcomes, num_bins)
}

/// Reliability bins and expected calibration error,
/// `ECE = sum_b (n_b / N) |acc_b - conf_b|`.
pub fn reliability_of(outcomes: &[Outcome], num_bins: usize) -> Result<Reliability> {
    if num_bins < 1 {
        return Err(MetricsError::InvalidBins);
    }
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![0u64; num_bins];
    let mut correct = vec![0u64; num_bins];
    let mut conf_sum = vec![0f64; num_bins];
    for o in outcomes {
        let b = bin_index(o.confidence, num_bins);
        counts[b] += 1;
        correct[b] += o.correct as u64;
        conf_sum[b] += o.confidence;
    }
    let n = outcomes.len() as f64;
    let mut ece = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (lower, upper) = bin_bounds(b, num_bins);
            let (accuracy, mean_confidence) = if counts[b] == 0 {
                (0.0, 0.0)
            } else {
                (
                    correct[b] as f64 / counts[b] as f64,
                    conf_sum[b] / counts[b] as f64,
                )
            };
            ece += counts[b] as f64 / n * (accuracy - mean_confidence).abs();
            ReliabilityBin {
                lower,
                upper,
                count: counts[b],
                accuracy,
                mean_confidence,
            }
        })
        .collect();
    Ok(Reliability { bins, ece })
}

pub fn confidence_histogram(records: &[PredictionRecord], num_bins: usize) -> Result<Vec<u64>> {
    histogram_of(records.iter().map(|r| r.confidence as f64), num_bins)
}

/// Counts of confidences per bin, same binning as [`reliability_of`].
pub fn histogram_of(
    confidences: impl IntoIterator<Item = f64>,
    num_bins: usize,
) -> Result<Vec<u64>> {
    if num_bins < 1 {
        return Err(MetricsError::InvalidBins);
    }
    let mut counts = vec![0u64; num_bins];
    for c in confidences {
        counts[bin_index(c, num_bins)] += 1;
    }
    Ok(counts)
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64)
}

pub fn mean_confidence(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().map(|r| r.confidence as f64).sum::<f64>() / records.len() as f64)
}

pub fn overconfidence_gap(records: &[PredictionRecord]) -> Result<f64> {
    let outcomes: Vec<Outcome> = records.iter().map(PredictionRecord::outcome).collect();
    overconfidence_gap_of(&outcomes)
}

/// Mean confidence minus accuracy; positive means overconfident.
pub fn overconfidence_gap_of(outcomes: &[Outcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = outcomes.len() as f64;
    let conf = outcomes.iter().map(|o| o.confidence).sum::<f64>() / n;
    let acc = outcomes.iter().filter(|o| o.correct).count() as f64 / n;
    Ok(conf - acc)
}
