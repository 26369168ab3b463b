//! Prediction-swap statistics between a full-precision model and its
//! quantized versions, and the weight bit-width sweep built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::metrics::{self, MetricsError, PredictionRecord, ReliabilityBin};
use crate::model::{Model, ModelError, Site};
use crate::quant::{self, observer::DEFAULT_BINS, QuantError, QuantParams};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
/// `w_bits` value meaning "leave the model in full precision".
pub const FULL_PRECISION_BITS: u32 = 32;

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("prediction lists differ in length: {fp} vs {q}")]
    LengthMismatch { fp: usize, q: usize },
    #[error("label mismatch at sample {index}: {fp} vs {q}")]
    LabelMismatch { index: usize, fp: usize, q: usize },
    #[error("w_bits list {0:?} must be non-empty and strictly decreasing")]
    BitList(Vec<u32>),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("report schema: {0}")]
    Schema(String),
    #[error("report invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, SwapError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapStats {
    pub n_total: u64,
    pub n_swapped: u64,
    pub n_err_fp: u64,
    pub n_err_q: u64,
    pub swap_pct: f64,
    pub err_fp_pct: f64,
    pub err_q_pct: f64,
    /// Percentage-point change of the error rate.
    pub delta_err_pct: f64,
    /// `delta_err_pct / swap_pct`; absent when nothing was swapped.
    pub ratio: Option<f64>,
    pub mean_conf_swapped: Option<f64>,
    pub mean_conf_retained: Option<f64>,
    /// Swapped predictions binned by their full-precision confidence.
    pub swapped_conf_hist: Vec<u64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0u64), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Compares aligned full-precision and quantized predictions.
pub fn swap_stats(
    fp: &[PredictionRecord],
    q: &[PredictionRecord],
    num_bins: usize,
) -> Result<SwapStats> {
    if fp.len() != q.len() {
        return Err(SwapError::LengthMismatch {
            fp: fp.len(),
            q: q.len(),
        });
    }
    if fp.is_empty() {
        return Err(SwapError::EmptyDataset("prediction"));
    }
    if let Some((index, (a, b))) = fp
        .iter()
        .zip(q)
        .enumerate()
        .find(|(_, (a, b))| a.label != b.label)
    {
        return Err(SwapError::LabelMismatch {
            index,
            fp: a.label,
            q: b.label,
        });
    }
    let swapped = |p: &&(&PredictionRecord, &PredictionRecord)| p.0.predicted != p.1.predicted;
    let pairs: Vec<_> = fp.iter().zip(q).collect();
    let n_total = fp.len() as u64;
    let n_swapped = pairs.iter().filter(swapped).count() as u64;
    let n_err_fp = fp.iter().filter(|r| !r.is_correct()).count() as u64;
    let n_err_q = q.iter().filter(|r| !r.is_correct()).count() as u64;
    let pct = |c: u64| 100.0 * c as f64 / n_total as f64;
    let swapped_conf_hist = metrics::histogram_of(
        pairs
            .iter()
            .filter(swapped)
            .map(|(a, _)| a.confidence as f64),
        num_bins,
    )?;
    Ok(SwapStats {
        n_total,
        n_swapped,
        n_err_fp,
        n_err_q,
        swap_pct: pct(n_swapped),
        err_fp_pct: pct(n_err_fp),
        err_q_pct: pct(n_err_q),
        delta_err_pct: pct(n_err_q) - pct(n_err_fp),
        ratio: (n_swapped > 0).then(|| (n_err_q as f64 - n_err_fp as f64) / n_swapped as f64),
        mean_conf_swapped: mean(
            pairs
                .iter()
                .filter(swapped)
                .map(|(a, _)| a.confidence as f64),
        ),
        mean_conf_retained: mean(
            pairs
                .iter()
                .filter(|p| !swapped(p))
                .map(|(a, _)| a.confidence as f64),
        ),
        swapped_conf_hist,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    pub accuracy: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub overconfidence_gap: f64,
    pub reliability: Vec<ReliabilityBin>,
    pub confidence_hist: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteParams {
    pub site: String,
    pub scale: f32,
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub w_bits: u32,
    pub accuracy_q: f64,
    pub ece_q: f64,
    pub stats: SwapStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub schema_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub eval_samples: usize,
    pub a_bits: u32,
    pub calib_samples: usize,
    pub calib_split: String,
    pub num_bins: usize,
    pub observer_bins: usize,
    pub seed: u64,
    pub baseline: Baseline,
    pub activation_params: Vec<SiteParams>,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parses a report, rejecting unknown schema versions before looking at
    /// the rest of the document.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| SwapError::Schema(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(SwapError::Schema(format!("unsupported schema_version {v}"))),
            None => return Err(SwapError::Schema("missing schema_version".into())),
        }
        let report: SweepReport =
            serde_json::from_value(value).map_err(|e| SwapError::Schema(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    /// Structural invariants every report must satisfy.
    pub fn validate(&self) -> Result<()> {
        let bits: Vec<u32> = self.entries.iter().map(|e| e.w_bits).collect();
        if bits.windows(2).any(|w| w[0] <= w[1]) {
            return Err(SwapError::BitList(bits));
        }
        if self.num_bins == 0
            || self.baseline.reliability.len() != self.num_bins
            || self.baseline.confidence_hist.len() != self.num_bins
        {
            return Err(SwapError::Invariant("baseline bin count".into()));
        }
        for e in &self.entries {
            let s = &e.stats;
            if s.n_err_q.abs_diff(s.n_err_fp) > s.n_swapped {
                return Err(SwapError::Invariant(format!(
                    "w{}: error count changed by more than the swapped count",
                    e.w_bits
                )));
            }
            if s.swapped_conf_hist.len() != self.num_bins
                || s.swapped_conf_hist.iter().sum::<u64>() != s.n_swapped
            {
                return Err(SwapError::Invariant(format!(
                    "w{}: swapped histogram",
                    e.w_bits
                )));
            }
            if s.ratio.is_some_and(|r| !(-1.0..=1.0).contains(&r))
                || (s.ratio.is_none() != (s.n_swapped == 0))
            {
                return Err(SwapError::Invariant(format!("w{}: ratio", e.w_bits)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub w_bits: Vec<u32>,
    pub a_bits: u32,
    pub num_bins: usize,
    pub observer_bins: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Recorded in the report, e.g. `"train[0..1024]"`.
    pub calib_split: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            w_bits: vec![8, 7, 6, 5, 4],
            a_bits: 8,
            num_bins: metrics::DEFAULT_BINS,
            observer_bins: DEFAULT_BINS,
            batch_size: 256,
            seed: 0,
            calib_split: String::new(),
        }
    }
}

/// Predictions of `forward` over the dataset in order.
pub fn evaluate<F>(data: &Dataset, batch_size: usize, forward: F) -> Result<Vec<PredictionRecord>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut records = Vec::with_capacity(data.len());
    for (x, y) in data.batches(batch_size) {
        let logits = forward(&x)?;
        records.extend(metrics::predict(&logits, y)?);
    }
    Ok(records)
}

/// Folds batchnorm, calibrates activations once at `a_bits` on `calib`, then
/// for each weight bit width quantizes, evaluates `eval` and compares against
/// the folded full-precision predictions.
pub fn run_sweep(
    model: &Model,
    eval: &Dataset,
    calib: &Dataset,
    cfg: &SweepConfig,
) -> Result<SweepReport> {
    if cfg.w_bits.is_empty() || cfg.w_bits.windows(2).any(|w| w[0] <= w[1]) {
        return Err(SwapError::BitList(cfg.w_bits.clone()));
    }
    for &b in &cfg.w_bits {
        if b != FULL_PRECISION_BITS && !(quant::MIN_BITS..=quant::MAX_BITS).contains(&b) {
            return Err(QuantError::InvalidBits(b).into());
        }
    }
    if eval.is_empty() {
        return Err(SwapError::EmptyDataset("evaluation"));
    }
    if calib.is_empty() {
        return Err(SwapError::EmptyDataset("calibration"));
    }
    let folded = model.fold_batchnorm()?;
    let fp = evaluate(eval, cfg.batch_size, |x| Ok(folded.forward(x)?))?;

    let sites = quant::observer_sites(&folded);
    let batches: Vec<Tensor> = calib.batches(cfg.batch_size).map(|(x, _)| x).collect();
    let calibration = quant::calibrate(&folded, &batches, &sites, cfg.observer_bins)?;
    let activations = calibration.freeze(cfg.a_bits)?;

    let entries = cfg
        .w_bits
        .par_iter()
        .map(|&w_bits| {
            let q = if w_bits == FULL_PRECISION_BITS {
                fp.clone()
            } else {
                let qm = quant::quantize_model(&folded, w_bits, &activations)?;
                evaluate(eval, cfg.batch_size, |x| Ok(qm.forward(x)?))?
            };
            Ok(SweepEntry {
                w_bits,
                accuracy_q: metrics::accuracy(&q)?,
                ece_q: metrics::reliability(&q, cfg.num_bins)?.ece,
                stats: swap_stats(&fp, &q, cfg.num_bins)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rel = metrics::reliability(&fp, cfg.num_bins)?;
    let baseline = Baseline {
        accuracy: metrics::accuracy(&fp)?,
        ece: rel.ece,
        mean_confidence: metrics::mean_confidence(&fp)?,
        overconfidence_gap: metrics::overconfidence_gap(&fp)?,
        reliability: rel.bins,
        confidence_hist: metrics::confidence_histogram(&fp, cfg.num_bins)?,
    };
    let activation_params = activations
        .sites
        .iter()
        .map(|(site, p): (&Site, &QuantParams)| SiteParams {
            site: site.to_string(),
            scale: p.scale,
            zero_point: p.zero_point,
            q_min: p.q_min,
            q_max: p.q_max,
        })
        .collect();
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        model_id: model.id().to_string(),
        dataset_id: eval.id.clone(),
        eval_samples: eval.len(),
        a_bits: cfg.a_bits,
        calib_samples: calib.len(),
        calib_split: cfg.calib_split.clone(),
        num_bins: cfg.num_bins,
        observer_bins: cfg.observer_bins,
        seed: cfg.seed,
        baseline,
        activation_params,
        entries,
    };
    report.validate()?;
    Ok(report)
}
