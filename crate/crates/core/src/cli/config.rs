use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{CifarVariant, Normalization};
use crate::model::Architecture;
use crate::trainer::TrainConfig;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Extracted CIFAR binary directory.
    pub dir: PathBuf,
    #[serde(default = "default_variant")]
    pub variant: CifarVariant,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_variant() -> CifarVariant {
    CifarVariant::Cifar10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub w_bits: Vec<u32>,
    pub a_bits: u32,
    pub calib_samples: usize,
    pub num_bins: usize,
    pub observer_bins: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = crate::swap::SweepConfig::default();
        Self {
            w_bits: d.w_bits,
            a_bits: d.a_bits,
            calib_samples: 1024,
            num_bins: d.num_bins,
            observer_bins: d.observer_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Bundle directory written by `train`.
    pub model_dir: PathBuf,
    /// Defaults to `train_log.csv` inside `model_dir`.
    #[serde(default)]
    pub train_log: Option<PathBuf>,
    /// When set, `train` also runs the sweep and writes the report here.
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default = "default_arch")]
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Overrides `train.seed` and is recorded in reports.
    #[serde(default)]
    pub seed: Option<u64>,
    pub output: OutputConfig,
}

fn default_arch() -> Architecture {
    Architecture::ToyNet
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, Error> {
        let mut cfg: RunConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        self.data.normalization.validate()?;
        let s = &self.sweep;
        if s.w_bits.is_empty() || s.w_bits.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "sweep.w_bits {:?} must be non-empty and strictly decreasing",
                s.w_bits
            )));
        }
        if s.calib_samples == 0 || s.num_bins == 0 || s.observer_bins == 0 {
            return Err(Error::Config(
                "sweep.calib_samples, num_bins and observer_bins must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.output
            .train_log
            .clone()
            .unwrap_or_else(|| self.output.model_dir.join("train_log.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"data": {"dir": "cifar"}, "output": {"model_dir": "out"}}"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(MINIMAL.as_bytes()).unwrap();
        assert_eq!(cfg.architecture, Architecture::ToyNet);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.sweep.w_bits, vec![8, 7, 6, 5, 4]);
        assert_eq!(cfg.sweep.calib_samples, 1024);
        assert_eq!(cfg.train_log_path(), PathBuf::from("out/train_log.csv"));
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for bad in [
            r#"{"data": {"dir": "c"}, "output": {"model_dir": "o"}, "extra": 1}"#,
            r#"{"data": {"dir": "c", "extra": 1}, "output": {"model_dir": "o"}}"#,
            r#"{"data": {"dir": "c"}, "output": {"model_dir": "o"}, "train": {"lr": 0.1, "extra": 1}}"#,
            r#"{"data": {"dir": "c"}, "output": {"model_dir": "o"}, "sweep": {"extra": 1}}"#,
            r#"{"data": {"dir": "c", "normalization": {"mean": [0,0,0], "std": [1,1,1], "extra": 1}}, "output": {"model_dir": "o"}}"#,
        ] {
            let err = RunConfig::from_json(bad.as_bytes()).unwrap_err();
            assert!(err.to_string().contains("extra"), "{err}");
        }
    }

    #[test]
    fn seed_override_and_validation() {
        let cfg = RunConfig::from_json(
            br#"{"data": {"dir": "c"}, "output": {"model_dir": "o"}, "seed": 9, "architecture": "toynetskip"}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.architecture, Architecture::ToyNetSkip);
        assert!(RunConfig::from_json(
            br#"{"data": {"dir": "c"}, "output": {"model_dir": "o"}, "sweep": {"w_bits": [4, 8]}}"#
        )
        .is_err());
        assert!(RunConfig::from_json(
            br#"{"data": {"dir": "c"}, "output": {"model_dir": "o"}, "train": {"epochs": 0}}"#
        )
        .is_err());
    }
}
