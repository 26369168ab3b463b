//! CIFAR binary-format datasets.
//!
//! CIFAR-10 records are one label byte followed by 3072 pixel bytes (1024
//! red, 1024 green, 1024 blue, each a row-major 32x32 plane). CIFAR-100
//! records carry a coarse and a fine label byte before the pixels; the fine
//! label is used.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{len} bytes is not a whole number of {record}-byte records")]
    RecordSize { len: usize, record: usize },
    #[error("record {record}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("normalization std must be positive and finite, got {0:?}")]
    Normalization([f32; 3]),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100Fine,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + IMAGE_BYTES,
            CifarVariant::Cifar100Fine => 2 + IMAGE_BYTES,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100Fine => "cifar100-fine",
        }
    }

    /// Binary batch files of a split inside the extracted archive directory.
    pub fn files(self, split: Split) -> &'static [&'static str] {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Test) => &["test_batch.bin"],
            (CifarVariant::Cifar10, _) => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar100Fine, Split::Test) => &["test.bin"],
            (CifarVariant::Cifar100Fine, _) => &["train.bin"],
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" | "cifar100-fine" => Ok(CifarVariant::Cifar100Fine),
            other => Err(format!("unknown CIFAR variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Calib,
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(DatasetError::Normalization(self.std));
        }
        Ok(())
    }

    pub fn apply(&self, channel: usize, byte: u8) -> f32 {
        (byte as f32 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub split: Split,
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        id: impl Into<String>,
        split: Split,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DatasetError::LabelOutOfRange {
                record,
                label,
                num_classes,
            });
        }
        Ok(Self {
            id: id.into(),
            split,
            images,
            labels,
            num_classes,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples `start..end` (clamped to the dataset length).
    pub fn subset(&self, start: usize, end: usize, split: Split) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            id: self.id.clone(),
            split,
            images: self.images.slice_outer(start, end).expect("range clamped"),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
            normalization: self.normalization,
        }
    }

    /// Consecutive batches in dataset order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, &[usize])> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |start| {
            let end = (start + bs).min(self.len());
            (
                self.images.slice_outer(start, end).expect("in range"),
                &self.labels[start..end],
            )
        })
    }
}

/// Decodes in-memory CIFAR records. Fails on a partial trailing record or an
/// out-of-range label without producing a partial dataset.
pub fn parse_cifar(
    bytes: &[u8],
    variant: CifarVariant,
    normalization: Normalization,
    id: impl Into<String>,
    split: Split,
) -> Result<Dataset> {
    normalization.validate()?;
    let record = variant.record_len();
    if !bytes.len().is_multiple_of(record) {
        return Err(DatasetError::RecordSize {
            len: bytes.len(),
            record,
        });
    }
    let n = bytes.len() / record;
    let num_classes = variant.num_classes();
    let label_offset = record - IMAGE_BYTES - 1;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_offset] as usize;
        if label >= num_classes {
            return Err(DatasetError::LabelOutOfRange {
                record: i,
                label,
                num_classes,
            });
        }
        labels.push(label);
        let pixels = &rec[record - IMAGE_BYTES..];
        for (c, plane) in pixels.chunks_exact(1024).enumerate() {
            data.extend(plane.iter().map(|&b| normalization.apply(c, b)));
        }
    }
    let images = Tensor::new(vec![n, 3, 32, 32], data).expect("shape matches data");
    Dataset::new(id, split, images, labels, num_classes, normalization)
}

/// Reads one CIFAR binary file.
pub fn load_cifar(
    path: impl AsRef<Path>,
    variant: CifarVariant,
    normalization: Normalization,
    split: Split,
) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_cifar(&bytes, variant, normalization, variant.name(), split)
}

/// Reads the batch files of `split` from an extracted CIFAR directory, in
/// their canonical order, stopping once `limit` records are loaded.
pub fn load_cifar_dir(
    dir: impl AsRef<Path>,
    variant: CifarVariant,
    normalization: Normalization,
    split: Split,
    limit: Option<usize>,
) -> Result<Dataset> {
    let dir = dir.as_ref();
    let record = variant.record_len();
    let mut bytes = Vec::new();
    for name in variant.files(split) {
        if limit.is_some_and(|l| bytes.len() >= l * record) {
            break;
        }
        let path = dir.join(name);
        let chunk = fs::read(&path).map_err(|source| DatasetError::Io { path, source })?;
        if chunk.len() % record != 0 {
            return Err(DatasetError::RecordSize {
                len: chunk.len(),
                record,
            });
        }
        bytes.extend_from_slice(&chunk);
    }
    if let Some(l) = limit {
        bytes.truncate(l * record);
    }
    parse_cifar(&bytes, variant, normalization, variant.name(), split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..IMAGE_BYTES).map(fill));
        r
    }

    #[test]
    fn single_record() {
        let bytes = record(7, |i| (i % 251) as u8);
        let ds = parse_cifar(
            &bytes,
            CifarVariant::Cifar10,
            Normalization::default(),
            "t",
            Split::Test,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn known_bytes_normalize() {
        let mut bytes = record(3, |_| 0);
        bytes[1] = 200; // R, pixel (0, 0)
        bytes[1 + 1024 + 33] = 51; // G, pixel (1, 1)
        let norm = Normalization {
            mean: [0.5, 0.25, 0.0],
            std: [0.5, 0.25, 1.0],
        };
        let ds = parse_cifar(&bytes, CifarVariant::Cifar10, norm, "t", Split::Train).unwrap();
        let d = ds.images.data();
        assert_eq!(d[0], (200.0 / 255.0 - 0.5) / 0.5);
        assert_eq!(d[1024 + 33], (51.0 / 255.0 - 0.25) / 0.25);
        assert_eq!(d[2048], 0.0);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut bytes = record(0, |_| 1);
        bytes.extend(record(1, |_| 2));
        bytes.pop();
        let err = parse_cifar(
            &bytes,
            CifarVariant::Cifar10,
            Normalization::default(),
            "t",
            Split::Test,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::RecordSize { record: 3073, .. }));
    }

    #[test]
    fn label_out_of_range() {
        let bytes = record(10, |_| 0);
        let err = parse_cifar(
            &bytes,
            CifarVariant::Cifar10,
            Normalization::default(),
            "t",
            Split::Test,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DatasetError::LabelOutOfRange {
                record: 0,
                label: 10,
                ..
            }
        ));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![4u8, 87];
        bytes.extend(std::iter::repeat_n(9, IMAGE_BYTES));
        let ds = parse_cifar(
            &bytes,
            CifarVariant::Cifar100Fine,
            Normalization::default(),
            "c",
            Split::Test,
        )
        .unwrap();
        assert_eq!(ds.labels, vec![87]);
        assert_eq!(ds.num_classes, 100);
        assert_eq!(
            parse_cifar(
                &bytes,
                CifarVariant::Cifar10,
                Normalization::default(),
                "c",
                Split::Test
            )
            .unwrap_err()
            .to_string(),
            "3074 bytes is not a whole number of 3073-byte records"
        );
    }

    #[test]
    fn batching_and_subsets() {
        let mut bytes = Vec::new();
        for l in 0..5u8 {
            bytes.extend(record(l, |_| l));
        }
        let ds = parse_cifar(
            &bytes,
            CifarVariant::Cifar10,
            Normalization::default(),
            "t",
            Split::Train,
        )
        .unwrap();
        let sizes: Vec<usize> = ds
            .batches(2)
            .map(|(x, y)| {
                assert_eq!(x.shape()[0], y.len());
                y.len()
            })
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let sub = ds.subset(1, 3, Split::Calib);
        assert_eq!(sub.labels, vec![1, 2]);
        assert_eq!(sub.images.outer_row(0), ds.images.outer_row(1));
    }

    #[test]
    fn directory_loading_respects_limit() {
        let dir = tempfile::tempdir().unwrap();
        let mut b1 = Vec::new();
        for l in 0..3u8 {
            b1.extend(record(l, |_| 0));
        }
        fs::write(dir.path().join("data_batch_1.bin"), &b1).unwrap();
        fs::write(dir.path().join("data_batch_2.bin"), &b1).unwrap();
        let ds = load_cifar_dir(
            dir.path(),
            CifarVariant::Cifar10,
            Normalization::default(),
            Split::Train,
            Some(4),
        );
        // batch 3..5 missing, but the limit is reached before they are needed
        let ds = ds.unwrap();
        assert_eq!(ds.labels, vec![0, 1, 2, 0]);
        assert!(load_cifar_dir(
            dir.path(),
            CifarVariant::Cifar10,
            Normalization::default(),
            Split::Train,
            None
        )
        .is_err());
    }
}
