//! On-disk model bundles.
//!
//! A bundle is a directory holding `manifest.json` and `weights.bin`. The
//! blob stores every tensor as little-endian `f32`, concatenated in manifest
//! order; the manifest records each tensor's shape and byte range plus a
//! CRC-32 of the whole blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Layer, Model, ModelError};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),
    #[error(
        "weights checksum mismatch: manifest says {expected:#010x}, blob hashes to {actual:#010x}"
    )]
    Checksum { expected: u32, actual: u32 },
    #[error("tensor {name}: bytes {offset}..{end} outside blob of {blob_len} bytes")]
    OutOfBounds {
        name: String,
        offset: u64,
        end: u64,
        blob_len: usize,
    },
    #[error("tensor {name}: byte_length {byte_length} does not match shape {shape:?}")]
    Length {
        name: String,
        shape: Vec<usize>,
        byte_length: u64,
    },
    #[error("tensor {name}: offset {offset} is not 4-byte aligned")]
    Misaligned { name: String, offset: u64 },
    #[error("tensors {first} and {second} overlap in the weights blob")]
    Overlap { first: String, second: String },
    #[error("layer {layer}: {reason}")]
    Descriptor { layer: usize, reason: String },
    #[error("invalid model: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub id: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub crc32: u32,
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

fn tensor_names(kind: &str) -> Option<&'static [&'static str]> {
    Some(match kind {
        "conv2d" | "linear" => &["weight", "bias"],
        "batchnorm2d" => &["gamma", "beta", "running_mean", "running_var"],
        "relu" | "maxpool2d" | "flatten" | "add" => &[],
        _ => return None,
    })
}

/// Serializes a model into manifest JSON and the weights blob.
pub fn encode(model: &Model) -> (String, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let names = tensor_names(layer.kind()).expect("known layer kind");
        let tensors = layer
            .params()
            .into_iter()
            .zip(names)
            .map(|(t, name)| {
                let byte_offset = blob.len() as u64;
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                TensorEntry {
                    name: (*name).to_string(),
                    shape: t.shape().to_vec(),
                    byte_offset,
                    byte_length: blob.len() as u64 - byte_offset,
                }
            })
            .collect();
        let mut desc = LayerDescriptor {
            kind: layer.kind().to_string(),
            stride: None,
            padding: None,
            epsilon: None,
            source: None,
            tensors,
        };
        match layer {
            Layer::Conv2d {
                stride, padding, ..
            } => {
                desc.stride = Some(*stride);
                desc.padding = Some(*padding);
            }
            Layer::BatchNorm2d { epsilon, .. } => desc.epsilon = Some(*epsilon),
            Layer::Add { source } => desc.source = Some(*source),
            _ => {}
        }
        layers.push(desc);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        id: model.id().to_string(),
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        crc32: crc32fast::hash(&blob),
        layers,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    (json, blob)
}

/// Parses and validates a manifest/blob pair.
pub fn decode(manifest_bytes: &[u8], blob: &[u8]) -> Result<Model, BundleError> {
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| BundleError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::UnsupportedVersion(manifest.format_version));
    }
    let actual = crc32fast::hash(blob);
    if actual != manifest.crc32 {
        return Err(BundleError::Checksum {
            expected: manifest.crc32,
            actual,
        });
    }

    let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
    for entry in manifest.layers.iter().flat_map(|l| &l.tensors) {
        let elems = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4));
        if elems != Some(entry.byte_length) {
            return Err(BundleError::Length {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                byte_length: entry.byte_length,
            });
        }
        if entry.byte_offset % 4 != 0 {
            return Err(BundleError::Misaligned {
                name: entry.name.clone(),
                offset: entry.byte_offset,
            });
        }
        let end = entry.byte_offset.checked_add(entry.byte_length);
        match end {
            Some(end) if end <= blob.len() as u64 => {
                ranges.push((entry.byte_offset, end, &entry.name))
            }
            _ => {
                return Err(BundleError::OutOfBounds {
                    name: entry.name.clone(),
                    offset: entry.byte_offset,
                    end: end.unwrap_or(u64::MAX),
                    blob_len: blob.len(),
                })
            }
        }
    }
    let mut sorted = ranges.clone();
    sorted.sort();
    for pair in sorted.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        // empty tensors occupy no bytes
        if a.0 < a.1 && b.0 < b.1 && b.0 < a.1 {
            return Err(BundleError::Overlap {
                first: a.2.to_string(),
                second: b.2.to_string(),
            });
        }
    }

    let read = |entry: &TensorEntry| -> Tensor {
        let bytes =
            &blob[entry.byte_offset as usize..(entry.byte_offset + entry.byte_length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(entry.shape.clone(), data).expect("length checked")
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, desc) in manifest.layers.iter().enumerate() {
        let bad = |reason: String| BundleError::Descriptor { layer: i, reason };
        let names = tensor_names(&desc.kind)
            .ok_or_else(|| bad(format!("unknown layer kind {:?}", desc.kind)))?;
        let got: Vec<&str> = desc.tensors.iter().map(|t| t.name.as_str()).collect();
        if got != names {
            return Err(bad(format!("expected tensors {names:?}, found {got:?}")));
        }
        let t: Vec<Tensor> = desc.tensors.iter().map(read).collect();
        let mut t = t.into_iter();
        let mut next = || t.next().expect("tensor count checked");
        let layer = match desc.kind.as_str() {
            "conv2d" => Layer::Conv2d {
                weight: next(),
                bias: next(),
                stride: desc
                    .stride
                    .ok_or_else(|| bad("conv2d without stride".into()))?,
                padding: desc
                    .padding
                    .ok_or_else(|| bad("conv2d without padding".into()))?,
            },
            "batchnorm2d" => Layer::BatchNorm2d {
                gamma: next(),
                beta: next(),
                running_mean: next(),
                running_var: next(),
                epsilon: desc
                    .epsilon
                    .ok_or_else(|| bad("batchnorm2d without epsilon".into()))?,
            },
            "linear" => Layer::Linear {
                weight: next(),
                bias: next(),
            },
            "relu" => Layer::Relu,
            "maxpool2d" => Layer::MaxPool2d,
            "flatten" => Layer::Flatten,
            "add" => Layer::Add {
                source: desc
                    .source
                    .ok_or_else(|| bad("add without source".into()))?,
            },
            _ => unreachable!("kind validated above"),
        };
        if layer.params().iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        layers.push(layer);
    }
    Ok(Model::new(
        manifest.id,
        manifest.input_shape,
        manifest.num_classes,
        layers,
    )?)
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save_bundle(model: &Model, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(model);
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Model, BundleError> {
    let dir = dir.as_ref();
    let manifest = fs::read(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    decode(&manifest, &blob)
}
