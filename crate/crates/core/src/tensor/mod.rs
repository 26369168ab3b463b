//! Dense row-major `f32` tensors and the inference kernels built on them.

pub mod kernels;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kernels::ConvGeometry;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor of 32-bit floats. `shape.iter().product() == data.len()`
/// always holds.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "tensor",
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&0);
        if start > end || end > outer {
            return Err(TensorError::InvalidArgument {
                op: "slice_outer",
                reason: format!("range {start}..{end} outside leading extent {outer}"),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Row `i` of the leading axis as a slice.
    pub fn outer_row(&self, i: usize) -> &[f32] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[i * inner..(i + 1) * inner]
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_outer(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_outer",
            reason: "no tensors".into(),
        })?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if p.shape.len() != shape.len() || p.shape[1..] != shape[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_outer",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = outer;
        Ok(Self { shape, data })
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected rank {rank}, got shape {:?}", t.shape),
        });
    }
    Ok(())
}

/// Cross-correlation of an NCHW batch with an `[O, C, kh, kw]` kernel.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    expect_rank(OP, input, 4)?;
    expect_rank(OP, weight, 4)?;
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (o, wc, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if c != wc {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: input.shape.clone(),
            right: weight.shape.clone(),
        });
    }
    if bias.shape != [o] {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: weight.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "stride must be at least 1".into(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: input.shape.clone(),
            right: weight.shape.clone(),
        });
    }
    let g = ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    let data = kernels::conv2d_forward(&g, &input.data, &weight.data, &bias.data);
    Ok(Tensor {
        shape: vec![n, o, g.out_height(), g.out_width()],
        data,
    })
}

/// `input · weightᵀ + bias` for `input: [N, F]`, `weight: [O, F]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    expect_rank(OP, input, 2)?;
    expect_rank(OP, weight, 2)?;
    let (n, f) = (input.shape[0], input.shape[1]);
    let (o, wf) = (weight.shape[0], weight.shape[1]);
    if f != wf {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: input.shape.clone(),
            right: weight.shape.clone(),
        });
    }
    if bias.shape != [o] {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: weight.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: vec![n, o],
        data: kernels::linear_forward(n, f, o, &input.data, &weight.data, &bias.data),
    })
}

/// Row-wise softmax of `[N, K]` logits. Exponentials and the normalizing sum
/// are evaluated in `f64` after max subtraction, then rounded to `f32`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    const OP: &str = "softmax";
    expect_rank(OP, logits, 2)?;
    let k = logits.shape[1];
    if k == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "need at least one class".into(),
        });
    }
    if !logits.is_finite() {
        return Err(TensorError::NonFinite { op: OP });
    }
    let wide: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
    let probs = kernels::softmax_rows(k, &wide);
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: probs.into_iter().map(|p| p as f32).collect(),
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: kernels::relu(&input.data),
    }
}

/// 2x2 max pooling with stride 2 on an NCHW tensor.
pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    const OP: &str = "maxpool2d";
    expect_rank(OP, input, 4)?;
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    if h < 2 || w < 2 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: format!("spatial extent {h}x{w} smaller than the 2x2 window"),
        });
    }
    let (data, _) = kernels::maxpool2x2_forward(n * c, h, w, &input.data);
    Ok(Tensor {
        shape: vec![n, c, h / 2, w / 2],
        data,
    })
}

/// Collapses every axis after the first.
pub fn flatten(input: &Tensor) -> Result<Tensor> {
    let n = *input
        .shape
        .first()
        .ok_or_else(|| TensorError::InvalidArgument {
            op: "flatten",
            reason: "rank-0 tensor".into(),
        })?;
    let rest = input.shape[1..].iter().product();
    Ok(Tensor {
        shape: vec![n, rest],
        data: input.data.clone(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Per-row argmax of a `[N, K]` tensor, lowest index on ties.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    expect_rank("argmax_rows", t, 2)?;
    let k = t.shape[1];
    if k == 0 {
        return Err(TensorError::InvalidArgument {
            op: "argmax_rows",
            reason: "need at least one column".into(),
        });
    }
    Ok(t.data.chunks_exact(k).map(kernels::argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &[f32], b: &[f32], rel: f32) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= rel * y.abs().max(f32::MIN_POSITIVE))
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(vec![1]);
        let out = conv2d(&input, &w, &b, 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let input = Tensor::from_fn(vec![2, 3, 5, 4], |i| i as f32 * 0.37 - 3.0);
        let w = Tensor::zeros(vec![2, 3, 3, 3]);
        let b = Tensor::new(vec![2], vec![0.5, -1.25]).unwrap();
        let out = conv2d(&input, &w, &b, 1, 1).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5, 4]);
        for (i, v) in out.data().iter().enumerate() {
            let o = (i / 20) % 2;
            assert_eq!(*v, b.data()[o]);
        }
    }

    #[test]
    fn conv_output_extent_with_stride() {
        let input = Tensor::zeros(vec![1, 2, 7, 6]);
        let w = Tensor::zeros(vec![4, 2, 3, 2]);
        let out = conv2d(&input, &w, &Tensor::zeros(vec![4]), 2, 1).unwrap();
        assert_eq!(
            out.shape(),
            &[1, 4, (7 + 2 - 3) / 2 + 1, (6 + 2 - 2) / 2 + 1]
        );
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![2, 2, 3, 3]);
        let err = conv2d(&input, &w, &Tensor::zeros(vec![2]), 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn conv_rejects_zero_stride() {
        let input = Tensor::zeros(vec![1, 1, 4, 4]);
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(conv2d(&input, &w, &Tensor::zeros(vec![1]), 0, 0).is_err());
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let x = Tensor::from_fn(vec![3, 4], |i| i as f32 - 5.5);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(vec![4])).unwrap(), x);

        let bias = Tensor::new(vec![2], vec![0.25, -7.0]).unwrap();
        let w = Tensor::from_fn(vec![2, 4], |i| i as f32);
        let out = linear(&Tensor::zeros(vec![3, 4]), &w, &bias).unwrap();
        assert_eq!(out.data(), &[0.25, -7.0, 0.25, -7.0, 0.25, -7.0]);
    }

    #[test]
    fn linear_feature_mismatch() {
        let err = linear(
            &Tensor::zeros(vec![2, 3]),
            &Tensor::zeros(vec![4, 5]),
            &Tensor::zeros(vec![4]),
        );
        assert!(matches!(err, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_analytic_cases() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 3f32.ln(), 1000.0, 0.0, -4.0, -4.0]).unwrap();
        let p = softmax(&t).unwrap();
        assert!(approx_eq(&p.data()[0..2], &[0.25, 0.75], 1e-6));
        assert_eq!(p.data()[2], 1.0);
        assert!(p.data()[3] < 1e-30);
        assert_eq!(&p.data()[4..], &[0.5, 0.5]);

        let c = Tensor::full(vec![1, 4], 17.5);
        assert_eq!(softmax(&c).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert_eq!(
            softmax(&t).unwrap_err(),
            TensorError::NonFinite { op: "softmax" }
        );
    }

    #[test]
    fn maxpool_drops_odd_edge_and_picks_max() {
        let t = Tensor::from_fn(vec![1, 1, 3, 5], |i| i as f32);
        let p = maxpool2d(&t).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 2]);
        assert_eq!(p.data(), &[6.0, 8.0]);
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn add_and_flatten() {
        let a = Tensor::from_fn(vec![2, 2, 1, 1], |i| i as f32);
        let b = Tensor::full(vec![2, 2, 1, 1], 1.0);
        let s = add(&a, &b).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten(&s).unwrap().shape(), &[2, 2]);
        assert!(add(&a, &Tensor::zeros(vec![4])).is_err());
    }
}
