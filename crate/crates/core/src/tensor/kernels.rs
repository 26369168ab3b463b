//! Slice-level numeric kernels.
//!
//! Everything here works on flat row-major buffers and is generic over the
//! float type so the trainer can run the same arithmetic in `f64` for
//! gradient checking. Summation order is fixed: every reduction starts from
//! its initial value (bias or zero) and accumulates terms left to right in
//! index order, so results are reproducible bit for bit.

use num_traits::Float;

/// Geometry of a 2-d convolution over one NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unrolled patch matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c[m, n] += sum_k a[m, k] * b[k, n]`, accumulated in `k` order.
pub fn gemm_acc<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a
        .chunks_exact(k.max(1))
        .zip(c.chunks_exact_mut(n.max(1)))
        .take(m)
    {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n.max(1))) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Row-major transpose of a `rows x cols` matrix.
pub fn transpose<T: Float>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// Unrolls one sample `[C, H, W]` into a `[C*kh*kw, H'*W']` patch matrix,
/// writing zeros where the window overlaps the padding.
pub fn im2col<T: Float>(g: &ConvGeometry, sample: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let out = &mut cols[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - pad;
                    for x in 0..ow {
                        let ix = (x * g.stride + kj) as isize - pad;
                        out[y * ow + x] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto a `[C, H, W]`
/// sample, summing overlapping contributions.
pub fn col2im<T: Float>(g: &ConvGeometry, cols: &[T], sample: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - pad;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * g.stride + kj) as isize - pad;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.width + ix as usize];
                        *dst = *dst + src[y * ow + x];
                    }
                }
            }
        }
    }
}

/// Forward convolution (cross-correlation). `weight` is `[O, C, kh, kw]`,
/// output is `[N, O, H', W']`.
pub fn conv2d_forward<T: Float>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let positions = g.out_positions();
    let k = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * positions;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = vec![T::zero(); k * positions];
    for (sample, dst) in input
        .chunks_exact(in_len)
        .zip(out.chunks_exact_mut(out_len))
    {
        im2col(g, sample, &mut cols);
        for (o, row) in dst.chunks_exact_mut(positions).enumerate() {
            row.fill(bias[o]);
        }
        gemm_acc(g.out_channels, k, positions, weight, &cols, dst);
    }
    out
}

/// Weight and bias gradients of a convolution given the upstream gradient
/// `grad_out` (`[N, O, H', W']`). Returns `(grad_weight, grad_bias)`.
pub fn conv2d_backward_params<T: Float>(
    g: &ConvGeometry,
    input: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let positions = g.out_positions();
    let k = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * positions;
    let mut grad_w = vec![T::zero(); g.out_channels * k];
    let mut grad_b = vec![T::zero(); g.out_channels];
    let mut cols = vec![T::zero(); k * positions];
    for (sample, go) in input
        .chunks_exact(in_len)
        .zip(grad_out.chunks_exact(out_len))
    {
        im2col(g, sample, &mut cols);
        let cols_t = transpose(k, positions, &cols);
        gemm_acc(g.out_channels, positions, k, go, &cols_t, &mut grad_w);
        for (o, row) in go.chunks_exact(positions).enumerate() {
            grad_b[o] = row.iter().fold(grad_b[o], |acc, &v| acc + v);
        }
    }
    (grad_w, grad_b)
}

/// Input gradient of a convolution.
pub fn conv2d_backward_input<T: Float>(g: &ConvGeometry, weight: &[T], grad_out: &[T]) -> Vec<T> {
    let positions = g.out_positions();
    let k = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * positions;
    let weight_t = transpose(g.out_channels, k, weight);
    let mut grad_in = vec![T::zero(); g.batch * in_len];
    let mut cols = vec![T::zero(); k * positions];
    for (go, gi) in grad_out
        .chunks_exact(out_len)
        .zip(grad_in.chunks_exact_mut(in_len))
    {
        cols.fill(T::zero());
        gemm_acc(k, g.out_channels, positions, &weight_t, go, &mut cols);
        col2im(g, &cols, gi);
    }
    grad_in
}

/// `out[n, o] = bias[o] + sum_f input[n, f] * weight[o, f]`.
pub fn linear_forward<T: Float>(
    batch: usize,
    features: usize,
    outputs: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let weight_t = transpose(outputs, features, weight);
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm_acc(batch, features, outputs, input, &weight_t, &mut out);
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)` for a linear layer.
pub fn linear_backward<T: Float>(
    batch: usize,
    features: usize,
    outputs: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut grad_in = vec![T::zero(); batch * features];
    gemm_acc(batch, outputs, features, grad_out, weight, &mut grad_in);
    let grad_out_t = transpose(batch, outputs, grad_out);
    let mut grad_w = vec![T::zero(); outputs * features];
    gemm_acc(outputs, batch, features, &grad_out_t, input, &mut grad_w);
    let grad_b = grad_out_t
        .chunks_exact(batch.max(1))
        .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
        .collect();
    (grad_in, grad_w, grad_b)
}

/// 2x2 max pooling with stride 2 over `planes` planes of `h x w`. Odd trailing
/// rows/columns are dropped. Returns the pooled values and, for each output,
/// the flat input index that won (first maximum in scan order).
pub fn maxpool2x2_forward<T: Float>(
    planes: usize,
    h: usize,
    w: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = base + (2 * y) * w + 2 * x;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2x2_backward<T: Float>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut grad_in = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx] = grad_in[idx] + g;
    }
    grad_in
}

pub fn relu<T: Float>(input: &[T]) -> Vec<T> {
    input
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

/// Masks `grad_out` by `output > 0`.
pub fn relu_backward<T: Float>(output: &[T], grad_out: &[T]) -> Vec<T> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect()
}

/// Row-wise numerically stable softmax over a `[rows, k]` buffer.
pub fn softmax_rows<T: Float>(k: usize, logits: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / sum;
        }
    }
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
