//! Histogram observer and the MSE-driven clip range search.

use serde::{Deserialize, Serialize};

use super::{int_range, QuantError, QuantParams, Result, Scheme};

pub const DEFAULT_BINS: usize = 2048;
pub const COARSE_EDGES: usize = 32;

/// Running histogram of observed activation values.
///
/// Bins always span `[min, max]` of everything seen so far. When a batch
/// widens the range, existing mass is re-binned by moving each old bin's
/// count to the new bin containing its midpoint, so the total mass stays
/// exactly equal to the number of observed scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramObserver {
    bins: usize,
    min: f32,
    max: f32,
    counts: Vec<u64>,
    total: u64,
}

impl HistogramObserver {
    pub fn new(bins: usize) -> Self {
        let bins = bins.max(1);
        Self {
            bins,
            min: 0.0,
            max: 0.0,
            counts: vec![0; bins],
            total: 0,
        }
    }

    /// Observer preloaded with explicit counts over `[min, max]`.
    pub fn from_counts(min: f32, max: f32, counts: Vec<u64>) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max || counts.is_empty() {
            return Err(QuantError::NonFinite("histogram range"));
        }
        let total = counts.iter().sum();
        Ok(Self {
            bins: counts.len(),
            min,
            max,
            counts,
            total,
        })
    }

    pub fn bin_count(&self) -> usize {
        self.bins
    }

    pub fn min(&self) -> f32 {
        self.min
    }

    pub fn max(&self) -> f32 {
        self.max
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_mass(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn width(&self) -> f64 {
        (self.max as f64 - self.min as f64) / self.bins as f64
    }

    fn bin_of(&self, v: f64) -> usize {
        let w = self.width();
        if w == 0.0 {
            return 0;
        }
        let idx = ((v - self.min as f64) / w).floor();
        (idx.max(0.0) as usize).min(self.bins - 1)
    }

    /// Edge `j` of the bin grid, `0 <= j <= bins`.
    pub fn edge(&self, j: usize) -> f64 {
        self.min as f64 + j as f64 * self.width()
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        self.min as f64 + (i as f64 + 0.5) * self.width()
    }

    pub fn observe(&mut self, values: &[f32]) -> Result<()> {
        if values.is_empty() {
            return Ok(());
        }
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in values {
            if !v.is_finite() {
                return Err(QuantError::NonFinite("observed activations"));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if self.total == 0 {
            self.min = lo;
            self.max = hi;
            self.counts.iter_mut().for_each(|c| *c = 0);
        } else if lo < self.min || hi > self.max {
            let old = self.clone();
            self.min = self.min.min(lo);
            self.max = self.max.max(hi);
            self.counts.iter_mut().for_each(|c| *c = 0);
            for (i, &c) in old.counts.iter().enumerate() {
                if c > 0 {
                    let idx = self.bin_of(old.midpoint(i));
                    self.counts[idx] += c;
                }
            }
        }
        for &v in values {
            let idx = self.bin_of(v as f64);
            self.counts[idx] += 1;
        }
        self.total += values.len() as u64;
        Ok(())
    }

    /// Clip range `[a, b]` for bin edges `lo < hi`, widened to contain zero.
    pub fn clip_range(&self, lo: usize, hi: usize) -> (f64, f64) {
        (self.edge(lo).min(0.0), self.edge(hi).max(0.0))
    }

    /// Estimated quantization MSE of clipping to bin edges `lo..hi` on an
    /// unsigned `bits`-bit grid. Each bin's mass sits at its midpoint;
    /// midpoints outside the clip range cost their squared distance to the
    /// nearest edge, midpoints inside cost the uniform rounding noise
    /// `scale² / 12`.
    pub fn estimated_mse(&self, lo: usize, hi: usize, bits: u32) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let (_, q_max) = int_range(Scheme::AsymmetricUnsigned, bits);
        let (a, b) = self.clip_range(lo, hi);
        let scale = (b - a) / q_max as f64;
        let rounding = scale * scale / 12.0;
        let mut sum = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let m = self.midpoint(i);
            let err = if m < a {
                (m - a) * (m - a)
            } else if m > b {
                (m - b) * (m - b)
            } else {
                rounding
            };
            sum += c as f64 * err;
        }
        sum / self.total as f64
    }

    /// Two stages. A scan over every pair of edges on a coarse lattice of at
    /// most `COARSE_EDGES` points picks a start, then coordinate descent
    /// refines it: each round tries moving either edge inward or outward by
    /// the step and takes the best strict improvement, halving the step when
    /// none exists, until the step drops below one bin. On histograms with
    /// at most `COARSE_EDGES` bins the scan is already exhaustive.
    pub fn search_range(&self, bits: u32) -> (usize, usize) {
        let n = self.bins;
        if n == 1 {
            return (0, 1);
        }
        let g = n.min(COARSE_EDGES);
        let edge = |k: usize| (k * n + g / 2) / g;
        let (mut lo, mut hi) = (0usize, n);
        let mut best = self.estimated_mse(lo, hi, bits);
        for a in 0..g {
            for b in a + 1..=g {
                let (l, h) = (edge(a), edge(b));
                if l >= h {
                    continue;
                }
                let mse = self.estimated_mse(l, h, bits);
                if mse < best {
                    (lo, hi, best) = (l, h, mse);
                }
            }
        }
        let mut step = (n / g).max(1);
        loop {
            let candidates = [
                (lo.checked_add(step), Some(hi)),
                (lo.checked_sub(step), Some(hi)),
                (Some(lo), hi.checked_sub(step)),
                (Some(lo), hi.checked_add(step)),
            ];
            let mut improved = None;
            for (l, h) in candidates {
                let (Some(l), Some(h)) = (l, h) else { continue };
                if l >= h || h > n {
                    continue;
                }
                let mse = self.estimated_mse(l, h, bits);
                if mse < best && improved.is_none_or(|(_, _, m)| mse < m) {
                    improved = Some((l, h, mse));
                }
            }
            match improved {
                Some((l, h, mse)) => {
                    lo = l;
                    hi = h;
                    best = mse;
                }
                None => {
                    step /= 2;
                    if step < 1 {
                        break;
                    }
                }
            }
        }
        (lo, hi)
    }

    /// Asymmetric unsigned grid for the clip range `[a, b]`.
    pub fn params_for_range(a: f64, b: f64, bits: u32) -> Result<QuantParams> {
        let (_, q_max) = int_range(Scheme::AsymmetricUnsigned, bits);
        let a = a.min(0.0);
        let b = b.max(0.0);
        let mut scale = ((b - a) / q_max as f64) as f32;
        if scale.is_nan() || scale <= 0.0 {
            scale = 1.0;
        }
        let z = (-a / scale as f64)
            .round_ties_even()
            .clamp(0.0, q_max as f64) as i32;
        QuantParams::asymmetric(scale, z, bits)
    }
}

/// Activation grid minimizing the observer's estimated quantization MSE.
pub fn activation_params_histogram(h: &HistogramObserver, bits: u32) -> Result<QuantParams> {
    super::check_bits(bits)?;
    if h.is_empty() {
        return Err(QuantError::EmptyObserver);
    }
    let (lo, hi) = h.search_range(bits);
    let (a, b) = h.clip_range(lo, hi);
    HistogramObserver::params_for_range(a, b, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_range_arithmetic() {
        let p = HistogramObserver::params_for_range(-1.0, 3.0, 8).unwrap();
        assert!((p.scale - 4.0 / 255.0).abs() < 1e-9);
        assert!((p.scale - 0.0156863).abs() < 1e-7);
        assert_eq!(p.zero_point, 64);
    }

    #[test]
    fn range_is_widened_to_zero() {
        let p = HistogramObserver::params_for_range(2.0, 4.0, 8).unwrap();
        assert_eq!(p.zero_point, 0);
        assert_eq!(p.fake(0.0), 0.0);
        let p = HistogramObserver::params_for_range(-5.0, -1.0, 8).unwrap();
        assert_eq!(p.zero_point, 255);
        assert_eq!(p.fake(0.0), 0.0);
    }

    #[test]
    fn empty_observer_rejected() {
        let h = HistogramObserver::new(16);
        assert_eq!(
            activation_params_histogram(&h, 8).unwrap_err(),
            QuantError::EmptyObserver
        );
    }

    #[test]
    fn single_batch_mass_and_range() {
        let mut h = HistogramObserver::new(64);
        let vals: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        h.observe(&vals).unwrap();
        assert_eq!(h.total_mass(), 1000);
        assert_eq!(h.counts().iter().sum::<u64>(), 1000);
        assert_eq!(h.min(), vals.iter().copied().fold(f32::INFINITY, f32::min));
        assert_eq!(
            h.max(),
            vals.iter().copied().fold(f32::NEG_INFINITY, f32::max)
        );
    }

    #[test]
    fn widening_preserves_mass() {
        let mut h = HistogramObserver::new(32);
        h.observe(&[0.0, 0.5, 1.0]).unwrap();
        h.observe(&[-4.0, 9.0]).unwrap();
        h.observe(&[2.0]).unwrap();
        assert_eq!(h.total_mass(), 6);
        assert_eq!(h.counts().iter().sum::<u64>(), 6);
        assert_eq!((h.min(), h.max()), (-4.0, 9.0));
    }

    #[test]
    fn point_mass_is_bracketed() {
        let mut counts = vec![0u64; 16];
        counts[5] = 1000;
        let h = HistogramObserver::from_counts(0.0, 16.0, counts).unwrap();
        let (lo, hi) = h.search_range(8);
        let (a, b) = h.clip_range(lo, hi);
        assert!(a <= 5.5 && 5.5 <= b, "[{a}, {b}]");
        assert!(h.estimated_mse(lo, hi, 8) <= h.estimated_mse(0, 16, 8));
        let p = activation_params_histogram(&h, 8).unwrap();
        let (ra, rb) = p.range();
        assert!(ra <= 5.5 && 5.5 <= rb);
    }

    #[test]
    fn constant_zero_activations() {
        let mut h = HistogramObserver::new(8);
        h.observe(&[0.0; 10]).unwrap();
        let p = activation_params_histogram(&h, 8).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.fake(0.0), 0.0);
    }

    #[test]
    fn outlier_gets_clipped() {
        let mut vals = vec![0.0f32; 0];
        for i in 0..10_000 {
            vals.push((i % 100) as f32 / 100.0);
        }
        vals.push(1000.0);
        let mut h = HistogramObserver::new(DEFAULT_BINS);
        h.observe(&vals).unwrap();
        // Minimizing (h/15)^2/12 + (1000 - h)^2/10001 over the upper edge h
        // gives h = 1000 * 1350 / 6350.
        let p = activation_params_histogram(&h, 4).unwrap();
        let optimum = 1000.0 * 1350.0 / 6350.0;
        assert!(
            (p.range().1 as f64 - optimum).abs() < 2.0,
            "{:?}",
            p.range()
        );
        let p8 = activation_params_histogram(&h, 8).unwrap();
        assert!(p8.range().1 > p.range().1);
    }
}
