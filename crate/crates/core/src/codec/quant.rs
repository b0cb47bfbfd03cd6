//! Clipped 8-bit uniform quantization over a 3-sigma interval.

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const BITS: u32 = 8;
pub const LEVELS: u32 = (1 << BITS) - 1;
pub const CLIP_SIGMAS: f32 = 3.0;

/// Quantization interval `[lo, hi] = [mu - 3 sigma, mu + 3 sigma]`.
///
/// Only the endpoints are stored (they are what travels on the wire);
/// `mu` and `sigma` are recovered from them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    lo: f32,
    hi: f32,
}

impl QuantParams {
    pub fn from_moments(mu: f32, sigma: f32) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid moments mu={mu}, sigma={sigma}"
            )));
        }
        if sigma == 0.0 {
            return Ok(Self { lo: mu, hi: mu });
        }
        Self::from_interval(mu - CLIP_SIGMAS * sigma, mu + CLIP_SIGMAS * sigma)
    }

    pub fn from_interval(lo: f32, hi: f32) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// The analytic post-BatchNorm interval, N(0, 1) clipped at 3 sigma.
    pub fn standard_normal() -> Self {
        Self { lo: -3.0, hi: 3.0 }
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    pub fn mu(&self) -> f32 {
        if self.lo == self.hi {
            self.lo
        } else {
            ((f64::from(self.lo) + f64::from(self.hi)) / 2.0) as f32
        }
    }

    pub fn sigma(&self) -> f32 {
        ((f64::from(self.hi) - f64::from(self.lo)) / (2.0 * f64::from(CLIP_SIGMAS))) as f32
    }

    /// Width of one quantization step.
    pub fn step(&self) -> f64 {
        (f64::from(self.hi) - f64::from(self.lo)) / f64::from(LEVELS)
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> u8 {
        if self.is_degenerate() {
            return 0;
        }
        let (lo, hi) = (f64::from(self.lo), f64::from(self.hi));
        // NaN clips to lo; the clamp also absorbs +-inf.
        let x = if x.is_nan() { lo } else { f64::from(x).clamp(lo, hi) };
        let code = ((x - lo) / (hi - lo) * f64::from(LEVELS)).round();
        code.clamp(0.0, f64::from(LEVELS)) as u8
    }

    #[inline]
    pub fn dequantize_value(&self, code: u8) -> f32 {
        if self.is_degenerate() {
            return self.lo;
        }
        let (lo, hi) = (f64::from(self.lo), f64::from(self.hi));
        (lo + f64::from(code) * (hi - lo) / f64::from(LEVELS)) as f32
    }
}

/// Population mean and standard deviation over every element of every tensor.
pub fn estimate_quant_params<'a, I>(activations: I) -> Result<QuantParams>
where
    I: IntoIterator<Item = &'a Tensor>,
    I::IntoIter: Clone,
{
    let iter = activations.into_iter();
    let mut n = 0usize;
    let mut sum = 0f64;
    for t in iter.clone() {
        n += t.len();
        sum += t.data().iter().map(|&v| f64::from(v)).sum::<f64>();
    }
    if n == 0 {
        return Err(Error::Empty("no activation values to estimate from"));
    }
    let mean = sum / n as f64;
    let sq: f64 = iter
        .flat_map(|t| t.data().iter())
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum();
    let sigma = (sq / n as f64).sqrt();
    QuantParams::from_moments(mean as f32, sigma as f32)
}

/// One byte per element: clip to `[lo, hi]`, scale to `0..=255`, round half
/// away from zero. A degenerate interval maps everything to code 0.
pub fn quantize(t: &Tensor, q: &QuantParams) -> Vec<u8> {
    t.data().iter().map(|&x| q.quantize_value(x)).collect()
}

pub fn dequantize(codes: &[u8], shape: &[usize], q: &QuantParams) -> Result<Tensor> {
    let n = checked_numel(shape)?;
    if codes.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} codes for shape {shape:?} ({n} elements)",
            codes.len()
        )));
    }
    Tensor::new(shape.to_vec(), codes.iter().map(|&c| q.dequantize_value(c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn endpoints_clipping_and_midpoint() {
        let q = QuantParams::standard_normal();
        assert_eq!(quantize(&t(&[-3.0, 3.0, 10.0, -10.0, 0.0]), &q), vec![0, 255, 255, 0, 128]);
        assert_eq!(q.dequantize_value(0), -3.0);
        assert_eq!(q.dequantize_value(255), 3.0);
    }

    #[test]
    fn constant_input_degenerates() {
        let q = estimate_quant_params([&t(&[2.5; 7])]).unwrap();
        assert_eq!((q.mu(), q.sigma(), q.lo(), q.hi()), (2.5, 0.0, 2.5, 2.5));
        assert_eq!(quantize(&t(&[2.5, 9.0]), &q), vec![0, 0]);
        assert_eq!(dequantize(&[0, 0], &[2], &q).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn symmetric_pair_statistics() {
        let q = estimate_quant_params([&t(&[-1.0, 1.0, -1.0, 1.0])]).unwrap();
        assert_eq!((q.mu(), q.sigma(), q.lo(), q.hi()), (0.0, 1.0, -3.0, 3.0));
    }

    #[test]
    fn empty_and_length_errors() {
        let none: Vec<&Tensor> = Vec::new();
        assert!(matches!(estimate_quant_params(none), Err(Error::Empty(_))));
        assert!(dequantize(&[1, 2], &[3], &QuantParams::standard_normal()).is_err());
    }
}
