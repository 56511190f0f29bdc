//! Uniform q-bit quantization of node outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `2^bits` equal-width bins over `[lo, hi]`; values outside are clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub lo: f64,
    pub hi: f64,
}

impl QuantizerSpec {
    pub fn new(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(Error::Invalid(format!("quantizer bits must be in 1..=24, got {bits}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Invalid(format!("quantizer range [{lo}, {hi}] is empty")));
        }
        Ok(Self { bits, lo, hi })
    }

    /// Range of a sigmoid output.
    pub fn unit(bits: u32) -> Result<Self> {
        Self::new(bits, 0.0, 1.0)
    }

    /// Range of a tanh-bounded LSTM hidden state.
    pub fn symmetric(bits: u32) -> Result<Self> {
        Self::new(bits, -1.0, 1.0)
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.levels() as f64
    }

    pub fn clip<T: Scalar>(&self, x: T) -> T {
        x.max(T::lit(self.lo)).min(T::lit(self.hi))
    }

    pub fn level<T: Scalar>(&self, x: T) -> u32 {
        let lo = T::lit(self.lo);
        let span = T::lit(self.hi) - lo;
        let n = self.levels();
        let scaled = ((self.clip(x) - lo) / span * T::lit(n as f64)).floor();
        // NaN maps to level 0; `hi` itself lands in the top bin
        let idx = scaled.to_u64().unwrap_or(0);
        idx.min(n - 1) as u32
    }

    pub fn dequantize<T: Scalar>(&self, level: u32) -> T {
        T::lit(self.lo) + (T::lit(level as f64) + T::lit(0.5)) * T::lit(self.bin_width())
    }

    /// Quantize then reconstruct at the bin center.
    pub fn round_trip<T: Scalar>(&self, x: T) -> T {
        self.dequantize(self.level(x))
    }

    /// Whether the straight-through surrogate passes gradient at `x`.
    pub fn in_range<T: Scalar>(&self, x: T) -> bool {
        x >= T::lit(self.lo) && x <= T::lit(self.hi)
    }
}

/// Integer levels plus the values a receiver reconstructs from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized<T> {
    pub levels: Vec<u32>,
    pub dequantized: Tensor<T>,
}

pub fn quantize<T: Scalar>(spec: &QuantizerSpec, x: &Tensor<T>) -> Quantized<T> {
    let levels: Vec<u32> = x.data().iter().map(|&v| spec.level(v)).collect();
    let dequantized = dequantize(spec, x.shape(), &levels);
    Quantized { levels, dequantized }
}

pub fn dequantize<T: Scalar>(spec: &QuantizerSpec, shape: &[usize], levels: &[u32]) -> Tensor<T> {
    Tensor::new(shape.to_vec(), levels.iter().map(|&l| spec.dequantize(l)).collect())
        .expect("levels match shape")
}
