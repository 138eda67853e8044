//! Fixed-point quantization and binary/Gray code words.
//!
//! A [`QuantSpec`] maps real function outputs onto `2^n_bits` levels and fixes the
//! bit encoding used by the ACAM arrays. Bits are always ordered MSB first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Binary,
    Gray,
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "b" => Ok(Encoding::Binary),
            "gray" | "g" => Ok(Encoding::Gray),
            other => Err(Error::Config(format!("unknown encoding `{other}`"))),
        }
    }
}

/// Spacing of the output levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelScale {
    /// Levels evenly spaced over `[out_lo, out_hi]`.
    #[default]
    Linear,
    /// Levels evenly spaced in `ln` over `[out_lo, out_hi]`; requires `out_lo > 0`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec<T> {
    pub in_lo: T,
    pub in_hi: T,
    pub out_lo: T,
    pub out_hi: T,
    pub n_bits: u32,
    pub encoding: Encoding,
    #[serde(default)]
    pub scale: LevelScale,
}

impl<T: Scalar> QuantSpec<T> {
    pub fn new(in_lo: T, in_hi: T, out_lo: T, out_hi: T, n_bits: u32, encoding: Encoding) -> Result<Self> {
        let q = Self { in_lo, in_hi, out_lo, out_hi, n_bits, encoding, scale: LevelScale::Linear };
        q.validate()?;
        Ok(q)
    }

    pub fn with_scale(mut self, scale: LevelScale) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.in_lo, self.in_hi, self.out_lo, self.out_hi].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidQuantSpec("bounds must be finite".into()));
        }
        if !(self.in_lo < self.in_hi) {
            return Err(Error::InvalidQuantSpec(format!("in_lo {} >= in_hi {}", self.in_lo, self.in_hi)));
        }
        if !(self.out_lo < self.out_hi) {
            return Err(Error::InvalidQuantSpec(format!("out_lo {} >= out_hi {}", self.out_lo, self.out_hi)));
        }
        if !(1..=16).contains(&self.n_bits) {
            return Err(Error::InvalidQuantSpec(format!("n_bits {} outside 1..=16", self.n_bits)));
        }
        if self.scale == LevelScale::Log && self.out_lo <= T::zero() {
            return Err(Error::InvalidQuantSpec("log-spaced levels need out_lo > 0".into()));
        }
        Ok(())
    }

    /// Number of output levels, `2^n_bits`.
    pub fn levels(&self) -> u32 {
        1 << self.n_bits
    }

    pub fn max_level(&self) -> u32 {
        self.levels() - 1
    }

    /// Distance between adjacent levels (in `ln` units for log-spaced specs).
    pub fn step(&self) -> T {
        let (lo, hi) = self.span();
        (hi - lo) / T::of(self.max_level() as f64)
    }

    fn span(&self) -> (T, T) {
        match self.scale {
            LevelScale::Linear => (self.out_lo, self.out_hi),
            LevelScale::Log => (self.out_lo.ln(), self.out_hi.ln()),
        }
    }

    /// Level index of `v` after clamping to the output range, rounding half to even.
    pub fn level(&self, v: T) -> Result<u32> {
        if !v.is_finite() {
            return Err(Error::Domain(format!("cannot quantize non-finite value {v}")));
        }
        let v = v.max(self.out_lo).min(self.out_hi);
        let (lo, hi) = self.span();
        let t = match self.scale {
            LevelScale::Linear => v,
            LevelScale::Log => v.ln(),
        };
        let scaled = (t - lo) * T::of(self.max_level() as f64) / (hi - lo);
        let k = scaled.round_half_even().max(T::zero()).min(T::of(self.max_level() as f64));
        Ok(k.to_u32().unwrap_or(0))
    }

    /// Real value represented by a level index.
    pub fn level_value(&self, level: u32) -> T {
        let level = level.min(self.max_level());
        if level == self.max_level() {
            return self.out_hi;
        }
        let (lo, _) = self.span();
        let t = lo + T::of(level as f64) * self.step();
        match self.scale {
            LevelScale::Linear => t,
            LevelScale::Log => t.exp(),
        }
    }

    /// Encoded integer for a level, per this spec's encoding.
    pub fn encode_level(&self, level: u32) -> u32 {
        match self.encoding {
            Encoding::Binary => level,
            Encoding::Gray => gray_encode(level),
        }
    }

    /// Level for an encoded integer, per this spec's encoding.
    pub fn decode_code(&self, code: u32) -> u32 {
        match self.encoding {
            Encoding::Binary => code,
            Encoding::Gray => gray_decode(code),
        }
    }

    /// Clamp an input into `[in_lo, in_hi]`.
    pub fn clamp_input(&self, x: T) -> T {
        x.max(self.in_lo).min(self.in_hi)
    }
}

/// Ordered bit vector, MSB first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeWord {
    pub bits: Vec<bool>,
    pub encoding: Encoding,
}

impl CodeWord {
    pub fn from_value(value: u32, n_bits: u32, encoding: Encoding) -> Self {
        let bits = (0..n_bits).rev().map(|i| (value >> i) & 1 == 1).collect();
        Self { bits, encoding }
    }

    pub fn value(&self) -> u32 {
        self.bits.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bit `i` counted from the LSB.
    pub fn bit(&self, i: usize) -> bool {
        self.bits[self.bits.len() - 1 - i]
    }
}

impl std::fmt::Display for CodeWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        f.write_str(match self.encoding {
            Encoding::Binary => "b",
            Encoding::Gray => "g",
        })
    }
}

#[inline]
pub fn gray_encode(b: u32) -> u32 {
    b ^ (b >> 1)
}

#[inline]
pub fn gray_decode(mut g: u32) -> u32 {
    let mut mask = g >> 1;
    while mask != 0 {
        g ^= mask;
        mask >>= 1;
    }
    g
}

pub fn quantize<T: Scalar>(v: T, q: &QuantSpec<T>) -> Result<CodeWord> {
    let level = q.level(v)?;
    Ok(CodeWord::from_value(q.encode_level(level), q.n_bits, q.encoding))
}

pub fn dequantize<T: Scalar>(c: &CodeWord, q: &QuantSpec<T>) -> Result<T> {
    if c.len() != q.n_bits as usize {
        return Err(Error::CodeLength { expected: q.n_bits as usize, got: c.len() });
    }
    let level = match c.encoding {
        Encoding::Binary => c.value(),
        Encoding::Gray => gray_decode(c.value()),
    };
    Ok(q.level_value(level))
}

pub fn binary_to_gray(b: &CodeWord) -> Result<CodeWord> {
    if b.encoding != Encoding::Binary {
        return Err(Error::WrongEncoding { expected: Encoding::Binary, got: b.encoding });
    }
    // g_{n-1} = b_{n-1}; g_i = b_{i+1} ^ b_i
    let bits = b
        .bits
        .iter()
        .enumerate()
        .map(|(k, &bit)| if k == 0 { bit } else { b.bits[k - 1] ^ bit })
        .collect();
    Ok(CodeWord { bits, encoding: Encoding::Gray })
}

pub fn gray_to_binary(g: &CodeWord) -> Result<CodeWord> {
    if g.encoding != Encoding::Gray {
        return Err(Error::WrongEncoding { expected: Encoding::Gray, got: g.encoding });
    }
    // y_i = XOR(g_{n-1}, ..., g_i): a running parity from the MSB
    let mut parity = false;
    let bits = g
        .bits
        .iter()
        .map(|&bit| {
            parity ^= bit;
            parity
        })
        .collect();
    Ok(CodeWord { bits, encoding: Encoding::Binary })
}
