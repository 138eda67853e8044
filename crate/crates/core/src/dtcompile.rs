//! Compile a scalar function into one interval set per output bit.
//!
//! A single-feature decision tree that memorizes every toggle of an output bit is
//! exactly a union of closed intervals, so that is the canonical form used here.
//! Toggle points are located by a dense grid scan and then refined by bisection
//! until the bracketing points are adjacent floats, which makes the compiled
//! function agree with `quantize(f(x))` on every float the scan did not skip.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::{CodeWord, Encoding, QuantSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default grid resolution, `2^18` cells.
pub const DEFAULT_GRID_LOG2: u32 = 18;

/// Points used by [`compile_fixed_mse`].
pub const MSE_POINTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    #[inline]
    pub fn contains(&self, x: T) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Where one output bit equals 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitIntervalSet<T> {
    /// Bit position counted from the LSB.
    pub bit_index: usize,
    pub intervals: Vec<Interval<T>>,
    pub encoding: Encoding,
}

impl<T: Scalar> BitIntervalSet<T> {
    pub fn row_count(&self) -> usize {
        self.intervals.len()
    }

    pub fn contains(&self, x: T) -> bool {
        // intervals are sorted and disjoint
        let idx = self.intervals.partition_point(|iv| iv.hi < x);
        self.intervals.get(idx).is_some_and(|iv| iv.contains(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledFunction<T> {
    pub name: String,
    pub qspec: QuantSpec<T>,
    /// One set per output bit, MSB first.
    pub bits: Vec<BitIntervalSet<T>>,
}

impl<T: Scalar> CompiledFunction<T> {
    /// Encoded output integer at `x` (clamped into the domain).
    pub fn code_at(&self, x: T) -> u32 {
        let x = self.qspec.clamp_input(x);
        self.bits.iter().fold(0u32, |acc, b| (acc << 1) | b.contains(x) as u32)
    }

    /// Output level at `x`.
    pub fn level_at(&self, x: T) -> u32 {
        self.qspec.decode_code(self.code_at(x))
    }

    /// Dequantized output at `x`.
    pub fn value_at(&self, x: T) -> T {
        self.qspec.level_value(self.level_at(x))
    }

    pub fn total_rows(&self) -> usize {
        self.bits.iter().map(BitIntervalSet::row_count).sum()
    }

    /// Set for the bit at `bit_index` (counted from the LSB).
    pub fn bit(&self, bit_index: usize) -> &BitIntervalSet<T> {
        &self.bits[self.bits.len() - 1 - bit_index]
    }
}

/// Built-in scalar functions with default compilation domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinFn {
    Sigmoid,
    Tanh,
    Silu,
    Gelu,
    Relu,
    Identity,
    Log,
    Exp,
}

impl BuiltinFn {
    pub const ALL: [BuiltinFn; 8] = [
        BuiltinFn::Sigmoid,
        BuiltinFn::Tanh,
        BuiltinFn::Silu,
        BuiltinFn::Gelu,
        BuiltinFn::Relu,
        BuiltinFn::Identity,
        BuiltinFn::Log,
        BuiltinFn::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinFn::Sigmoid => "sigmoid",
            BuiltinFn::Tanh => "tanh",
            BuiltinFn::Silu => "silu",
            BuiltinFn::Gelu => "gelu",
            BuiltinFn::Relu => "relu",
            BuiltinFn::Identity => "identity",
            BuiltinFn::Log => "log",
            BuiltinFn::Exp => "exp",
        }
    }

    /// Non-decreasing over its default domain.
    pub fn is_monotone(self) -> bool {
        !matches!(self, BuiltinFn::Silu | BuiltinFn::Gelu)
    }

    pub fn eval<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            BuiltinFn::Sigmoid => one / (one + (-x).exp()),
            BuiltinFn::Tanh => x.tanh(),
            BuiltinFn::Silu => x / (one + (-x).exp()),
            BuiltinFn::Gelu => {
                // tanh form of GELU
                let c = (T::of(2.0) / T::PI()).sqrt();
                T::of(0.5) * x * (one + (c * (x + T::of(0.044715) * x * x * x)).tanh())
            }
            BuiltinFn::Relu => x.max(T::zero()),
            BuiltinFn::Identity => x,
            BuiltinFn::Log => x.ln(),
            BuiltinFn::Exp => x.exp(),
        }
    }

    /// Default input domain; tails saturate and `log` excludes zero.
    ///
    /// SiLU and GELU start at their minimum: the dip below it adds runs that
    /// overflow the per-bit ACAM provisioning.
    pub fn default_domain<T: Scalar>(self, n_bits: u32) -> (T, T) {
        match self {
            BuiltinFn::Sigmoid | BuiltinFn::Tanh => (T::of(-8.0), T::of(8.0)),
            BuiltinFn::Silu | BuiltinFn::Gelu => (argmin(|x| self.eval(x), T::of(-3.0), T::zero()), T::of(8.0)),
            BuiltinFn::Relu | BuiltinFn::Identity => (-T::one(), T::one()),
            BuiltinFn::Log => (T::of(2f64.powi(-(n_bits as i32))), T::one()),
            BuiltinFn::Exp => (T::of(-8.0), T::zero()),
        }
    }

    /// Default quantization spec over [`Self::default_domain`].
    pub fn default_qspec<T: Scalar>(self, n_bits: u32, encoding: Encoding) -> QuantSpec<T> {
        let (lo, hi) = self.default_domain::<T>(n_bits);
        let (out_lo, out_hi) = match self {
            BuiltinFn::Sigmoid | BuiltinFn::Exp => (T::zero(), T::one()),
            BuiltinFn::Tanh | BuiltinFn::Identity => (-T::one(), T::one()),
            BuiltinFn::Relu => (T::zero(), T::one()),
            BuiltinFn::Log => (lo.ln(), hi.ln()),
            BuiltinFn::Silu | BuiltinFn::Gelu => output_range(|x| self.eval(x), lo, hi),
        };
        QuantSpec::new(lo, hi, out_lo, out_hi, n_bits, encoding).expect("built-in spec is valid")
    }

    pub fn compile<T: Scalar>(self, q: &QuantSpec<T>) -> Result<CompiledFunction<T>> {
        compile_function(self.name(), |x| self.eval(x), q)
    }
}

impl std::str::FromStr for BuiltinFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuiltinFn::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown function `{s}`")))
    }
}

/// Golden-section minimizer of a unimodal `f` on `[lo, hi]`.
pub fn argmin<T: Scalar, F: Fn(T) -> T>(f: F, mut lo: T, mut hi: T) -> T {
    let r = T::of((5f64.sqrt() - 1.0) / 2.0);
    for _ in 0..200 {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if a >= b {
            break;
        }
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    T::midpoint(lo, hi)
}

/// Min and max of `f` over a dense grid of `[lo, hi]`.
pub fn output_range<T: Scalar, F: Fn(T) -> T>(f: F, lo: T, hi: T) -> (T, T) {
    let n = 1 << 16;
    (0..=n).fold((T::infinity(), T::neg_infinity()), |(mn, mx), k| {
        let x = lo + (hi - lo) * T::of(k as f64 / n as f64);
        let y = f(x);
        (mn.min(y), mx.max(y))
    })
}

/// A code change located to float adjacency: `left` carries `from`, `right` carries `to`.
#[derive(Debug, Clone, Copy)]
struct Toggle<T> {
    left: T,
    right: T,
    to: u32,
}

struct Coder<'a, T, F> {
    f: &'a F,
    q: &'a QuantSpec<T>,
}

impl<T: Scalar, F: Fn(T) -> T> Coder<'_, T, F> {
    fn code(&self, x: T) -> Result<u32> {
        let y = (self.f)(x);
        if !y.is_finite() {
            return Err(Error::NonFinite { x: x.f64() });
        }
        Ok(self.q.encode_level(self.q.level(y)?))
    }

    fn refine(&self, a: T, ca: u32, b: T, cb: u32, out: &mut Vec<Toggle<T>>) -> Result<()> {
        if ca == cb {
            return Ok(());
        }
        let m = T::midpoint(a, b);
        if m <= a || m >= b {
            out.push(Toggle { left: a, right: b, to: cb });
            return Ok(());
        }
        let cm = self.code(m)?;
        self.refine(a, ca, m, cm, out)?;
        self.refine(m, cm, b, cb, out)
    }
}

pub fn compile_function<T, F>(name: &str, f: F, q: &QuantSpec<T>) -> Result<CompiledFunction<T>>
where
    T: Scalar,
    F: Fn(T) -> T + Sync,
{
    compile_function_with_grid(name, f, q, DEFAULT_GRID_LOG2)
}

pub fn compile_function_with_grid<T, F>(name: &str, f: F, q: &QuantSpec<T>, grid_log2: u32) -> Result<CompiledFunction<T>>
where
    T: Scalar,
    F: Fn(T) -> T + Sync,
{
    q.validate()?;
    let cells = 1usize << grid_log2;
    let span = q.in_hi - q.in_lo;
    let grid_x = |k: usize| {
        if k == cells {
            q.in_hi
        } else {
            q.in_lo + span * T::of(k as f64) / T::of(cells as f64)
        }
    };
    let coder = Coder { f: &f, q };
    let codes: Vec<u32> = (0..=cells).into_par_iter().map(|k| coder.code(grid_x(k))).collect::<Result<_>>()?;

    let mut toggles = Vec::new();
    for k in 0..cells {
        if codes[k] != codes[k + 1] {
            coder.refine(grid_x(k), codes[k], grid_x(k + 1), codes[k + 1], &mut toggles)?;
        }
    }

    // constant-code segments [start, end] covering the domain
    let mut segments = Vec::with_capacity(toggles.len() + 1);
    let mut start = q.in_lo;
    let mut code = codes[0];
    for t in &toggles {
        segments.push((start, t.left, code));
        start = t.right;
        code = t.to;
    }
    segments.push((start, q.in_hi, code));

    let n = q.n_bits as usize;
    let bits = (0..n)
        .rev()
        .map(|bit_index| {
            let mut intervals: Vec<Interval<T>> = Vec::new();
            let mut open: Option<Interval<T>> = None;
            for &(s, e, c) in &segments {
                if (c >> bit_index) & 1 == 1 {
                    open = Some(match open {
                        Some(iv) => Interval { lo: iv.lo, hi: e },
                        None => Interval { lo: s, hi: e },
                    });
                } else if let Some(iv) = open.take() {
                    intervals.push(iv);
                }
            }
            intervals.extend(open);
            BitIntervalSet { bit_index, intervals, encoding: q.encoding }
        })
        .collect();

    Ok(CompiledFunction { name: name.to_string(), qspec: *q, bits })
}

/// Row count per bit, MSB first.
pub fn row_counts<T: Scalar>(c: &CompiledFunction<T>) -> Vec<usize> {
    c.bits.iter().map(BitIntervalSet::row_count).collect()
}

/// Code word produced by the compiled trees at `x`.
pub fn eval_compiled<T: Scalar>(c: &CompiledFunction<T>, x: T) -> CodeWord {
    CodeWord::from_value(c.code_at(x), c.qspec.n_bits, c.qspec.encoding)
}

/// Mean squared error of the dequantized compiled output against `f` on a uniform grid.
pub fn compile_fixed_mse<T: Scalar, F: Fn(T) -> T>(c: &CompiledFunction<T>, f: F) -> T {
    let q = &c.qspec;
    let n = MSE_POINTS;
    let total: f64 = (0..n)
        .map(|k| {
            let x = q.in_lo + (q.in_hi - q.in_lo) * T::of(k as f64 / (n - 1) as f64);
            let d = (c.value_at(x) - f(x)).f64();
            d * d
        })
        .sum();
    T::of(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::quantize;

    fn gray8(f: BuiltinFn) -> CompiledFunction<f64> {
        f.compile(&f.default_qspec(8, Encoding::Gray)).unwrap()
    }

    #[test]
    fn identity_gray_row_counts() {
        let c = gray8(BuiltinFn::Identity);
        assert_eq!(row_counts(&c), vec![1, 1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(c.total_rows(), 128);
        assert_eq!(c.bit(0).row_count(), 64);
    }

    #[test]
    fn constant_zero_has_no_rows() {
        let q = QuantSpec::new(-1.0, 1.0, 0.0, 1.0, 8, Encoding::Gray).unwrap();
        let c = compile_function("zero", |_| 0.0, &q).unwrap();
        assert!(row_counts(&c).iter().all(|&n| n == 0));
        assert_eq!(compile_fixed_mse(&c, |_| 0.0), 0.0);
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let q = QuantSpec::new(-1.0, 1.0, -5.0, 5.0, 8, Encoding::Gray).unwrap();
        let err = compile_function("ln", |x: f64| x.ln(), &q).unwrap_err();
        match err {
            Error::NonFinite { x } => assert!(x <= 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigmoid_three_bit_worked_example() {
        let q = QuantSpec::new(-8.0, 8.0, 0.0, 1.0, 3, Encoding::Binary).unwrap();
        let c = BuiltinFn::Sigmoid.compile(&q).unwrap();
        let y1 = c.bit(1);
        assert_eq!(y1.row_count(), 2);
        // the upper run of y1 starts where the level moves 5 -> 6
        let toggle: f64 = y1.intervals[1].lo;
        assert!((toggle - 1.28).abs() < 0.03, "toggle at {toggle}");
        let g = BuiltinFn::Sigmoid.compile(&q.with_encoding(Encoding::Gray)).unwrap();
        assert_eq!(g.bit(1).row_count(), 1);
    }

    #[test]
    fn identity_at_domain_start_is_zero() {
        let c = gray8(BuiltinFn::Identity);
        assert_eq!(eval_compiled(&c, -1.0).value(), 0);
        assert_eq!(eval_compiled(&c, -7.0).value(), 0);
    }

    #[test]
    fn exact_against_direct_quantization() {
        for f in BuiltinFn::ALL {
            let q = f.default_qspec::<f64>(8, Encoding::Gray);
            let c = f.compile(&q).unwrap();
            for k in 0..2_000 {
                let x = q.in_lo + (q.in_hi - q.in_lo) * (k as f64 * 0.618_033_988_7).fract();
                assert_eq!(eval_compiled(&c, x), quantize(f.eval(x), &q).unwrap(), "{} at {x}", f.name());
            }
        }
    }

    #[test]
    fn intervals_sorted_disjoint_in_domain() {
        for f in BuiltinFn::ALL {
            let c = gray8(f);
            for b in &c.bits {
                for w in b.intervals.windows(2) {
                    assert!(w[0].hi < w[1].lo);
                }
                for iv in &b.intervals {
                    assert!(iv.lo <= iv.hi && iv.lo >= c.qspec.in_lo && iv.hi <= c.qspec.in_hi);
                }
            }
        }
    }

    #[test]
    fn identity_mse_matches_uniform_quantizer_noise() {
        let c = gray8(BuiltinFn::Identity);
        let step = c.qspec.step();
        let mse = compile_fixed_mse(&c, |x| x);
        let want = step * step / 12.0;
        assert!((mse - want).abs() / want < 0.05, "mse {mse} want {want}");
    }

    #[test]
    fn builtin_names_roundtrip() {
        for f in BuiltinFn::ALL {
            assert_eq!(f.name().parse::<BuiltinFn>().unwrap(), f);
        }
        assert!("softplus".parse::<BuiltinFn>().is_err());
    }

    #[test]
    fn compiles_in_single_precision() {
        let q = BuiltinFn::Sigmoid.default_qspec::<f32>(8, Encoding::Gray);
        let c = BuiltinFn::Sigmoid.compile(&q).unwrap();
        assert_eq!(row_counts(&c), vec![1, 1, 2, 4, 8, 16, 32, 64]);
    }
}
