//! RRAM crossbar vector-matrix multiply with digital or analog weight slicing.
//!
//! Signed weights live on differential arrays (positive and negative). Digital
//! slicing stores sign-magnitude fixed-point slices in separate columns and
//! recombines them with shift-and-add. Analog slicing stores each weight as one
//! continuous conductance plus a correction cell holding ten times the measured
//! programming residual.

use serde::{Deserialize, Serialize};

use crate::codes::{Encoding, QuantSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::noisefault::{
    clamp_g, g_range, programmed_conductance, read_conductance, Draw, FaultMode, FaultSite, FaultTarget, NoiseSpec, Site,
};
use crate::rng;
use crate::scalar::Scalar;

/// Largest supported logical array.
pub const MAX_DIM: usize = 256;

/// Scale of the residual correction cell.
pub const RESIDUAL_GAIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheme {
    /// `n_bits` sign-magnitude weights cut into `slice_bits`-wide slices.
    Dsl { n_bits: u32, slice_bits: u32 },
    Asl,
}

impl Scheme {
    pub fn slices(&self) -> usize {
        match *self {
            Scheme::Dsl { n_bits, slice_bits } => (n_bits as usize - 1).div_ceil(slice_bits as usize),
            Scheme::Asl => 1,
        }
    }

    /// Physical arrays: positive and negative, plus residual pairs for A-SL.
    pub fn arrays(&self) -> usize {
        match self {
            Scheme::Dsl { .. } => 2,
            Scheme::Asl => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarPin {
    pub array: u32,
    pub row: u32,
    pub col: u32,
    pub mode: FaultMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossbarImage<T> {
    pub id: u64,
    pub rows: usize,
    pub cols: usize,
    pub scheme: Scheme,
    /// Weight magnitude mapped to full conductance swing.
    pub w_max: T,
    /// Input magnitude used for column normalization.
    pub x_max: T,
    /// Programmed conductances per physical array, row-major `rows x phys_cols`.
    pub arrays: Vec<Vec<T>>,
    pub phys_cols: usize,
    /// Largest achievable |dot product| per logical column.
    pub col_scale: Vec<T>,
    /// Residuals whose correction cell saturated during programming.
    pub clamped: usize,
    /// Sorted by `(array, row, col)`.
    #[serde(default)]
    pub pins: Vec<CrossbarPin>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmmResult<T> {
    /// Column outputs over their full-scale value, in `[-1, 1]` for in-range inputs.
    pub analog_out: Vec<T>,
    /// Column outputs in weight-times-input units.
    pub dot: Vec<T>,
}

fn check_shape<T: Scalar>(w: &Matrix<T>) -> Result<()> {
    if w.rows == 0 || w.cols == 0 || w.rows > MAX_DIM || w.cols > MAX_DIM {
        return Err(Error::Dimension(format!("crossbar shape {}x{} outside 1..={MAX_DIM}", w.rows, w.cols)));
    }
    Ok(())
}

fn col_scale<T: Scalar>(w: &Matrix<T>, x_max: T) -> Vec<T> {
    (0..w.cols)
        .map(|j| {
            let s: T = (0..w.rows).map(|i| w[(i, j)].abs()).sum::<T>() * x_max;
            if s > T::zero() {
                s
            } else {
                T::one()
            }
        })
        .collect()
}

/// Sign-magnitude spec used for D-SL weights: `n_bits - 1` magnitude bits over `[0, w_max]`.
pub fn dsl_magnitude_spec<T: Scalar>(q: &QuantSpec<T>) -> Result<QuantSpec<T>> {
    let w_max = q.out_lo.abs().max(q.out_hi.abs());
    QuantSpec::new(T::zero(), w_max, T::zero(), w_max, q.n_bits.max(2) - 1, Encoding::Binary)
}

/// Weight a D-SL image stores for `w`.
pub fn dsl_quantize<T: Scalar>(w: T, mag: &QuantSpec<T>) -> Result<T> {
    let level = mag.level(w.abs())?;
    let v = mag.level_value(level);
    Ok(if w < T::zero() { -v } else { v })
}

impl<T: Scalar> CrossbarImage<T> {
    fn blank(id: u64, w: &Matrix<T>, scheme: Scheme, w_max: T, pins: &[CrossbarPin]) -> Self {
        let phys_cols = w.cols * scheme.slices();
        let g_lo = T::of(crate::noisefault::G_MIN);
        Self {
            id,
            rows: w.rows,
            cols: w.cols,
            scheme,
            w_max,
            x_max: T::one(),
            arrays: vec![vec![g_lo; w.rows * phys_cols]; scheme.arrays()],
            phys_cols,
            col_scale: col_scale(w, T::one()),
            clamped: 0,
            pins: pins.to_vec(),
        }
    }

    pub fn pin_at(&self, array: usize, row: usize, col: usize) -> Option<FaultMode> {
        self.pins
            .binary_search_by(|p| (p.array, p.row, p.col).cmp(&(array as u32, row as u32, col as u32)))
            .ok()
            .map(|i| self.pins[i].mode)
    }

    fn site(&self, array: usize, row: usize, col: usize) -> Site {
        Site { image: self.id, array: array as u32, row: row as u32, col: col as u32 }
    }

    /// Program a target conductance honoring pins; returns what the cell holds.
    fn write(&mut self, array: usize, row: usize, col: usize, target: T, noise: &NoiseSpec<T>) -> T {
        let g = match self.pin_at(array, row, col) {
            Some(mode) => mode.conductance(),
            None => programmed_conductance(target, noise, self.site(array, row, col)),
        };
        self.arrays[array][row * self.phys_cols + col] = g;
        g
    }

    /// Stored conductance of one device.
    pub fn g(&self, array: usize, row: usize, col: usize) -> T {
        self.arrays[array][row * self.phys_cols + col]
    }

    /// Stored conductance as seen by read cycle `read`.
    fn read_g(&self, array: usize, row: usize, col: usize, draw: Option<Draw<'_, T>>) -> T {
        let g = self.g(array, row, col);
        match draw {
            Some(d) if self.pin_at(array, row, col).is_none() => read_conductance(g, d.spec, self.site(array, row, col), d.read),
            _ => g,
        }
    }

    /// Noise-free effective weight stored at `(i, j)`.
    pub fn weight(&self, i: usize, j: usize) -> T {
        self.weight_read(i, j, None)
    }

    fn weight_read(&self, i: usize, j: usize, draw: Option<Draw<'_, T>>) -> T {
        let (g_lo, g_hi) = g_range::<T>();
        match self.scheme {
            Scheme::Dsl { n_bits, slice_bits } => {
                let levels = T::of(((1u32 << slice_bits) - 1) as f64);
                let dg = (g_hi - g_lo) / levels;
                let step = self.w_max / T::of(((1u32 << (n_bits - 1)) - 1) as f64);
                let s = self.scheme.slices();
                let mut mag = [T::zero(); 2];
                for (a, m) in mag.iter_mut().enumerate() {
                    for k in 0..s {
                        let v = (self.read_g(a, i, j * s + k, draw) - g_lo) / dg;
                        *m += v * T::of((1u64 << (k as u32 * slice_bits)) as f64);
                    }
                }
                (mag[0] - mag[1]) * step
            }
            Scheme::Asl => {
                let ratio = (g_hi - g_lo) / self.w_max;
                let p = self.read_g(0, i, j, draw) - self.read_g(1, i, j, draw);
                let r = self.read_g(2, i, j, draw) - self.read_g(3, i, j, draw);
                (p + r / T::of(RESIDUAL_GAIN)) / ratio
            }
        }
    }

    /// Noise-free effective weights.
    pub fn weights(&self) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.weight(i, j))
    }

    /// Effective weights seen by one noisy read cycle.
    pub fn weights_read(&self, draw: Option<Draw<'_, T>>) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.weight_read(i, j, draw))
    }

    pub fn with_x_max(mut self, x_max: T) -> Self {
        self.col_scale.iter_mut().for_each(|s| *s = *s / self.x_max * x_max);
        self.x_max = x_max;
        self
    }

    /// Identity weights for ACAM-only operation.
    pub fn identity(n: usize, noise: &NoiseSpec<T>, id: u64) -> Result<Self> {
        program_asl(&Matrix::identity(n), T::one(), noise, id)
    }
}

fn check_range<T: Scalar>(w: &Matrix<T>, w_max: T) -> Result<()> {
    let tol = w_max * T::of(1e-12);
    for i in 0..w.rows {
        for j in 0..w.cols {
            let v = w[(i, j)];
            if !v.is_finite() || v.abs() > w_max + tol {
                return Err(Error::WeightOutOfRange { row: i, col: j, value: v.f64(), lo: -w_max.f64(), hi: w_max.f64() });
            }
        }
    }
    Ok(())
}

/// Digital slicing with 1-bit slices.
pub fn program_dsl<T: Scalar>(w: &Matrix<T>, q: &QuantSpec<T>, noise: &NoiseSpec<T>, id: u64) -> Result<CrossbarImage<T>> {
    program_dsl_sliced(w, q, 1, noise, id, &[])
}

/// Digital slicing onto `slice_bits`-wide cells, honoring `pins`.
///
/// Slice levels are spaced uniformly in conductance over `[g_min, g_max]`.
pub fn program_dsl_sliced<T: Scalar>(
    w: &Matrix<T>,
    q: &QuantSpec<T>,
    slice_bits: u32,
    noise: &NoiseSpec<T>,
    id: u64,
    pins: &[CrossbarPin],
) -> Result<CrossbarImage<T>> {
    check_shape(w)?;
    if !(1..=8).contains(&slice_bits) {
        return Err(Error::Config(format!("slice width {slice_bits} outside 1..=8")));
    }
    let mag = dsl_magnitude_spec(q)?;
    let w_max = mag.out_hi;
    check_range(w, w_max)?;
    let scheme = Scheme::Dsl { n_bits: mag.n_bits + 1, slice_bits };
    let mut img = CrossbarImage::blank(id, w, scheme, w_max, pins);
    let (g_lo, g_hi) = g_range::<T>();
    let dg = (g_hi - g_lo) / T::of(((1u32 << slice_bits) - 1) as f64);
    let s = scheme.slices();
    let mask = (1u32 << slice_bits) - 1;
    for i in 0..w.rows {
        for j in 0..w.cols {
            let v = w[(i, j)];
            let level = mag.level(v.abs())?;
            let sign = if v < T::zero() { 1 } else { 0 };
            for k in 0..s {
                let slice = (level >> (k as u32 * slice_bits)) & mask;
                for a in 0..2 {
                    let value = if a == sign { slice } else { 0 };
                    img.write(a, i, j * s + k, g_lo + dg * T::of(value as f64), noise);
                }
            }
        }
    }
    Ok(img)
}

/// Analog slicing with residual correction.
pub fn program_asl<T: Scalar>(w: &Matrix<T>, w_max: T, noise: &NoiseSpec<T>, id: u64) -> Result<CrossbarImage<T>> {
    program_asl_pinned(w, w_max, noise, id, &[])
}

/// Analog slicing onto a crossbar whose `pins` are known before programming.
///
/// A stuck device shifts its partner's target so the pair difference is kept
/// where the range allows; whatever error remains is measured and handed to the
/// residual pair.
pub fn program_asl_pinned<T: Scalar>(
    w: &Matrix<T>,
    w_max: T,
    noise: &NoiseSpec<T>,
    id: u64,
    pins: &[CrossbarPin],
) -> Result<CrossbarImage<T>> {
    check_shape(w)?;
    if !(w_max > T::zero()) {
        return Err(Error::Config(format!("weight scale {w_max} must be positive")));
    }
    check_range(w, w_max)?;
    let mut img = CrossbarImage::blank(id, w, Scheme::Asl, w_max, pins);
    let (g_lo, g_hi) = g_range::<T>();
    let ratio = (g_hi - g_lo) / w_max;
    let gain = T::of(RESIDUAL_GAIN);
    for i in 0..w.rows {
        for j in 0..w.cols {
            let d = w[(i, j)] * ratio;
            let (a_pos, a_neg) = img.write_pair(0, i, j, d, noise);
            let e = d - (a_pos - a_neg);
            let mut r = e * gain;
            if r.abs() > g_hi - g_lo {
                img.clamped += 1;
                r = r.signum() * (g_hi - g_lo);
            }
            img.write_pair(2, i, j, r, noise);
        }
    }
    if img.clamped > 0 {
        log::warn!("{} residual cells saturated while programming crossbar {}", img.clamped, id);
    }
    Ok(img)
}

impl<T: Scalar> CrossbarImage<T> {
    /// Program arrays `base` and `base + 1` to realize difference `d`.
    fn write_pair(&mut self, base: usize, i: usize, j: usize, d: T, noise: &NoiseSpec<T>) -> (T, T) {
        let (g_lo, g_hi) = g_range::<T>();
        let mut t_pos = g_lo + d.max(T::zero());
        let mut t_neg = g_lo + (-d).max(T::zero());
        match (self.pin_at(base, i, j), self.pin_at(base + 1, i, j)) {
            (Some(p), None) => t_neg = (p.conductance::<T>() - d).max(g_lo).min(g_hi),
            (None, Some(n)) => t_pos = (n.conductance::<T>() + d).max(g_lo).min(g_hi),
            _ => {}
        }
        let a_pos = self.write(base, i, j, clamp_g(t_pos), noise);
        let a_neg = self.write(base + 1, i, j, clamp_g(t_neg), noise);
        (a_pos, a_neg)
    }
}

/// Column outputs for input `x`, averaged over `reads` read cycles.
///
/// `draw` selects the read-noise stream; `None` reads the stored conductances.
pub fn vmm<T: Scalar>(img: &CrossbarImage<T>, x: &[T], draw: Option<Draw<'_, T>>, reads: usize) -> Result<VmmResult<T>> {
    if x.len() != img.rows {
        return Err(Error::Dimension(format!("input length {} for {} rows", x.len(), img.rows)));
    }
    let reads = reads.max(1);
    let mut dot = vec![T::zero(); img.cols];
    for r in 0..reads {
        let d = draw.map(|d| Draw::new(d.spec, rng::key(d.read, &[r as u64])));
        let w = img.weights_read(d);
        for (j, out) in dot.iter_mut().enumerate() {
            *out += (0..img.rows).map(|i| x[i] * w[(i, j)]).sum::<T>();
        }
    }
    let n = T::of(reads as f64);
    dot.iter_mut().for_each(|v| *v /= n);
    let analog_out = dot.iter().zip(&img.col_scale).map(|(&v, &s)| v / s).collect();
    Ok(VmmResult { analog_out, dot })
}

impl<T: Scalar> FaultTarget for CrossbarImage<T> {
    fn device_shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.rows, self.phys_cols); self.arrays.len()]
    }

    fn pin(&mut self, site: FaultSite, mode: FaultMode) {
        let p = CrossbarPin { array: site.array, row: site.row, col: site.col, mode };
        match self.pins.binary_search_by(|q| (q.array, q.row, q.col).cmp(&(site.array, site.row, site.col))) {
            Ok(k) => self.pins[k] = p,
            Err(k) => self.pins.insert(k, p),
        }
        let idx = site.row as usize * self.phys_cols + site.col as usize;
        self.arrays[site.array as usize][idx] = mode.conductance();
    }
}

/// Pins of a fault map, in image order.
pub fn pins_from(fm: &crate::noisefault::FaultMap) -> Vec<CrossbarPin> {
    fm.entries.iter().map(|(s, &mode)| CrossbarPin { array: s.array, row: s.row, col: s.col, mode }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisefault::{inject_faults, FaultMap};
    use rand::Rng;

    fn q8() -> QuantSpec<f64> {
        QuantSpec::new(-1.0, 1.0, -1.0, 1.0, 8, Encoding::Binary).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut r = rng::stream_rng(seed, &[rng::stream::DATA]);
        let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_matrix_sits_at_g_min() {
        let w = Matrix::zeros(4, 3);
        let img = program_dsl(&w, &q8(), &NoiseSpec::noise_free(), 0).unwrap();
        assert!(img.arrays.iter().flatten().all(|&g| g == crate::noisefault::G_MIN));
        let noisy = program_dsl(&w, &q8(), &NoiseSpec::synthetic(1), 0).unwrap();
        assert!(noisy.arrays.iter().flatten().all(|&g| (0.01..0.05).contains(&g)));
    }

    #[test]
    fn dsl_roundtrip_is_exact() {
        let q = q8();
        let mag = dsl_magnitude_spec(&q).unwrap();
        let w = random(8, 8, 2);
        let img = program_dsl(&w, &q, &NoiseSpec::noise_free(), 0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = dsl_quantize(w[(i, j)], &mag).unwrap();
                assert!((img.weight(i, j) - want).abs() < 1e-12);
                // integer shift-and-add
                let level = mag.level(w[(i, j)].abs()).unwrap();
                let rebuilt: u32 = (0..7).map(|k| ((img.g(0, i, j * 7 + k) + img.g(1, i, j * 7 + k) > 100.0) as u32) << k).sum();
                assert_eq!(rebuilt, level);
            }
        }
    }

    #[test]
    fn identity_passes_input() {
        let img = CrossbarImage::identity(5, &NoiseSpec::noise_free(), 0).unwrap();
        let x = [0.1f64, -0.5, 0.9, 0.0, 1.0];
        let out = vmm(&img, &x, None, 1).unwrap();
        for (a, b) in out.dot.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_matches_matmul() {
        let w = random(8, 8, 3);
        let x: Vec<f64> = (0..8).map(|k| (k as f64 - 3.5) / 4.0).collect();
        let exact = w.vecmul(&x).unwrap();
        let asl = vmm(&program_asl(&w, 1.0, &NoiseSpec::noise_free(), 0).unwrap(), &x, None, 1).unwrap();
        let dsl = vmm(&program_dsl(&w, &q8(), &NoiseSpec::noise_free(), 0).unwrap(), &x, None, 1).unwrap();
        let step = 1.0 / 127.0;
        let bound = x.iter().map(|v| v.abs()).sum::<f64>() * step / 2.0;
        for (j, e) in exact.iter().enumerate() {
            assert!((asl.dot[j] - e).abs() < 1e-10);
            assert!((dsl.dot[j] - e).abs() <= bound + 1e-12);
            assert!((dsl.dot[j] - asl.dot[j]).abs() <= bound + 1e-12);
            assert!(asl.analog_out[j].abs() <= 1.0);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = random(6, 4, 4);
        let spec = NoiseSpec::synthetic(4);
        let img = program_asl(&w, 1.0, &spec, 0).unwrap();
        let out = vmm(&img, &[0.0; 6], Some(Draw::new(&spec, 3)), 4).unwrap();
        assert!(out.dot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_beats_primary_only() {
        let spec = NoiseSpec::synthetic(5);
        let w = random(40, 25, 5);
        let img = program_asl(&w, 1.0, &spec, 9).unwrap();
        let ratio = (150.0 - 0.01) / 1.0;
        let (mut raw, mut corrected) = (0.0, 0.0);
        for i in 0..40 {
            for j in 0..25 {
                raw += ((img.g(0, i, j) - img.g(1, i, j)) / ratio - w[(i, j)]).abs();
                corrected += (img.weight(i, j) - w[(i, j)]).abs();
            }
        }
        assert!(corrected < raw / 5.0, "corrected {corrected} raw {raw}");
        let clean = program_asl(&w, 1.0, &NoiseSpec::noise_free(), 9).unwrap();
        assert!(clean.arrays[2].iter().chain(&clean.arrays[3]).all(|&g| g == 0.01));
    }

    #[test]
    fn residual_clamps_when_saturated() {
        let mut fm = FaultMap::new();
        fm.insert(FaultSite { array: 0, row: 0, col: 0 }, FaultMode::StuckLowG);
        fm.insert(FaultSite { array: 1, row: 0, col: 0 }, FaultMode::StuckLowG);
        let w = Matrix::from_vec(1, 1, vec![0.9]).unwrap();
        let img = program_asl_pinned(&w, 1.0, &NoiseSpec::noise_free(), 0, &pins_from(&fm)).unwrap();
        assert_eq!(img.clamped, 1);
        assert!((img.weight(0, 0) - 0.1f64).abs() < 1e-3);
    }

    #[test]
    fn linearity_noise_free() {
        let w = random(8, 5, 6);
        let img = program_dsl(&w, &q8(), &NoiseSpec::noise_free(), 0).unwrap();
        let x1: Vec<f64> = (0..8).map(|k| k as f64 / 10.0).collect();
        let x2: Vec<f64> = (0..8).map(|k| 0.3 - k as f64 / 20.0).collect();
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let (a, b, c) = (vmm(&img, &x1, None, 1).unwrap(), vmm(&img, &x2, None, 1).unwrap(), vmm(&img, &sum, None, 1).unwrap());
        for j in 0..5 {
            assert!((a.dot[j] + b.dot[j] - c.dot[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_and_shape_errors() {
        let w = Matrix::from_vec(1, 2, vec![0.5, 1.5]).unwrap();
        assert!(matches!(program_dsl(&w, &q8(), &NoiseSpec::noise_free(), 0), Err(Error::WeightOutOfRange { col: 1, .. })));
        let img = program_asl(&Matrix::<f64>::identity(3), 1.0, &NoiseSpec::noise_free(), 0).unwrap();
        assert!(vmm(&img, &[1.0], None, 1).is_err());
        assert!(program_asl(&Matrix::<f64>::zeros(257, 1), 1.0, &NoiseSpec::noise_free(), 0).is_err());
    }

    #[test]
    fn pins_survive_reprogramming() {
        let w = random(4, 4, 7);
        let img = program_asl(&w, 1.0, &NoiseSpec::noise_free(), 0).unwrap();
        let mut fm = FaultMap::new();
        fm.insert(FaultSite { array: 0, row: 1, col: 2 }, FaultMode::StuckHighG);
        let faulty = inject_faults(&img, &fm).unwrap();
        assert_eq!(faulty.g(0, 1, 2), 150.0);
        assert_eq!(inject_faults(&faulty, &fm).unwrap(), faulty);
        let again = program_asl_pinned(&w, 1.0, &NoiseSpec::noise_free(), 0, &faulty.pins).unwrap();
        assert_eq!(again.g(0, 1, 2), 150.0);
        // the partner device absorbs the stuck value
        assert!((again.weight(1, 2) - w[(1, 2)]).abs() < 1e-9);
    }
}
