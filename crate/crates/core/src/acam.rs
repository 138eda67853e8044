//! Analog CAM cells, arrays and 8-array function units.
//!
//! Each cell holds two RRAM devices whose conductances set the lower and upper
//! search thresholds through the transfer `TH(G)`. Inputs reach the array as
//! data-line voltages; [`DataLine`] maps the function domain linearly onto the
//! interior of the threshold span.

use serde::{Deserialize, Serialize};

use crate::codes::{gray_to_binary, CodeWord, Encoding, QuantSpec};
use crate::dtcompile::{BitIntervalSet, CompiledFunction};
use crate::error::{Error, Result};
use crate::noisefault::{
    conductance_to_threshold, g_range, read_conductance, programmed_conductance, threshold_to_conductance, Draw,
    FaultMode, FaultSite, FaultTarget, NoiseSpec, Site, TransferParams,
};
use crate::scalar::Scalar;

/// Rows per bit array of a unit, MSB first.
pub const UNIT_CAPACITY: [usize; 8] = [1, 2, 2, 5, 8, 16, 32, 64];

/// Fraction of the threshold span left unused at each end of the data line.
pub const GUARD: f64 = 0.02;

/// Device column of the lower/upper bound of feature `f`.
#[inline]
pub fn device_col(feature: usize, upper: bool) -> u32 {
    (2 * feature + upper as usize) as u32
}

/// Per-bit row capacities for an `n_bits` unit, MSB first.
pub fn unit_capacity(n_bits: u32) -> Vec<usize> {
    if n_bits == 8 {
        return UNIT_CAPACITY.to_vec();
    }
    let n = n_bits as usize;
    (0..n).map(|k| if k == 0 { 1 } else { 1usize << (k - 1) }).collect()
}

/// Linear map from a function domain onto data-line voltages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataLine<T> {
    pub in_lo: T,
    pub in_hi: T,
    pub v_lo: T,
    pub v_hi: T,
}

impl<T: Scalar> DataLine<T> {
    /// Domain mapped onto the guarded interior of `[TH(g_min), TH(g_max)]`.
    pub fn for_domain(in_lo: T, in_hi: T, transfer: &TransferParams<T>) -> Result<Self> {
        let (g_lo, g_hi) = g_range::<T>();
        let t_lo = conductance_to_threshold(g_lo, transfer)?;
        let t_hi = conductance_to_threshold(g_hi, transfer)?;
        let guard = (t_hi - t_lo) * T::of(GUARD);
        Ok(Self { in_lo, in_hi, v_lo: t_lo + guard, v_hi: t_hi - guard })
    }

    #[inline]
    pub fn voltage(&self, x: T) -> T {
        let x = x.max(self.in_lo).min(self.in_hi);
        self.v_lo + (x - self.in_lo) / (self.in_hi - self.in_lo) * (self.v_hi - self.v_lo)
    }

    #[inline]
    pub fn input(&self, v: T) -> T {
        self.in_lo + (v - self.v_lo) / (self.v_hi - self.v_lo) * (self.in_hi - self.in_lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcamCell<T> {
    pub lo_g: T,
    pub hi_g: T,
    pub wildcard: bool,
}

impl<T: Scalar> AcamCell<T> {
    /// Don't-care cell storing the widest range.
    pub fn wildcard() -> Self {
        let (lo, hi) = g_range::<T>();
        Self { lo_g: lo, hi_g: hi, wildcard: true }
    }

    pub fn range(lo_g: T, hi_g: T) -> Self {
        Self { lo_g, hi_g, wildcard: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcamRow<T> {
    pub cells: Vec<AcamCell<T>>,
    pub enabled: bool,
}

/// A device pinned by a stuck-at fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pin {
    pub row: u32,
    pub col: u32,
    pub mode: FaultMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcamArray<T> {
    /// Image id and array index, used to key noise draws.
    pub image: u64,
    pub index: u32,
    pub features: usize,
    pub transfer: TransferParams<T>,
    pub line: DataLine<T>,
    pub rows: Vec<AcamRow<T>>,
    /// Sorted by `(row, col)`.
    #[serde(default)]
    pub pins: Vec<Pin>,
}

impl<T: Scalar> AcamArray<T> {
    /// `capacity` disabled rows of wildcard cells.
    pub fn empty(features: usize, capacity: usize, line: DataLine<T>, transfer: TransferParams<T>) -> Self {
        let row = AcamRow { cells: vec![AcamCell::wildcard(); features], enabled: false };
        Self { image: 0, index: 0, features, transfer, line, rows: vec![row; capacity], pins: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.rows.len()
    }

    pub fn active_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.enabled).count()
    }

    pub fn pin_at(&self, row: usize, col: u32) -> Option<FaultMode> {
        self.pins
            .binary_search_by(|p| (p.row, p.col).cmp(&(row as u32, col)))
            .ok()
            .map(|i| self.pins[i].mode)
    }

    /// Conductance a device presents for one search.
    pub fn device_g(&self, row: usize, col: u32, target: T, draw: Option<Draw<'_, T>>) -> T {
        if let Some(mode) = self.pin_at(row, col) {
            return mode.conductance();
        }
        match draw {
            None => target,
            Some(d) => {
                let site = Site { image: self.image, array: self.index, row: row as u32, col };
                read_conductance(programmed_conductance(target, d.spec, site), d.spec, site, d.read)
            }
        }
    }

    fn threshold(&self, g: T) -> T {
        // conductances are clamped positive, so the transfer is defined
        conductance_to_threshold(g, &self.transfer).unwrap_or(T::neg_infinity())
    }

    /// Whether row `r` matches the data-line voltages `v`.
    pub fn match_row_at(&self, r: usize, v: &[T], draw: Option<Draw<'_, T>>) -> bool {
        let row = &self.rows[r];
        row.cells.iter().enumerate().all(|(f, cell)| {
            if cell.wildcard && self.pin_at(r, device_col(f, false)).is_none() && self.pin_at(r, device_col(f, true)).is_none() {
                return true;
            }
            let lo = self.threshold(self.device_g(r, device_col(f, false), cell.lo_g, draw));
            let hi = self.threshold(self.device_g(r, device_col(f, true), cell.hi_g, draw));
            lo <= v[f] && v[f] <= hi
        })
    }

    /// OR of every enabled row for a single-feature input `x`.
    pub fn search(&self, x: T, draw: Option<Draw<'_, T>>) -> bool {
        let v = [self.line.voltage(x)];
        (0..self.rows.len()).any(|r| self.rows[r].enabled && self.match_row_at(r, &v, draw))
    }
}

/// Noise-free match of a row against data-line voltages, wildcards always pass.
pub fn match_row<T: Scalar>(row: &AcamRow<T>, v: &[T], transfer: &TransferParams<T>) -> Result<bool> {
    if v.len() != row.cells.len() {
        return Err(Error::Dimension(format!("row has {} cells, input has {}", row.cells.len(), v.len())));
    }
    for (cell, &x) in row.cells.iter().zip(v) {
        if cell.wildcard {
            continue;
        }
        let lo = conductance_to_threshold(cell.lo_g, transfer)?;
        let hi = conductance_to_threshold(cell.hi_g, transfer)?;
        if !(lo <= x && x <= hi) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Program one bit's intervals into a single-feature array of `capacity` rows.
pub fn map_intervals_to_array<T: Scalar>(
    s: &BitIntervalSet<T>,
    line: &DataLine<T>,
    spec: &NoiseSpec<T>,
    capacity: usize,
    bit: usize,
) -> Result<AcamArray<T>> {
    if s.intervals.len() > capacity {
        return Err(Error::CapacityExceeded { bit, needed: s.intervals.len(), capacity });
    }
    let t = &spec.acam_transfer;
    let (g_lo, g_hi) = g_range::<T>();
    let mut a = AcamArray::empty(1, capacity, *line, *t);
    for (row, iv) in a.rows.iter_mut().zip(&s.intervals) {
        let open_lo = iv.lo <= line.in_lo;
        let open_hi = iv.hi >= line.in_hi;
        let lo_g = if open_lo { g_lo } else { bound_conductance(line.voltage(iv.lo), t, false)? };
        let hi_g = if open_hi { g_hi } else { bound_conductance(line.voltage(iv.hi), t, true)? };
        row.cells[0] = AcamCell { lo_g, hi_g, wildcard: open_lo && open_hi };
        row.enabled = true;
    }
    Ok(a)
}

/// Conductance whose threshold lands on the inclusive side of `v`.
pub(crate) fn bound_conductance<T: Scalar>(v: T, t: &TransferParams<T>, upper: bool) -> Result<T> {
    let mut g = threshold_to_conductance(v, t)?;
    let nudge = if upper { T::one() + T::epsilon() } else { T::one() - T::epsilon() };
    for _ in 0..64 {
        let th = conductance_to_threshold(g, t)?;
        if (upper && th >= v) || (!upper && th <= v) {
            break;
        }
        g *= nudge;
    }
    Ok(g)
}

/// Noise-free or noisy single-feature bit search.
pub fn eval_bit<T: Scalar>(a: &AcamArray<T>, x: T, draw: Option<Draw<'_, T>>) -> bool {
    a.search(x, draw)
}

/// One ACAM unit: one array per output bit plus XOR decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcamUnit<T> {
    pub id: u64,
    pub name: String,
    pub qspec: QuantSpec<T>,
    pub line: DataLine<T>,
    /// One array per bit, MSB first.
    pub arrays: Vec<AcamArray<T>>,
}

impl<T: Scalar> AcamUnit<T> {
    /// Program a compiled function with the standard per-bit capacities.
    pub fn program(c: &CompiledFunction<T>, spec: &NoiseSpec<T>, id: u64) -> Result<Self> {
        Self::program_with_capacity(c, spec, id, &unit_capacity(c.qspec.n_bits))
    }

    pub fn program_with_capacity(c: &CompiledFunction<T>, spec: &NoiseSpec<T>, id: u64, capacity: &[usize]) -> Result<Self> {
        if c.qspec.encoding != Encoding::Gray {
            return Err(Error::WrongEncoding { expected: Encoding::Gray, got: c.qspec.encoding });
        }
        if capacity.len() != c.bits.len() {
            return Err(Error::Dimension(format!("{} capacities for {} bits", capacity.len(), c.bits.len())));
        }
        let line = DataLine::for_domain(c.qspec.in_lo, c.qspec.in_hi, &spec.acam_transfer)?;
        let arrays = c
            .bits
            .iter()
            .zip(capacity)
            .enumerate()
            .map(|(k, (s, &cap))| {
                let mut a = map_intervals_to_array(s, &line, spec, cap, s.bit_index)?;
                a.image = id;
                a.index = k as u32;
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { id, name: c.name.clone(), qspec: c.qspec, line, arrays })
    }

    /// Cells searched per evaluation.
    pub fn total_cells(&self) -> usize {
        self.arrays.iter().map(|a| a.capacity() * a.features).sum()
    }

    pub fn n_bits(&self) -> usize {
        self.arrays.len()
    }

    /// Gray code word read from the arrays.
    pub fn eval_gray(&self, x: T, draw: Option<Draw<'_, T>>) -> CodeWord {
        let bits = self.arrays.iter().map(|a| a.search(x, draw)).collect();
        CodeWord { bits, encoding: Encoding::Gray }
    }

    /// Binary output level at `x`.
    pub fn level(&self, x: T, draw: Option<Draw<'_, T>>) -> u32 {
        eval_unit(self, x, draw).value()
    }

    /// Dequantized output at `x`.
    pub fn value(&self, x: T, draw: Option<Draw<'_, T>>) -> T {
        self.qspec.level_value(self.level(x, draw))
    }
}

/// Search all arrays and decode Gray to binary.
pub fn eval_unit<T: Scalar>(u: &AcamUnit<T>, x: T, draw: Option<Draw<'_, T>>) -> CodeWord {
    gray_to_binary(&u.eval_gray(x, draw)).expect("unit output is Gray")
}

impl<T: Scalar> FaultTarget for AcamUnit<T> {
    fn device_shapes(&self) -> Vec<(usize, usize)> {
        self.arrays.iter().map(|a| (a.capacity(), 2 * a.features)).collect()
    }

    fn pin(&mut self, site: FaultSite, mode: FaultMode) {
        let a = &mut self.arrays[site.array as usize];
        let p = Pin { row: site.row, col: site.col, mode };
        match a.pins.binary_search_by(|q| (q.row, q.col).cmp(&(site.row, site.col))) {
            Ok(i) => a.pins[i] = p,
            Err(i) => a.pins.insert(i, p),
        }
    }
}

/// Flat image of a single-feature unit: per array, rows of `(lo_g, hi_g, enabled)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitImage<T> {
    pub id: u64,
    pub name: String,
    pub qspec: QuantSpec<T>,
    pub transfer: TransferParams<T>,
    pub arrays: Vec<Vec<(T, T, bool)>>,
    #[serde(default)]
    pub pins: Vec<Vec<Pin>>,
}

impl<T: Scalar> UnitImage<T> {
    pub fn from_unit(u: &AcamUnit<T>) -> Result<Self> {
        let transfer = u.arrays.first().map(|a| a.transfer).ok_or_else(|| Error::Config("unit has no arrays".into()))?;
        let mut arrays = Vec::with_capacity(u.arrays.len());
        for a in &u.arrays {
            if a.features != 1 {
                return Err(Error::Dimension(format!("array has {} features, expected 1", a.features)));
            }
            arrays.push(a.rows.iter().map(|r| (r.cells[0].lo_g, r.cells[0].hi_g, r.enabled)).collect());
        }
        let pins = u.arrays.iter().map(|a| a.pins.clone()).collect();
        Ok(Self { id: u.id, name: u.name.clone(), qspec: u.qspec, transfer, arrays, pins })
    }

    pub fn to_unit(&self) -> Result<AcamUnit<T>> {
        self.qspec.validate()?;
        let line = DataLine::for_domain(self.qspec.in_lo, self.qspec.in_hi, &self.transfer)?;
        let (g_lo, g_hi) = g_range::<T>();
        let mut arrays = Vec::with_capacity(self.arrays.len());
        for (k, rows) in self.arrays.iter().enumerate() {
            let mut a = AcamArray::empty(1, rows.len(), line, self.transfer);
            a.image = self.id;
            a.index = k as u32;
            for (row, &(lo, hi, en)) in a.rows.iter_mut().zip(rows) {
                if !(lo > T::zero() && hi > T::zero()) {
                    return Err(Error::Domain(format!("array {k} holds a non-positive conductance")));
                }
                row.cells[0] = AcamCell { lo_g: lo, hi_g: hi, wildcard: lo <= g_lo && hi >= g_hi };
                row.enabled = en;
            }
            if let Some(p) = self.pins.get(k) {
                a.pins = p.clone();
                a.pins.sort_by_key(|p| (p.row, p.col));
            }
            arrays.push(a);
        }
        Ok(AcamUnit { id: self.id, name: self.name.clone(), qspec: self.qspec, line, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::quantize;
    use crate::dtcompile::BuiltinFn;
    use crate::noisefault::FaultMap;

    fn unit(f: BuiltinFn) -> AcamUnit<f64> {
        let c = f.compile(&f.default_qspec(8, Encoding::Gray)).unwrap();
        AcamUnit::program(&c, &NoiseSpec::noise_free(), 1).unwrap()
    }

    #[test]
    fn capacities_total_130() {
        assert_eq!(UNIT_CAPACITY.iter().sum::<usize>(), 130);
        assert_eq!(unit(BuiltinFn::Sigmoid).total_cells(), 130);
    }

    #[test]
    fn identity_unit_matches_quantize() {
        let u = unit(BuiltinFn::Identity);
        for k in 0..10_000 {
            let x = -1.0 + 2.0 * k as f64 / 9_999.0;
            assert_eq!(eval_unit(&u, x, None), quantize(x, &u.qspec.with_encoding(Encoding::Binary)).unwrap(), "x={x}");
        }
    }

    #[test]
    fn sigmoid_tail_and_tanh_midpoint() {
        let s = unit(BuiltinFn::Sigmoid);
        assert_eq!(eval_unit(&s, -8.0, None).to_string(), "00000000b");
        assert_eq!(eval_unit(&s, -100.0, None).value(), 0);
        let t = unit(BuiltinFn::Tanh);
        let want = quantize(0.0, &t.qspec.with_encoding(Encoding::Binary)).unwrap();
        assert_eq!(eval_unit(&t, 0.0, None), want);
    }

    #[test]
    fn threshold_roundtrip_through_conductance() {
        let spec = NoiseSpec::<f64>::noise_free();
        let q = BuiltinFn::Sigmoid.default_qspec(8, Encoding::Gray);
        let c = BuiltinFn::Sigmoid.compile(&q).unwrap();
        let u = AcamUnit::program(&c, &spec, 0).unwrap();
        for (a, s) in u.arrays.iter().zip(&c.bits) {
            for (row, iv) in a.rows.iter().zip(&s.intervals) {
                let cell = row.cells[0];
                if iv.lo > q.in_lo {
                    let th = spec.threshold(cell.lo_g).unwrap();
                    assert!((th / u.line.voltage(iv.lo) - 1.0).abs() < 1e-6);
                }
                if iv.hi < q.in_hi {
                    let th = spec.threshold(cell.hi_g).unwrap();
                    assert!((th / u.line.voltage(iv.hi) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_set_never_matches() {
        let q = BuiltinFn::Identity.default_qspec::<f64>(8, Encoding::Gray);
        let spec = NoiseSpec::noise_free();
        let line = DataLine::for_domain(q.in_lo, q.in_hi, &spec.acam_transfer).unwrap();
        let s = BitIntervalSet { bit_index: 3, intervals: vec![], encoding: Encoding::Gray };
        let a = map_intervals_to_array(&s, &line, &spec, 4, 3).unwrap();
        assert_eq!(a.active_rows(), 0);
        assert!((0..100).all(|k| !eval_bit(&a, -1.0 + k as f64 / 50.0, None)));
    }

    #[test]
    fn capacity_error_names_bit() {
        let q = BuiltinFn::Identity.default_qspec::<f64>(8, Encoding::Gray);
        let c = BuiltinFn::Identity.compile(&q).unwrap();
        let err = AcamUnit::program_with_capacity(&c, &NoiseSpec::noise_free(), 0, &[1, 1, 1, 1, 1, 1, 1, 1]).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded { bit: 5, needed: 2, capacity: 1 }));
    }

    #[test]
    fn bit_sweep_matches_interval_membership() {
        let u = unit(BuiltinFn::Tanh);
        let c = BuiltinFn::Tanh.compile(&u.qspec).unwrap();
        for k in 0..10_000 {
            let x = -8.0 + 16.0 * (k as f64 + 0.37) / 10_000.0;
            for (a, s) in u.arrays.iter().zip(&c.bits) {
                assert_eq!(eval_bit(a, x, None), s.contains(x));
            }
        }
    }

    #[test]
    fn multi_feature_row() {
        // features in [0, 4] share one data-line map
        let spec = NoiseSpec::<f64>::noise_free();
        let t = spec.acam_transfer;
        let line = DataLine::for_domain(0.0, 4.0, &t).unwrap();
        let g = |x: f64| threshold_to_conductance(line.voltage(x), &t).unwrap();
        let row = AcamRow {
            cells: vec![AcamCell::range(g(2.0), g(3.0)), AcamCell::range(g(2.5), g(4.0)), AcamCell::range(g(3.0), g(3.5))],
            enabled: true,
        };
        let v = |xs: [f64; 3]| xs.map(|x| line.voltage(x));
        assert!(match_row(&row, &v([2.4, 2.7, 3.2]), &t).unwrap());
        assert!(!match_row(&row, &v([1.9, 2.7, 3.2]), &t).unwrap());
        let wild = AcamRow { cells: vec![AcamCell::wildcard(); 3], enabled: true };
        assert!(match_row(&wild, &v([0.0, 4.0, 1.0]), &t).unwrap());
        assert!(match_row(&row, &[0.5], &t).is_err());
    }

    #[test]
    fn noisy_eval_is_deterministic() {
        let u = unit(BuiltinFn::Sigmoid);
        let spec = NoiseSpec::synthetic(11);
        let a: Vec<u32> = (0..200).map(|k| u.level(-8.0 + k as f64 * 0.08, Some(Draw::new(&spec, k)))).collect();
        let b: Vec<u32> = (0..200).map(|k| u.level(-8.0 + k as f64 * 0.08, Some(Draw::new(&spec, k)))).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pins_are_idempotent() {
        let u = unit(BuiltinFn::Relu);
        let fm = FaultMap::random(&u.device_shapes(), 0.1, 5);
        let once = crate::noisefault::inject_faults(&u, &fm).unwrap();
        let twice = crate::noisefault::inject_faults(&once, &fm).unwrap();
        assert_eq!(once, twice);
        assert_eq!(crate::noisefault::inject_faults(&u, &FaultMap::new()).unwrap(), u);
    }

    #[test]
    fn image_roundtrip() {
        let f = BuiltinFn::Sigmoid;
        let c = f.compile(&f.default_qspec(8, Encoding::Gray)).unwrap();
        let u = AcamUnit::program(&c, &NoiseSpec::<f64>::noise_free(), 4).unwrap();
        let img = UnitImage::from_unit(&u).unwrap();
        assert_eq!(img.arrays.iter().map(Vec::len).sum::<usize>(), 130);
        assert_eq!(img.to_unit().unwrap(), u);
    }
}
