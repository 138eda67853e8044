//! RRAM conductance noise, the ACAM conductance-to-threshold transfer, and
//! stuck-at faults.
//!
//! Conductances are in µS. Noise draws are keyed by `(seed, stream, site, read)`
//! so any evaluation order yields the same samples.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acam::AcamUnit;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

/// Lowest programmable conductance (100 MΩ).
pub const G_MIN: f64 = 0.01;
/// Highest programmable conductance (6.7 kΩ).
pub const G_MAX: f64 = 150.0;

/// Smallest conductance fed to `ln` when a clip would otherwise produce zero.
const G_TINY: f64 = 1e-12;

/// `(a, b, c)` of `σ(G) = exp(a·ln(clip(G, 0, c)) + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

/// `(a, b, c)` of `TH(G) = exp(a·ln G + b) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferParams<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Scalar"))]
pub struct NoiseSpec<T> {
    pub prog: SigmaParams<T>,
    pub fluct: SigmaParams<T>,
    pub acam_transfer: TransferParams<T>,
    pub seed: u64,
    /// Multiplier on both σ; 0 disables noise.
    pub scale: T,
}

impl<T: Scalar> Default for NoiseSpec<T> {
    fn default() -> Self {
        Self::synthetic(0)
    }
}

impl<T: Scalar> NoiseSpec<T> {
    /// Synthetic defaults: σ_prog saturates at 0.4 µS from 50 µS upward and
    /// σ_fluct saturates at 0.1 µS from 100 µS upward.
    pub fn synthetic(seed: u64) -> Self {
        Self {
            prog: SigmaParams { a: T::of(0.5), b: T::of((0.4 / 50f64.sqrt()).ln()), c: T::of(50.0) },
            fluct: SigmaParams { a: T::of(0.5), b: T::of(0.01f64.ln()), c: T::of(100.0) },
            acam_transfer: TransferParams { a: T::of(0.5), b: T::of(0.08f64.ln()), c: T::zero() },
            seed,
            scale: T::one(),
        }
    }

    /// Synthetic parameters with noise switched off.
    pub fn noise_free() -> Self {
        Self { scale: T::zero(), ..Self::synthetic(0) }
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_noise_free(&self) -> bool {
        self.scale == T::zero()
    }

    pub fn validate(&self) -> Result<()> {
        let p = [self.prog.a, self.prog.b, self.prog.c, self.fluct.a, self.fluct.b, self.fluct.c];
        let t = [self.acam_transfer.a, self.acam_transfer.b, self.acam_transfer.c];
        if p.iter().chain(&t).chain([&self.scale]).any(|v| !v.is_finite()) {
            return Err(Error::InvalidNoise("parameters must be finite".into()));
        }
        if self.prog.c <= T::zero() || self.fluct.c <= T::zero() {
            return Err(Error::InvalidNoise("clip points must be positive".into()));
        }
        if self.scale < T::zero() {
            return Err(Error::InvalidNoise(format!("negative scale {}", self.scale)));
        }
        if self.acam_transfer.a <= T::zero() {
            return Err(Error::InvalidNoise("transfer exponent must be positive".into()));
        }
        for g in [G_MIN, 1.0, G_MAX] {
            let s = sigma(T::of(g), &self.prog) + sigma(T::of(g), &self.fluct);
            if !s.is_finite() {
                return Err(Error::InvalidNoise(format!("sigma not finite at G = {g}")));
            }
        }
        Ok(())
    }

    /// Scaled programming σ.
    pub fn sigma_prog(&self, g: T) -> T {
        self.scale * sigma(g, &self.prog)
    }

    /// Scaled read-fluctuation σ.
    pub fn sigma_fluct(&self, g: T) -> T {
        self.scale * sigma(g, &self.fluct)
    }

    pub fn threshold(&self, g: T) -> Result<T> {
        conductance_to_threshold(g, &self.acam_transfer)
    }

    pub fn conductance(&self, th: T) -> Result<T> {
        threshold_to_conductance(th, &self.acam_transfer)
    }
}

/// Conductance bounds as scalars.
pub fn g_range<T: Scalar>() -> (T, T) {
    (T::of(G_MIN), T::of(G_MAX))
}

pub fn clamp_g<T: Scalar>(g: T) -> T {
    let (lo, hi) = g_range::<T>();
    g.max(lo).min(hi)
}

/// Unscaled noise σ at conductance `g`.
pub fn sigma<T: Scalar>(g: T, p: &SigmaParams<T>) -> T {
    let g = g.max(T::of(G_TINY)).min(p.c);
    (p.a * g.ln() + p.b).exp()
}

/// Physical cell address used to key noise draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub image: u64,
    pub array: u32,
    pub row: u32,
    pub col: u32,
}

impl Site {
    fn parts(&self) -> [u64; 4] {
        [self.image, self.array as u64, self.row as u64, self.col as u64]
    }
}

/// One keyed read: which search or read cycle a draw belongs to.
#[derive(Debug, Clone, Copy)]
pub struct Draw<'a, T> {
    pub spec: &'a NoiseSpec<T>,
    pub read: u64,
}

impl<'a, T: Scalar> Draw<'a, T> {
    pub fn new(spec: &'a NoiseSpec<T>, read: u64) -> Self {
        Self { spec, read }
    }
}

/// `G_target + G_write`, clamped; the write term is fixed per site.
pub fn programmed_conductance<T: Scalar>(g_target: T, spec: &NoiseSpec<T>, site: Site) -> T {
    if spec.is_noise_free() {
        return clamp_g(g_target);
    }
    let p = site.parts();
    let n = rng::normal(rng::key(spec.seed, &[stream::PROGRAM, p[0], p[1], p[2], p[3]]));
    clamp_g(g_target + spec.sigma_prog(g_target) * T::of(n))
}

/// Adds a fresh read-fluctuation draw to an already programmed conductance.
pub fn read_conductance<T: Scalar>(g_programmed: T, spec: &NoiseSpec<T>, site: Site, read_index: u64) -> T {
    if spec.is_noise_free() {
        return clamp_g(g_programmed);
    }
    let p = site.parts();
    let n = rng::normal(rng::key(spec.seed, &[stream::READ, p[0], p[1], p[2], p[3], read_index]));
    clamp_g(g_programmed + spec.sigma_fluct(g_programmed) * T::of(n))
}

/// Readout conductance `G_target + G_write + G_read`, clamped to the device range.
pub fn sample_conductance<T: Scalar>(g_target: T, spec: &NoiseSpec<T>, site: Site, read_index: u64) -> T {
    let g = programmed_conductance(g_target, spec, site);
    read_conductance(g, spec, site, read_index)
}

pub fn conductance_to_threshold<T: Scalar>(g: T, t: &TransferParams<T>) -> Result<T> {
    if !(g > T::zero()) {
        return Err(Error::Domain(format!("conductance must be positive, got {g}")));
    }
    Ok((t.a * g.ln() + t.b).exp() + t.c)
}

pub fn threshold_to_conductance<T: Scalar>(th: T, t: &TransferParams<T>) -> Result<T> {
    if !(th > t.c) || t.a == T::zero() {
        return Err(Error::Domain(format!("threshold {th} outside transfer range")));
    }
    Ok((((th - t.c).ln() - t.b) / t.a).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultMode {
    StuckLowG,
    StuckHighG,
}

impl FaultMode {
    pub fn conductance<T: Scalar>(self) -> T {
        match self {
            FaultMode::StuckLowG => T::of(G_MIN),
            FaultMode::StuckHighG => T::of(G_MAX),
        }
    }
}

impl fmt::Display for FaultMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultMode::StuckLowG => "stuck_low",
            FaultMode::StuckHighG => "stuck_high",
        })
    }
}

impl FromStr for FaultMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stuck_low" | "stucklowg" | "sa0" | "low" => Ok(FaultMode::StuckLowG),
            "stuck_high" | "stuckhighg" | "sa1" | "high" => Ok(FaultMode::StuckHighG),
            other => Err(Error::Config(format!("unknown fault mode `{other}`"))),
        }
    }
}

/// Device address inside an image: `(physical array, row, column)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaultSite {
    pub array: u32,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultMap {
    pub entries: BTreeMap<FaultSite, FaultMode>,
}

impl FaultMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: FaultSite, mode: FaultMode) {
        self.entries.insert(site, mode);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, array: u32, row: u32, col: u32) -> Option<FaultMode> {
        self.entries.get(&FaultSite { array, row, col }).copied()
    }

    /// Every device of every array faulted independently with probability `rate`,
    /// low and high modes equally likely.
    pub fn random(shapes: &[(usize, usize)], rate: f64, seed: u64) -> Self {
        let mut fm = Self::new();
        for (a, &(rows, cols)) in shapes.iter().enumerate() {
            for r in 0..rows {
                for c in 0..cols {
                    let k = rng::key(seed, &[stream::FAULT, a as u64, r as u64, c as u64]);
                    if rng::uniform(k) < rate {
                        let mode = if rng::uniform(k ^ 1) < 0.5 { FaultMode::StuckLowG } else { FaultMode::StuckHighG };
                        fm.insert(FaultSite { array: a as u32, row: r as u32, col: c as u32 }, mode);
                    }
                }
            }
        }
        fm
    }

    /// Parse `array,row,col,mode` CSV; a header line is optional.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut fm = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("array")) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Config(format!("fault map line {}: expected 4 fields", n + 1)));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|e| Error::Config(format!("fault map line {}: {e}", n + 1)));
            fm.insert(FaultSite { array: num(f[0])?, row: num(f[1])?, col: num(f[2])? }, f[3].parse()?);
        }
        Ok(fm)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("array,row,col,mode\n");
        for (site, mode) in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", site.array, site.row, site.col, mode));
        }
        s
    }
}

/// An image whose devices can be pinned by stuck-at faults.
pub trait FaultTarget {
    /// `(rows, cols)` of each physical array, in fault-address order.
    fn device_shapes(&self) -> Vec<(usize, usize)>;

    /// Record a pin; later programming leaves the device at the pinned value.
    fn pin(&mut self, site: FaultSite, mode: FaultMode);
}

pub fn check_sites<I: FaultTarget>(image: &I, fm: &FaultMap) -> Result<()> {
    let shapes = image.device_shapes();
    for site in fm.entries.keys() {
        let ok = shapes
            .get(site.array as usize)
            .is_some_and(|&(r, c)| (site.row as usize) < r && (site.col as usize) < c);
        if !ok {
            return Err(Error::BadAddress(format!("({}, {}, {})", site.array, site.row, site.col)));
        }
    }
    Ok(())
}

/// Copy of `image` with every listed device pinned.
pub fn inject_faults<I: FaultTarget + Clone>(image: &I, fm: &FaultMap) -> Result<I> {
    check_sites(image, fm)?;
    let mut out = image.clone();
    for (&site, &mode) in &fm.entries {
        out.pin(site, mode);
    }
    Ok(out)
}

/// Mitigation for one ACAM bit array.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayPlan {
    pub array: u32,
    /// `(faulty row, spare row)` moves.
    pub remaps: Vec<(u32, u32)>,
    /// Rows whose pre-charge is skipped.
    pub disabled: Vec<u32>,
    /// Devices `(row, col)` excluded from fine-tuning updates.
    pub frozen: Vec<(u32, u32)>,
    /// Faulty rows left in service for lack of spares.
    pub stranded: Vec<u32>,
}

impl ArrayPlan {
    pub fn recoverable(&self) -> bool {
        self.stranded.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationPlan {
    /// Arrays that carry at least one fault, in index order.
    pub arrays: Vec<ArrayPlan>,
}

impl MitigationPlan {
    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Bits (array indices) that could not be fully remapped.
    pub fn unrecoverable(&self) -> Vec<u32> {
        self.arrays.iter().filter(|a| !a.recoverable()).map(|a| a.array).collect()
    }
}

/// Plan row remaps for the faults in `fm` plus any pins already on `unit`.
///
/// A fault that leaves its device at the programmed target is harmless and only
/// frozen. Short of spares, the row stays in service and is reported.
pub fn mitigation_plan<T: Scalar>(unit: &AcamUnit<T>, fm: &FaultMap) -> Result<MitigationPlan> {
    check_sites(unit, fm)?;
    let mut plan = MitigationPlan::default();
    for (k, a) in unit.arrays.iter().enumerate() {
        let mut faults: BTreeMap<(u32, u32), FaultMode> = a.pins.iter().map(|p| ((p.row, p.col), p.mode)).collect();
        for (site, &mode) in fm.entries.range(FaultSite { array: k as u32, row: 0, col: 0 }..) {
            if site.array != k as u32 {
                break;
            }
            faults.insert((site.row, site.col), mode);
        }
        if faults.is_empty() {
            continue;
        }
        let mut ap = ArrayPlan { array: k as u32, frozen: faults.keys().copied().collect(), ..Default::default() };
        let faulty_rows: std::collections::BTreeSet<u32> = faults.keys().map(|&(r, _)| r).collect();
        let harmful = |r: usize| {
            faults.iter().filter(|((row, _), _)| *row as usize == r).any(|(&(_, col), &mode)| {
                let cell = &a.rows[r].cells[(col / 2) as usize];
                let target = if col % 2 == 0 { cell.lo_g } else { cell.hi_g };
                mode.conductance::<T>() != target
            })
        };
        let mut spares = (0..a.capacity()).filter(|&r| !a.rows[r].enabled && !faulty_rows.contains(&(r as u32)));
        for &r in &faulty_rows {
            let r = r as usize;
            if !a.rows[r].enabled || !harmful(r) {
                continue;
            }
            match spares.next() {
                Some(s) => {
                    ap.remaps.push((r as u32, s as u32));
                    ap.disabled.push(r as u32);
                }
                None => ap.stranded.push(r as u32),
            }
        }
        plan.arrays.push(ap);
    }
    Ok(plan)
}

/// Carry out the remaps of `plan` on a copy of `unit`.
pub fn apply_plan<T: Scalar>(unit: &AcamUnit<T>, plan: &MitigationPlan) -> AcamUnit<T> {
    let mut out = unit.clone();
    for ap in &plan.arrays {
        let a = &mut out.arrays[ap.array as usize];
        for &(from, to) in &ap.remaps {
            a.rows[to as usize] = a.rows[from as usize].clone();
            a.rows[to as usize].enabled = true;
        }
        for &r in &ap.disabled {
            a.rows[r as usize].enabled = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_prog_saturates_at_point_four() {
        let s = NoiseSpec::<f64>::synthetic(1);
        assert!((s.sigma_prog(G_MAX) - 0.4).abs() < 1e-12);
        assert!((s.sigma_prog(50.0) - 0.4).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 0..=1000 {
            let g = G_MIN + (G_MAX - G_MIN) * k as f64 / 1000.0;
            let v = s.sigma_prog(g);
            assert!(v >= prev && v.is_finite());
            prev = v;
        }
        assert_eq!(s.sigma_prog(0.0), (0.5 * G_TINY.ln() + s.prog.b).exp());
    }

    #[test]
    fn zero_scale_is_noise_free() {
        let s = NoiseSpec::<f64>::synthetic(9).with_scale(0.0);
        for g in [G_MIN, 3.0, G_MAX] {
            assert_eq!(s.sigma_prog(g), 0.0);
            assert_eq!(s.sigma_fluct(g), 0.0);
            let site = Site { image: 1, array: 2, row: 3, col: 4 };
            assert_eq!(sample_conductance(g, &s, site, 17), g);
        }
    }

    #[test]
    fn read_std_matches_sigma_fluct() {
        let s = NoiseSpec::<f64>::synthetic(4);
        let site = Site { image: 0, array: 0, row: 5, col: 6 };
        let g = 40.0;
        let prog = programmed_conductance(g, &s, site);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|r| sample_conductance(g, &s, site, r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let want = s.sigma_fluct(prog);
        assert!((sd / want - 1.0).abs() < 0.05, "sd {sd} want {want}");
        // the write term is shared by every read
        assert!((mean - prog).abs() < 4.0 * want / (n as f64).sqrt());
    }

    #[test]
    fn transfer_roundtrip_and_span() {
        let s = NoiseSpec::<f64>::synthetic(0);
        for g in [G_MIN, 0.5, 7.0, 99.0, G_MAX] {
            let th = s.threshold(g).unwrap();
            let back = s.conductance(th).unwrap();
            assert!((back / g - 1.0).abs() < 1e-9);
        }
        assert!((s.threshold(G_MIN).unwrap() - 0.008).abs() < 1e-12);
        assert!((s.threshold(G_MAX).unwrap() - 0.08 * 150f64.sqrt()).abs() < 1e-12);
        assert!(s.threshold(0.0).is_err());
        assert!(s.threshold(-1.0).is_err());
    }

    #[test]
    fn fault_csv_roundtrip() {
        let fm = FaultMap::random(&[(8, 8), (4, 4)], 0.2, 3);
        assert!(!fm.is_empty());
        assert_eq!(FaultMap::from_csv(&fm.to_csv()).unwrap(), fm);
        assert!(FaultMap::from_csv("0,1,2,sideways").is_err());
    }

    #[test]
    fn validation() {
        let mut s = NoiseSpec::<f64>::synthetic(0);
        assert!(s.validate().is_ok());
        s.prog.c = 0.0;
        assert!(s.validate().is_err());
        assert!(NoiseSpec::<f64>::synthetic(0).with_scale(-1.0).validate().is_err());
    }

    mod mitigation {
        use super::super::*;
        use crate::acam::{eval_unit, AcamUnit};
        use crate::codes::Encoding;
        use crate::dtcompile::{BuiltinFn, Interval};

        fn unit(f: BuiltinFn) -> AcamUnit<f64> {
            let c = f.compile(&f.default_qspec(8, Encoding::Gray)).unwrap();
            AcamUnit::program(&c, &NoiseSpec::noise_free(), 0).unwrap()
        }

        #[test]
        fn no_faults_empty_plan() {
            assert!(mitigation_plan(&unit(BuiltinFn::Sigmoid), &FaultMap::new()).unwrap().is_empty());
        }

        #[test]
        fn remap_restores_exact_output() {
            // arrays 1 and 3 each have one spare row
            let u = unit(BuiltinFn::Sigmoid);
            let mut fm = FaultMap::new();
            fm.insert(FaultSite { array: 3, row: 2, col: 1 }, FaultMode::StuckLowG);
            fm.insert(FaultSite { array: 1, row: 0, col: 0 }, FaultMode::StuckHighG);
            let faulty = inject_faults(&u, &fm).unwrap();
            let xs: Vec<f64> = (0..4000).map(|k| -8.0 + 16.0 * (k as f64 + 0.5) / 4000.0).collect();
            assert!(xs.iter().any(|&x| eval_unit(&faulty, x, None) != eval_unit(&u, x, None)));
            let plan = mitigation_plan(&faulty, &fm).unwrap();
            assert!(plan.unrecoverable().is_empty());
            assert_eq!(plan.arrays[0].remaps, vec![(0, 1)]);
            assert_eq!(plan.arrays[1].remaps, vec![(2, 4)]);
            let fixed = apply_plan(&faulty, &plan);
            assert!(xs.iter().all(|&x| eval_unit(&fixed, x, None) == eval_unit(&u, x, None)));
        }

        #[test]
        fn half_full_array_has_spares() {
            // 32 intervals in a 64-row array
            let q = BuiltinFn::Identity.default_qspec::<f64>(8, Encoding::Gray);
            let spec = NoiseSpec::noise_free();
            let line = crate::acam::DataLine::for_domain(q.in_lo, q.in_hi, &spec.acam_transfer).unwrap();
            let intervals = (0..32).map(|k| Interval { lo: -0.9 + 0.05 * k as f64, hi: -0.88 + 0.05 * k as f64 }).collect();
            let s = crate::dtcompile::BitIntervalSet { bit_index: 0, intervals, encoding: Encoding::Gray };
            let a = crate::acam::map_intervals_to_array(&s, &line, &spec, 64, 0).unwrap();
            let mut u = unit(BuiltinFn::Identity);
            u.arrays[7] = a;
            let mut fm = FaultMap::new();
            fm.insert(FaultSite { array: 7, row: 10, col: 0 }, FaultMode::StuckHighG);
            let plan = mitigation_plan(&u, &fm).unwrap();
            assert_eq!(plan.arrays[0].remaps, vec![(10, 32)]);
            assert_eq!(plan.arrays[0].frozen, vec![(10, 0)]);
        }

        #[test]
        fn fully_faulted_array_is_unrecoverable() {
            let u = unit(BuiltinFn::Identity);
            let mut fm = FaultMap::new();
            for r in 0..64 {
                fm.insert(FaultSite { array: 7, row: r, col: 1 }, FaultMode::StuckLowG);
            }
            let plan = mitigation_plan(&u, &fm).unwrap();
            assert_eq!(plan.unrecoverable(), vec![7]);
            assert_eq!(plan.arrays[0].frozen.len(), 64);
            let mut bad = FaultMap::new();
            bad.insert(FaultSite { array: 8, row: 0, col: 0 }, FaultMode::StuckLowG);
            assert!(matches!(mitigation_plan(&u, &bad), Err(Error::BadAddress(_))));
        }
    }
}
