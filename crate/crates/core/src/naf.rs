//! Noise-aware fine-tuning.
//!
//! [`soft_forward`] is the differentiable ACAM relaxation: thresholds are mapped
//! linearly to conductances, perturbed, mapped back, matched with a product of
//! ReLUs, OR-ed with a sum, squashed by `m / (m + ε)` and Gray-decoded with
//! `(m_i - b_{i+1})^2`. Gradients are written out by hand for that fixed graph.
//!
//! The linear weight-to-conductance map is a proxy for the device transfer. Its
//! ends coincide with the thresholds of `g_min` and `g_max` on the data line, and
//! the perturbations it applies are pulled back from the device model so training
//! sees the same threshold jitter as the hardware.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acam::{bound_conductance, device_col, AcamArray, AcamCell, AcamUnit, DataLine};
use crate::codes::gray_decode;
use crate::crossbar::{program_asl, vmm};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::noisefault::{
    clamp_g, conductance_to_threshold, g_range, threshold_to_conductance, Draw, NoiseSpec, TransferParams,
};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Scalar"))]
pub struct NafConfig<T> {
    pub epochs: usize,
    pub batch: usize,
    /// Threshold step as a fraction of the input domain span.
    pub step_size: T,
    pub lambda1: T,
    pub lambda2: T,
    pub samples_per_dt: usize,
    pub epsilon: T,
    /// Learning rate for crossbar weights.
    pub crossbar_step: T,
    pub seed: u64,
}

impl<T: Scalar> Default for NafConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            step_size: T::of(1e-3),
            lambda1: T::zero(),
            lambda2: T::zero(),
            samples_per_dt: 5000,
            epsilon: T::of(1e-12),
            crossbar_step: T::of(0.2),
            seed: 0,
        }
    }
}

impl<T: Scalar> NafConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.samples_per_dt == 0 {
            return Err(Error::Config("epochs, batch and samples_per_dt must be positive".into()));
        }
        if !(self.lambda1 >= T::zero() && self.lambda2 >= T::zero()) {
            return Err(Error::Config("lambdas must be non-negative".into()));
        }
        if !(self.epsilon > T::zero()) || !(self.step_size >= T::zero()) || !(self.crossbar_step >= T::zero()) {
            return Err(Error::Config("epsilon must be positive and steps non-negative".into()));
        }
        Ok(())
    }
}

/// Trainable thresholds of one bit array; one entry per enabled row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftBit<T> {
    pub rows: Vec<u32>,
    pub w_lo: Vec<T>,
    pub w_hi: Vec<T>,
    pub frozen_lo: Vec<bool>,
    pub frozen_hi: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAcamParams<T> {
    /// MSB first.
    pub bits: Vec<SoftBit<T>>,
    pub g_ratio: T,
    pub g_min: T,
    pub g_max: T,
    pub epsilon: T,
    /// Input value that maps to `g_min`.
    pub origin: T,
    pub line: DataLine<T>,
    pub transfer: TransferParams<T>,
}

impl<T: Scalar> SoftAcamParams<T> {
    /// Thresholds of every enabled single-feature row of `u`.
    ///
    /// Open ends sit at the clip edges; stuck devices are frozen at their pinned value.
    pub fn from_unit(u: &AcamUnit<T>, epsilon: T) -> Result<Self> {
        let (g_min, g_max) = g_range::<T>();
        let t = u.arrays.first().map(|a| a.transfer).ok_or_else(|| Error::Config("unit has no arrays".into()))?;
        let line = u.line;
        let w_at = |g: T| -> Result<T> { Ok(line.input(conductance_to_threshold(g, &t)?)) };
        let origin = w_at(g_min)?;
        let top = w_at(g_max)?;
        let g_ratio = (g_max - g_min) / (top - origin);
        let mut bits = Vec::with_capacity(u.arrays.len());
        for a in &u.arrays {
            if a.features != 1 {
                return Err(Error::Dimension(format!("array has {} features, expected 1", a.features)));
            }
            let mut b = SoftBit { rows: vec![], w_lo: vec![], w_hi: vec![], frozen_lo: vec![], frozen_hi: vec![] };
            for (r, row) in a.rows.iter().enumerate().filter(|(_, row)| row.enabled) {
                let cell = row.cells[0];
                let side = |upper: bool| -> Result<(T, bool)> {
                    match a.pin_at(r, device_col(0, upper)) {
                        Some(m) => Ok((w_at(m.conductance())?, true)),
                        None if cell.wildcard => Ok((if upper { top } else { origin }, false)),
                        None => Ok((w_at(if upper { cell.hi_g } else { cell.lo_g })?, false)),
                    }
                };
                let (lo, flo) = side(false)?;
                let (hi, fhi) = side(true)?;
                b.rows.push(r as u32);
                b.w_lo.push(lo);
                b.w_hi.push(hi);
                b.frozen_lo.push(flo);
                b.frozen_hi.push(fhi);
            }
            bits.push(b);
        }
        Ok(Self { bits, g_ratio, g_min, g_max, epsilon, origin, line, transfer: t })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero()) || !(self.g_ratio > T::zero()) || !(self.g_max > self.g_min) {
            return Err(Error::Config("epsilon and g_ratio must be positive, g_max above g_min".into()));
        }
        Ok(())
    }

    /// Input value mapped to `g_max`.
    pub fn top(&self) -> T {
        self.to_w(self.g_max)
    }

    /// Weight to conductance, clipped.
    pub fn to_g(&self, w: T) -> T {
        ((w - self.origin) * self.g_ratio + self.g_min).max(self.g_min).min(self.g_max)
    }

    /// Conductance back to weight.
    pub fn to_w(&self, g: T) -> T {
        (g - self.g_min) / self.g_ratio + self.origin
    }

    fn clip_active(&self, w: T) -> bool {
        w > self.origin && w < self.top()
    }

    /// Device conductance whose threshold sits at input `w`.
    fn device_g(&self, w: T) -> T {
        let (g_min, g_max) = (self.g_min, self.g_max);
        if w <= self.origin {
            return g_min;
        }
        if w >= self.top() {
            return g_max;
        }
        let v = self.line.v_lo + (w - self.line.in_lo) / (self.line.in_hi - self.line.in_lo) * (self.line.v_hi - self.line.v_lo);
        threshold_to_conductance(v, &self.transfer).map(clamp_g).unwrap_or(g_min)
    }

    /// Write the thresholds of bit `bit` into a copy of the matching array of `base`.
    ///
    /// Cells whose thresholds are unchanged keep their stored conductances.
    pub fn bit_array(&self, base: &AcamUnit<T>, bit: usize) -> Result<AcamArray<T>> {
        let orig = Self::from_unit(base, self.epsilon)?;
        let mut a = base.arrays[bit].clone();
        let t = self.transfer;
        let b = &self.bits[bit];
        let o = &orig.bits[bit];
        for k in 0..b.rows.len() {
            let r = b.rows[k] as usize;
            if b.w_lo[k] == o.w_lo[k] && b.w_hi[k] == o.w_hi[k] {
                continue;
            }
            let g_of = |w: T, upper: bool| -> Result<T> {
                if w <= self.origin {
                    Ok(self.g_min)
                } else if w >= self.top() {
                    Ok(self.g_max)
                } else {
                    bound_conductance(self.line.voltage(w), &t, upper).map(clamp_g)
                }
            };
            let lo = g_of(b.w_lo[k], false)?;
            let hi = g_of(b.w_hi[k], true)?;
            let wild = lo <= self.g_min && hi >= self.g_max;
            a.rows[r].cells[0] = if wild { AcamCell::wildcard() } else { AcamCell { lo_g: lo, hi_g: hi, wildcard: false } };
        }
        Ok(a)
    }

    /// A copy of `base` carrying these thresholds.
    pub fn apply(&self, base: &AcamUnit<T>) -> Result<AcamUnit<T>> {
        let mut u = base.clone();
        for bit in 0..self.bits.len() {
            u.arrays[bit] = self.bit_array(base, bit)?;
        }
        Ok(u)
    }
}

/// Conductance perturbations held constant through one forward/backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offsets<T> {
    pub lo: Vec<Vec<T>>,
    pub hi: Vec<Vec<T>>,
}

impl<T: Scalar> Offsets<T> {
    pub fn zeros(p: &SoftAcamParams<T>) -> Self {
        let z = |b: &SoftBit<T>| vec![T::zero(); b.rows.len()];
        Self { lo: p.bits.iter().map(z).collect(), hi: p.bits.iter().map(z).collect() }
    }
}

/// Proxy-conductance offset reproducing one programming plus read draw at `w`.
fn pulled_back<T: Scalar>(p: &SoftAcamParams<T>, w: T, spec: &NoiseSpec<T>, key: u64) -> T {
    let g = p.device_g(w);
    let g1 = clamp_g(g + spec.sigma_prog(g) * T::of(rng::normal(rng::key(key, &[0]))));
    let g2 = clamp_g(g1 + spec.sigma_fluct(g1) * T::of(rng::normal(rng::key(key, &[1]))));
    let wn = match conductance_to_threshold(g2, &p.transfer) {
        Ok(v) => p.line.input(v),
        Err(_) => w,
    };
    let wc = p.to_w(p.to_g(w));
    (wn - wc) * p.g_ratio
}

/// Fresh offsets for the listed bits (all bits when `bits` is empty).
pub fn sample_offsets<T: Scalar>(p: &SoftAcamParams<T>, spec: &NoiseSpec<T>, key: u64, bits: &[usize]) -> Offsets<T> {
    let mut off = Offsets::zeros(p);
    if spec.is_noise_free() {
        return off;
    }
    let all: Vec<usize> = (0..p.bits.len()).collect();
    let bits = if bits.is_empty() { &all[..] } else { bits };
    for &i in bits {
        let b = &p.bits[i];
        for k in 0..b.rows.len() {
            let site = |side: u64| rng::key(key, &[i as u64, b.rows[k] as u64, side]);
            if !b.frozen_lo[k] {
                off.lo[i][k] = pulled_back(p, b.w_lo[k], spec, site(0));
            }
            if !b.frozen_hi[k] {
                off.hi[i][k] = pulled_back(p, b.w_hi[k], spec, site(1));
            }
        }
    }
    off
}

struct BitPass<T> {
    /// `(x - w~L, w~H - x)` per row.
    d: Vec<(T, T)>,
    m: T,
    s: T,
}

fn bit_pass<T: Scalar>(p: &SoftAcamParams<T>, i: usize, x: T, off: Option<&Offsets<T>>) -> BitPass<T> {
    let b = &p.bits[i];
    let relu = |v: T| v.max(T::zero());
    let mut d = Vec::with_capacity(b.rows.len());
    let mut m = T::zero();
    for k in 0..b.rows.len() {
        let (ol, oh) = off.map_or((T::zero(), T::zero()), |o| (o.lo[i][k], o.hi[i][k]));
        let gl = p.to_g(b.w_lo[k]) + ol;
        let gh = p.to_g(b.w_hi[k]) + oh;
        let wl = (gl - p.g_min) / p.g_ratio + p.origin;
        let wh = (gh - p.g_min) / p.g_ratio + p.origin;
        let pair = (x - wl, wh - x);
        m += relu(pair.0) * relu(pair.1);
        d.push(pair);
    }
    BitPass { d, m, s: m / (m + p.epsilon) }
}

/// Soft bits `m_i` after the squash, MSB first.
pub fn soft_bits<T: Scalar>(p: &SoftAcamParams<T>, x: T, off: Option<&Offsets<T>>) -> Vec<T> {
    (0..p.bits.len()).map(|i| bit_pass(p, i, x, off).s).collect()
}

/// Differentiable decode; returns `(y, b)` with `b` MSB first.
fn decode<T: Scalar>(s: &[T]) -> (T, Vec<T>) {
    let n = s.len();
    let mut b = Vec::with_capacity(n);
    let mut y = T::zero();
    for (k, &si) in s.iter().enumerate() {
        let bk = if k == 0 { si } else { (si - b[k - 1]) * (si - b[k - 1]) };
        y += bk * T::of((1u64 << (n - 1 - k)) as f64);
        b.push(bk);
    }
    (y, b)
}

/// Soft output level `y = Σ b_i·2^i`.
pub fn soft_forward<T: Scalar>(p: &SoftAcamParams<T>, x: T, off: Option<&Offsets<T>>) -> T {
    decode(&soft_bits(p, x, off)).0
}

/// Output level with every soft bit thresholded at 0.5.
pub fn soft_level<T: Scalar>(p: &SoftAcamParams<T>, x: T, off: Option<&Offsets<T>>) -> u32 {
    let g = soft_bits(p, x, off).iter().fold(0u32, |acc, &s| (acc << 1) | (s > T::of(0.5)) as u32);
    gray_decode(g)
}

/// Gradient over `(w_lo, w_hi)`, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftGrad<T> {
    pub lo: Vec<Vec<T>>,
    pub hi: Vec<Vec<T>>,
}

/// Push `dL/ds_i` of one bit back to its thresholds.
fn bit_backward<T: Scalar>(p: &SoftAcamParams<T>, i: usize, pass: &BitPass<T>, gs: T, lo: &mut [T], hi: &mut [T]) {
    let e = p.epsilon;
    let gm = gs * e / ((pass.m + e) * (pass.m + e));
    let b = &p.bits[i];
    for (k, &(a, c)) in pass.d.iter().enumerate() {
        if a <= T::zero() || c <= T::zero() {
            continue;
        }
        // m_k = (x - wL)(wH - x); clip passes the gradient only strictly inside
        if p.clip_active(b.w_lo[k]) {
            lo[k] = -gm * c;
        }
        if p.clip_active(b.w_hi[k]) {
            hi[k] = gm * a;
        }
    }
}

/// Analytic gradient of `(soft_forward - target)^2`; noise offsets are constants.
pub fn soft_gradient<T: Scalar>(p: &SoftAcamParams<T>, x: T, target: T, off: Option<&Offsets<T>>) -> SoftGrad<T> {
    let n = p.bits.len();
    let passes: Vec<BitPass<T>> = (0..n).map(|i| bit_pass(p, i, x, off)).collect();
    let s: Vec<T> = passes.iter().map(|q| q.s).collect();
    let (y, b) = decode(&s);
    let gy = T::of(2.0) * (y - target);
    let two = T::of(2.0);
    let mut gb = vec![T::zero(); n];
    let mut gs = vec![T::zero(); n];
    for k in (0..n).rev() {
        let mut g = gy * T::of((1u64 << (n - 1 - k)) as f64);
        if k + 1 < n {
            // b_{k+1} = (s_{k+1} - b_k)^2
            g += gb[k + 1] * -two * (s[k + 1] - b[k]);
        }
        gb[k] = g;
        gs[k] = if k == 0 { g } else { g * two * (s[k] - b[k - 1]) };
    }
    let mut out = SoftGrad { lo: vec![], hi: vec![] };
    for i in 0..n {
        let mut lo = vec![T::zero(); p.bits[i].rows.len()];
        let mut hi = lo.clone();
        bit_backward(p, i, &passes[i], gs[i], &mut lo, &mut hi);
        out.lo.push(lo);
        out.hi.push(hi);
    }
    out
}

/// Loss `(s_i - t)^2` of one bit and its gradient.
pub fn bit_gradient<T: Scalar>(p: &SoftAcamParams<T>, bit: usize, x: T, target: bool, off: Option<&Offsets<T>>) -> (T, Vec<T>, Vec<T>) {
    let pass = bit_pass(p, bit, x, off);
    let t = if target { T::one() } else { T::zero() };
    let r = pass.s - t;
    let mut lo = vec![T::zero(); p.bits[bit].rows.len()];
    let mut hi = lo.clone();
    bit_backward(p, bit, &pass, T::of(2.0) * r, &mut lo, &mut hi);
    (r * r, lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NafReport<T> {
    pub params: SoftAcamParams<T>,
    /// Mean loss per epoch.
    pub losses: Vec<T>,
    /// Loss rose five epochs in a row; `params` are the best seen.
    pub diverged: bool,
}

/// Fine-tune the thresholds of one bit of `base` against its noise-free output.
pub fn finetune_bit<T: Scalar>(base: &AcamUnit<T>, bit: usize, noise: &NoiseSpec<T>, cfg: &NafConfig<T>) -> Result<NafReport<T>> {
    cfg.validate()?;
    noise.validate()?;
    if bit >= base.arrays.len() {
        return Err(Error::Config(format!("bit {bit} outside a {}-bit unit", base.arrays.len())));
    }
    let mut p = SoftAcamParams::from_unit(base, cfg.epsilon)?;
    let (lo, hi) = (base.qspec.in_lo, base.qspec.in_hi);
    let step = cfg.step_size * (hi - lo);
    let mut r = rng::stream_rng(cfg.seed, &[stream::NAF, base.id, bit as u64]);
    let xs: Vec<T> = (0..cfg.samples_per_dt).map(|_| lo + (hi - lo) * T::of(rand::Rng::random::<f64>(&mut r))).collect();
    let ts: Vec<bool> = xs.iter().map(|&x| base.arrays[bit].search(x, None)).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best = (T::infinity(), p.clone());
    let mut rising = 0;
    let mut diverged = false;
    for epoch in 0..cfg.epochs {
        let start = p.clone();
        let mut total = T::zero();
        for (bi, chunk) in xs.chunks(cfg.batch).enumerate() {
            let n = p.bits[bit].rows.len();
            let mut glo = vec![T::zero(); n];
            let mut ghi = vec![T::zero(); n];
            for (k, &x) in chunk.iter().enumerate() {
                let idx = (bi * cfg.batch + k) as u64;
                let key = rng::key(noise.seed, &[stream::NAF, cfg.seed, base.id, bit as u64, epoch as u64, idx]);
                let off = sample_offsets(&p, noise, key, &[bit]);
                let (l, a, b) = bit_gradient(&p, bit, x, ts[bi * cfg.batch + k], Some(&off));
                total += l;
                glo.iter_mut().zip(&a).for_each(|(g, v)| *g += *v);
                ghi.iter_mut().zip(&b).for_each(|(g, v)| *g += *v);
            }
            let scale = step / T::of(chunk.len() as f64);
            let sb = &mut p.bits[bit];
            for k in 0..n {
                if !sb.frozen_lo[k] {
                    sb.w_lo[k] -= scale * glo[k];
                }
                if !sb.frozen_hi[k] {
                    sb.w_hi[k] -= scale * ghi[k];
                }
            }
        }
        let loss = total / T::of(xs.len() as f64);
        log::debug!("bit {bit} epoch {epoch} loss {loss}");
        if losses.last().is_some_and(|&prev| loss > prev) {
            rising += 1;
        } else {
            rising = 0;
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, start);
        }
        if rising >= 5 {
            diverged = true;
            log::warn!("fine-tuning bit {bit} diverged after {} epochs", epoch + 1);
            break;
        }
    }
    let params = if diverged { best.1 } else { p };
    Ok(NafReport { params, losses, diverged })
}

/// Compile-side entry: program `c` and fine-tune one of its bits.
pub fn finetune_dt<T: Scalar>(
    c: &crate::dtcompile::CompiledFunction<T>,
    bit: usize,
    noise: &NoiseSpec<T>,
    cfg: &NafConfig<T>,
) -> Result<(NafReport<T>, AcamArray<T>)> {
    let base = AcamUnit::program(c, noise, 0)?;
    let rep = finetune_bit(&base, bit, noise, cfg)?;
    let a = rep.params.bit_array(&base, bit)?;
    Ok((rep, a))
}

/// Fine-tune every bit independently and return the updated unit with per-bit reports.
pub fn finetune_unit<T: Scalar>(base: &AcamUnit<T>, noise: &NoiseSpec<T>, cfg: &NafConfig<T>) -> Result<(AcamUnit<T>, Vec<NafReport<T>>)> {
    let reps: Vec<NafReport<T>> = (0..base.arrays.len()).into_par_iter().map(|b| finetune_bit(base, b, noise, cfg)).collect::<Result<_>>()?;
    let mut u = base.clone();
    for (b, r) in reps.iter().enumerate() {
        u.arrays[b] = r.params.bit_array(base, b)?;
    }
    Ok((u, reps))
}

/// Function MSE of a unit over `points` uniform inputs, averaged over device seeds.
///
/// `noise = None` evaluates noise-free.
pub fn function_mse<T: Scalar>(
    u: &AcamUnit<T>,
    f: impl Fn(T) -> T + Sync,
    noise: Option<&NoiseSpec<T>>,
    devices: &[u64],
    points: usize,
    seed: u64,
) -> T {
    let (lo, hi) = (u.qspec.in_lo, u.qspec.in_hi);
    let one = [0u64];
    let devices = if noise.is_none() || devices.is_empty() { &one[..] } else { devices };
    // per-device partial sums, added in a fixed order
    let total: f64 = devices
        .par_iter()
        .map(|&d| {
            let spec = noise.map(|s| s.with_seed(d));
            (0..points)
                .map(|i| {
                    let x = lo + (hi - lo) * T::of(rng::uniform(rng::key(seed, &[stream::DATA, i as u64])));
                    let draw = spec.as_ref().map(|s| Draw::new(s, rng::key(seed, &[stream::READ, d, i as u64])));
                    (u.value(x, draw) - f(x)).f64().powi(2)
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    T::of(total / (devices.len() * points) as f64)
}

/// `MSE(y, ŷ) + λ1·max|W| + λ2·max|ε|`.
pub fn asl_loss<T: Scalar>(y: &Matrix<T>, y_hat: &Matrix<T>, w: &Matrix<T>, eps: &Matrix<T>, lambda1: T, lambda2: T) -> Result<T> {
    if y.rows != y_hat.rows || y.cols != y_hat.cols || w.rows != eps.rows || w.cols != eps.cols {
        return Err(Error::Dimension("loss operands disagree in shape".into()));
    }
    let n = T::of(y.data.len().max(1) as f64);
    let mse = y.data.iter().zip(&y_hat.data).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
    Ok(mse + lambda1 * w.max_abs() + lambda2 * eps.max_abs())
}

/// Inputs and targets of a linear-layer task, one sample per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTask<T> {
    pub x: Matrix<T>,
    pub y: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarNafReport<T> {
    pub w: Matrix<T>,
    pub losses: Vec<T>,
    pub diverged: bool,
}

/// Index of the largest magnitude.
fn argmax_abs<T: Scalar>(m: &Matrix<T>) -> usize {
    let mut best = 0;
    for (k, v) in m.data.iter().enumerate() {
        if v.abs() > m.data[best].abs() {
            best = k;
        }
    }
    best
}

/// Minibatch gradient descent on [`asl_loss`] with fresh A-SL noise per batch.
///
/// The noisy weights are read from a crossbar programmed with the current
/// weights. Noise is held constant in the backward pass, except that the main-pair
/// error scales with `σ_prog(G)` of the active device.
pub fn finetune_crossbar<T: Scalar>(
    w0: &Matrix<T>,
    data: &LinearTask<T>,
    w_max: T,
    noise: &NoiseSpec<T>,
    cfg: &NafConfig<T>,
) -> Result<CrossbarNafReport<T>> {
    cfg.validate()?;
    if data.x.cols != w0.rows || data.y.cols != w0.cols || data.x.rows != data.y.rows {
        return Err(Error::Dimension("task and weight shapes disagree".into()));
    }
    let (g_lo, g_hi) = g_range::<T>();
    let ratio = (g_hi - g_lo) / w_max;
    let mut w = w0.map(|v| v.max(-w_max).min(w_max));
    let mut losses = Vec::new();
    let mut best = (T::infinity(), w.clone());
    let mut rising = 0;
    let mut diverged = false;
    let n_out = T::of(w.cols as f64);
    for epoch in 0..cfg.epochs {
        let start = w.clone();
        let mut total = T::zero();
        let mut batches = 0usize;
        for (bi, start_row) in (0..data.x.rows).step_by(cfg.batch).enumerate() {
            let end = (start_row + cfg.batch).min(data.x.rows);
            let xb = Matrix::from_fn(end - start_row, data.x.cols, |i, j| data.x[(start_row + i, j)]);
            let yb = Matrix::from_fn(end - start_row, data.y.cols, |i, j| data.y[(start_row + i, j)]);
            let spec = noise.with_seed(rng::key(noise.seed, &[stream::NAF, cfg.seed, epoch as u64, bi as u64]));
            let img = program_asl(&w, w_max, &spec, 0)?;
            let wn = img.weights_read(if spec.is_noise_free() { None } else { Some(Draw::new(&spec, 0)) });
            let eps = Matrix::from_fn(w.rows, w.cols, |i, j| w[(i, j)] - (img.g(0, i, j) - img.g(1, i, j)) / ratio);
            let yh = xb.matmul(&wn)?;
            total += asl_loss(&yb, &yh, &w, &eps, cfg.lambda1, cfg.lambda2)?;
            batches += 1;
            let r = Matrix::from_fn(yh.rows, yh.cols, |i, j| yh[(i, j)] - yb[(i, j)]);
            let scale = T::of(2.0) / (T::of(xb.rows as f64) * n_out);
            let mut g = xb.transpose().matmul(&r)?.map(|v| v * scale);
            if cfg.lambda1 > T::zero() {
                let k = argmax_abs(&w);
                g.data[k] += cfg.lambda1 * w.data[k].signum();
            }
            if cfg.lambda2 > T::zero() && !spec.is_noise_free() {
                let k = argmax_abs(&eps);
                let wk = w.data[k];
                let gk = g_lo + wk.abs() * ratio;
                if gk < spec.prog.c {
                    // ε ∝ G^a on the active device
                    g.data[k] += cfg.lambda2 * eps.data[k].abs() * spec.prog.a * ratio / gk * wk.signum();
                }
            }
            for (wv, gv) in w.data.iter_mut().zip(&g.data) {
                *wv = (*wv - cfg.crossbar_step * *gv).max(-w_max).min(w_max);
            }
        }
        let loss = total / T::of(batches.max(1) as f64);
        if losses.last().is_some_and(|&prev| loss > prev) {
            rising += 1;
        } else {
            rising = 0;
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, start);
        }
        if rising >= 5 {
            diverged = true;
            log::warn!("crossbar fine-tuning diverged after {} epochs", epoch + 1);
            break;
        }
    }
    let w = if diverged { best.1 } else { w };
    Ok(CrossbarNafReport { w, losses, diverged })
}

/// Noisy-VMM MSE of A-SL weights on a task, averaged over device seeds.
pub fn vmm_mse<T: Scalar>(w: &Matrix<T>, w_max: T, data: &LinearTask<T>, noise: &NoiseSpec<T>, devices: &[u64]) -> Result<T> {
    let mut total = 0.0;
    for &d in devices {
        let spec = noise.with_seed(d);
        let img = program_asl(w, w_max, &spec, 0)?;
        for i in 0..data.x.rows {
            let draw = Draw::new(&spec, rng::key(d, &[stream::READ, i as u64]));
            let out = vmm(&img, data.x.row(i), Some(draw), 1)?;
            total += out.dot.iter().zip(data.y.row(i)).map(|(a, b)| (*a - *b).f64().powi(2)).sum::<f64>();
        }
    }
    Ok(T::of(total / (devices.len().max(1) * data.y.data.len()) as f64))
}

/// Frozen devices as `(bit, row, upper)`.
pub fn frozen_cells<T: Scalar>(p: &SoftAcamParams<T>) -> Vec<(usize, u32, bool)> {
    let mut out = Vec::new();
    for (i, b) in p.bits.iter().enumerate() {
        for k in 0..b.rows.len() {
            if b.frozen_lo[k] {
                out.push((i, b.rows[k], false));
            }
            if b.frozen_hi[k] {
                out.push((i, b.rows[k], true));
            }
        }
    }
    out
}
