//! Crossbar + ACAM compositions: core modes, log/exp arithmetic, softmax and
//! single-head attention.
//!
//! Log-domain values live on a fixed-point grid of step `Δ = 2^-frac_bits`. A log
//! code `L` in `0..2^n_bits` stands for `(L - L_max)·Δ`, so magnitudes in
//! `[e^-R, 1]` with `R = L_max·Δ` are representable. Signs travel separately and
//! are combined with an XOR. Digital adders only ever see integer codes.

use serde::{Deserialize, Serialize};

use crate::acam::{eval_unit, AcamUnit};
use crate::codes::{CodeWord, Encoding, LevelScale, QuantSpec};
use crate::cost::{Event, RunLedger};
use crate::crossbar::{program_asl, vmm, CrossbarImage};
use crate::dtcompile::{compile_function, BuiltinFn};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::noisefault::{Draw, NoiseSpec};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DualCompute,
    CrossbarOnly,
    AcamOnly,
}

/// One core: a crossbar and one ACAM unit per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreConfig<T> {
    pub mode: Mode,
    pub crossbar: CrossbarImage<T>,
    pub units: Vec<AcamUnit<T>>,
}

impl<T: Scalar> CoreConfig<T> {
    /// Identity units over `[-1, 1]` read the normalized column outputs.
    pub fn crossbar_only(crossbar: CrossbarImage<T>, noise: &NoiseSpec<T>) -> Result<Self> {
        let f = BuiltinFn::Identity;
        let c = f.compile(&f.default_qspec(8, Encoding::Gray))?;
        let units = (0..crossbar.cols).map(|j| AcamUnit::program(&c, noise, 1000 + j as u64)).collect::<Result<_>>()?;
        Ok(Self { mode: Mode::CrossbarOnly, crossbar, units })
    }

    /// Identity crossbar feeding `unit` on every column.
    pub fn acam_only(n: usize, unit: &AcamUnit<T>, noise: &NoiseSpec<T>) -> Result<Self> {
        let crossbar = CrossbarImage::identity(n, noise, 0)?;
        let units = (0..n).map(|j| AcamUnit { id: 1000 + j as u64, ..unit.clone() }).collect();
        Ok(Self { mode: Mode::AcamOnly, crossbar, units })
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.len() != self.crossbar.cols {
            return Err(Error::Mode(format!("{} units for {} columns", self.units.len(), self.crossbar.cols)));
        }
        match self.mode {
            Mode::CrossbarOnly => {
                if let Some(u) = self.units.iter().find(|u| u.name != "identity") {
                    return Err(Error::Mode(format!("crossbar-only core needs identity units, found `{}`", u.name)));
                }
            }
            Mode::AcamOnly => {
                let w = self.crossbar.weights();
                let tol = T::of(1e-6);
                let ok = w.rows == w.cols
                    && (0..w.rows).all(|i| (0..w.cols).all(|j| (w[(i, j)] - if i == j { T::one() } else { T::zero() }).abs() < tol));
                if !ok {
                    return Err(Error::Mode("ACAM-only core needs an identity crossbar".into()));
                }
            }
            Mode::DualCompute => {}
        }
        Ok(())
    }
}

/// VMM followed by one unit search per column.
pub fn run_core<T: Scalar>(cfg: &CoreConfig<T>, x: &[T], draw: Option<Draw<'_, T>>, ledger: &mut RunLedger) -> Result<Vec<CodeWord>> {
    cfg.validate()?;
    let out = vmm(&cfg.crossbar, x, draw, 1)?;
    tally_vmm(&cfg.crossbar, 1, ledger);
    let inputs = match cfg.mode {
        Mode::CrossbarOnly => out.analog_out,
        Mode::DualCompute | Mode::AcamOnly => out.dot,
    };
    Ok(inputs
        .iter()
        .zip(&cfg.units)
        .enumerate()
        .map(|(j, (&v, u))| {
            ledger.unit_eval(u.total_cells(), u.n_bits());
            let d = draw.map(|d| Draw::new(d.spec, rng::key(d.read, &[rng::stream::READ, j as u64])));
            eval_unit(u, v, d)
        })
        .collect())
}

fn tally_vmm<T: Scalar>(img: &CrossbarImage<T>, reads: usize, ledger: &mut RunLedger) {
    ledger.add(Event::DacConversion, img.rows as u64);
    ledger.add(Event::CrossbarColumnRead, (img.arrays.len() * img.phys_cols * reads) as u64);
}

/// Fixed-point log grid and unit domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Scalar"))]
pub struct LogExpConfig<T> {
    pub n_bits: u32,
    pub frac_bits: u32,
    /// Lower end of the softmax exponent domain; smaller exponents read as 0.
    pub softmax_lo: T,
}

impl<T: Scalar> Default for LogExpConfig<T> {
    fn default() -> Self {
        Self { n_bits: 8, frac_bits: 5, softmax_lo: T::of(-8.0) }
    }
}

impl<T: Scalar> LogExpConfig<T> {
    pub fn max_code(&self) -> u32 {
        (1 << self.n_bits) - 1
    }

    pub fn delta(&self) -> T {
        T::of(1.0 / (1u64 << self.frac_bits) as f64)
    }

    /// Log-domain reach `R = max_code·Δ`.
    pub fn reach(&self) -> T {
        T::of(self.max_code() as f64) * self.delta()
    }
}

/// The ACAM units used by the log/exp pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Scalar"))]
pub struct LogExpUnits<T> {
    pub cfg: LogExpConfig<T>,
    /// `ln v` on `[e^-R, 1]` onto the log grid.
    pub log: AcamUnit<T>,
    /// `e^s` on `[-2R, 0]`, uniform output in `[0, 1]`.
    pub exp_prod: AcamUnit<T>,
    /// `e^s` on `[softmax_lo, 0]`, uniform output in `[0, 1]`.
    pub exp_soft: AcamUnit<T>,
    /// `ln S` on `[1, e^R]` onto the non-negative log grid.
    pub log_sum: AcamUnit<T>,
    /// `e^s` on `[-R, 0]` with log-spaced output levels.
    pub exp_lns: AcamUnit<T>,
}

impl<T: Scalar> LogExpUnits<T> {
    pub fn new(cfg: LogExpConfig<T>, noise: &NoiseSpec<T>) -> Result<Self> {
        let n = cfg.n_bits;
        let r = cfg.reach();
        let g = Encoding::Gray;
        let ln = |x: T| x.ln();
        let exp = |x: T| x.exp();
        let unit = |name: &str, f: &(dyn Fn(T) -> T + Sync), q: QuantSpec<T>, id: u64| -> Result<AcamUnit<T>> {
            AcamUnit::program(&compile_function(name, f, &q)?, noise, id)
        };
        let zero = T::zero();
        let one = T::one();
        Ok(Self {
            cfg,
            log: unit("log", &ln, QuantSpec::new((-r).exp(), one, -r, zero, n, g)?, 1)?,
            exp_prod: unit("exp", &exp, QuantSpec::new(-(r + r), zero, zero, one, n, g)?, 2)?,
            exp_soft: unit("exp", &exp, QuantSpec::new(cfg.softmax_lo, zero, zero, one, n, g)?, 3)?,
            log_sum: unit("log", &ln, QuantSpec::new(one, r.exp(), zero, r, n, g)?, 4)?,
            exp_lns: unit("exp", &exp, QuantSpec::new(-r, zero, (-r).exp(), one, n, g)?.with_scale(LevelScale::Log)?, 5)?,
        })
    }
}

/// A signed log-domain value; `None` magnitude is an exact zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogVal {
    pub neg: bool,
    pub code: Option<u32>,
}

/// Evaluation context: units, noise stream and event counts.
pub struct Engine<'a, T> {
    pub units: &'a LogExpUnits<T>,
    noise: Option<&'a NoiseSpec<T>>,
    stream: u64,
    counter: u64,
    pub ledger: RunLedger,
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn new(units: &'a LogExpUnits<T>, noise: Option<&'a NoiseSpec<T>>, stream: u64) -> Self {
        Self { units, noise, stream, counter: 0, ledger: RunLedger::new() }
    }

    fn next_draw(&mut self) -> Option<Draw<'a, T>> {
        let c = self.counter;
        self.counter += 1;
        self.noise.map(|s| Draw::new(s, rng::key(self.stream, &[c])))
    }

    /// Output level of a unit search.
    pub fn search(&mut self, u: &AcamUnit<T>, x: T) -> u32 {
        let d = self.next_draw();
        self.ledger.unit_eval(u.total_cells(), u.n_bits());
        eval_unit(u, x, d).value()
    }

    fn adds(&mut self, n: usize) {
        self.ledger.add(Event::AdderOp, n as u64);
    }

    /// Half an input LSB: magnitudes below this are exact zeros.
    fn zero_floor(&self) -> T {
        T::of(0.5) / T::of(self.units.cfg.max_code() as f64)
    }

    /// Sign-magnitude log code of a digital value in `[-1, 1]`.
    pub fn log_of(&mut self, v: T) -> LogVal {
        let neg = v < T::zero();
        if v.abs() < self.zero_floor() {
            return LogVal { neg, code: None };
        }
        let u = &self.units.log;
        LogVal { neg, code: Some(self.search(u, v.abs())) }
    }

    /// Exp unit on a sum of two log codes; returns the output code.
    fn exp_pair(&mut self, a: u32, b: u32) -> u32 {
        let m = self.units.cfg.max_code() as i64;
        let s = T::of((a as i64 + b as i64 - 2 * m) as f64) * self.units.cfg.delta();
        self.adds(1);
        let u = &self.units.exp_prod;
        self.search(u, s)
    }

    fn out_scale(&self) -> T {
        T::of(self.units.cfg.max_code() as f64)
    }

    /// `a·b = e^(ln a + ln b)` through the units.
    pub fn mul(&mut self, a: T, b: T) -> T {
        let (la, lb) = (self.log_of(a), self.log_of(b));
        match (la.code, lb.code) {
            (Some(x), Some(y)) => {
                let c = self.exp_pair(x, y) as f64;
                let v = T::of(c) / self.out_scale();
                if la.neg != lb.neg {
                    -v
                } else {
                    v
                }
            }
            _ => T::zero(),
        }
    }

    /// Signed sum of exp codes over matching log pairs.
    fn dot_codes(&mut self, a: &[LogVal], b: &[LogVal]) -> i64 {
        let mut pos: u32 = 0;
        let mut neg: u32 = 0;
        let mut terms = 0usize;
        for (x, y) in a.iter().zip(b) {
            if let (Some(p), Some(q)) = (x.code, y.code) {
                let c = self.exp_pair(p, q);
                if x.neg != y.neg {
                    neg += c;
                } else {
                    pos += c;
                }
                terms += 1;
            }
        }
        self.adds(terms.saturating_sub(1));
        pos as i64 - neg as i64
    }

    /// Log, add, exp, sum.
    pub fn dot(&mut self, a: &[T], b: &[T]) -> Result<T> {
        if a.len() != b.len() {
            return Err(Error::Dimension(format!("dot of lengths {} and {}", a.len(), b.len())));
        }
        let la: Vec<LogVal> = a.iter().map(|&v| self.log_of(v)).collect();
        let lb: Vec<LogVal> = b.iter().map(|&v| self.log_of(v)).collect();
        let s = self.dot_codes(&la, &lb);
        Ok(T::of(s as f64) / self.out_scale())
    }

    pub fn matmul(&mut self, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        if a.cols != b.rows {
            return Err(Error::Dimension(format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols)));
        }
        let la: Vec<LogVal> = a.data.iter().map(|&v| self.log_of(v)).collect();
        let bt = b.transpose();
        let lb: Vec<LogVal> = bt.data.iter().map(|&v| self.log_of(v)).collect();
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let s = self.dot_codes(&la[i * a.cols..(i + 1) * a.cols], &lb[j * a.cols..(j + 1) * a.cols]);
                out[(i, j)] = T::of(s as f64) / self.out_scale();
            }
        }
        Ok(out)
    }

    /// Softmax steps 1-4: max shift, exp, sum, log of the sum, subtract.
    ///
    /// Returns the shifted exponents `y_i - max - ln S` before rounding.
    fn softmax_exponents(&mut self, y: &[T]) -> Vec<T> {
        let m = y.iter().copied().fold(T::neg_infinity(), T::max);
        self.ledger.add(Event::AdderOp, y.len().saturating_sub(1) as u64);
        let d: Vec<T> = y.iter().map(|&v| v - m).collect();
        self.adds(y.len());
        let u = &self.units.exp_soft;
        let s: u32 = d.iter().map(|&v| self.search(u, v)).sum();
        self.adds(y.len().saturating_sub(1));
        let u = &self.units.log_sum;
        let ls = self.search(u, T::of(s as f64) / self.out_scale());
        let ln_s = T::of(ls as f64) * self.units.cfg.delta();
        self.adds(y.len());
        d.iter().map(|&v| v - ln_s).collect()
    }

    /// Softmax probabilities; every nonlinearity runs on a unit.
    pub fn softmax(&mut self, y: &[T]) -> Vec<T> {
        if y.is_empty() {
            return Vec::new();
        }
        let z = self.softmax_exponents(y);
        let u = &self.units.exp_soft;
        z.iter().map(|&v| T::of(self.search(u, v) as f64) / self.out_scale()).collect()
    }

    /// Softmax stopped at its log-scale output: codes `k` for exponents `-k·Δ`.
    pub fn softmax_log(&mut self, y: &[T]) -> Vec<u32> {
        let inv = T::one() / self.units.cfg.delta();
        let max = self.units.cfg.max_code() as f64;
        self.softmax_exponents(y)
            .into_iter()
            .map(|z| (-z * inv).round_half_even().f64().clamp(0.0, max) as u32)
            .collect()
    }

    /// Explicit exp-then-log of a softmax code, for the unfused graph.
    pub fn exp_then_log(&mut self, k: u32) -> u32 {
        let m = self.units.cfg.max_code();
        let z = -T::of(k as f64) * self.units.cfg.delta();
        let u = &self.units.exp_lns;
        let level = self.search(u, z);
        let p = self.units.exp_lns.qspec.level_value(level);
        let u = &self.units.log;
        let l = self.search(u, p);
        m - l
    }
}

pub fn mul_logexp<T: Scalar>(units: &LogExpUnits<T>, a: T, b: T, noise: Option<&NoiseSpec<T>>) -> T {
    Engine::new(units, noise, 0).mul(a, b)
}

pub fn dot_logexp<T: Scalar>(units: &LogExpUnits<T>, a: &[T], b: &[T], noise: Option<&NoiseSpec<T>>) -> Result<T> {
    Engine::new(units, noise, 0).dot(a, b)
}

pub fn softmax_logexp<T: Scalar>(units: &LogExpUnits<T>, y: &[T], noise: Option<&NoiseSpec<T>>) -> Vec<T> {
    Engine::new(units, noise, 0).softmax(y)
}

/// Operations a pipeline stage may perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    /// Crossbar vector-matrix multiply.
    Vmm,
    /// ACAM unit evaluating the named function.
    Unit(&'static str),
    Add,
    Sub,
    Max,
    Sum,
    /// Power-of-two rescale.
    Shift,
}

impl Op {
    /// Digital and crossbar ops are linear or comparisons; only units are nonlinear.
    pub fn is_unit(&self) -> bool {
        matches!(self, Op::Unit(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub name: &'static str,
    pub op: Op,
}

/// Ordered stages of single-head attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttentionGraph {
    pub d_k: usize,
    pub fused: bool,
    pub stages: Vec<Stage>,
}

impl AttentionGraph {
    pub fn new(d_k: usize, fused: bool) -> Self {
        let s = |name, op| Stage { name, op };
        let mut stages = vec![
            s("linear_q", Op::Vmm),
            s("log_q", Op::Unit("log")),
            s("linear_k", Op::Vmm),
            s("log_k", Op::Unit("log")),
            s("linear_v", Op::Vmm),
            s("log_v", Op::Unit("log")),
            s("qk_add", Op::Add),
            s("qk_exp", Op::Unit("exp")),
            s("qk_sum", Op::Sum),
            s("score_scale", Op::Shift),
            s("softmax_max", Op::Max),
            s("softmax_shift", Op::Sub),
            s("softmax_exp", Op::Unit("exp")),
            s("softmax_sum", Op::Sum),
            s("softmax_log_sum", Op::Unit("log")),
            s("softmax_sub", Op::Sub),
        ];
        if !fused {
            stages.push(s("softmax_exp_out", Op::Unit("exp")));
            stages.push(s("pv_log", Op::Unit("log")));
        }
        stages.extend([s("pv_add", Op::Add), s("pv_exp", Op::Unit("exp")), s("pv_sum", Op::Sum), s("out_scale", Op::Shift)]);
        Self { d_k, fused, stages }
    }

    /// Whether an exp unit feeds straight into a log unit anywhere.
    pub fn has_exp_log_pair(&self) -> bool {
        self.stages.windows(2).any(|w| w[0].op == Op::Unit("exp") && w[1].op == Op::Unit("log"))
    }

    /// Names of stages that apply a nonlinear function outside a unit.
    pub fn nonlinear_outside_units(&self) -> Vec<&'static str> {
        self.stages.iter().filter(|s| !s.op.is_unit() && !matches!(s.op, Op::Vmm | Op::Add | Op::Sub | Op::Max | Op::Sum | Op::Shift)).map(|s| s.name).collect()
    }
}

/// Smallest power of two at or above `v`.
pub fn pow2_ceil<T: Scalar>(v: T) -> T {
    if !(v > T::zero()) {
        return T::one();
    }
    T::of(2f64.powi(v.f64().log2().ceil() as i32))
}

/// Projection weights programmed for attention.
///
/// Each projection is stored as `[W | -W]` so both signs of every column reach
/// a log unit without an analog absolute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCore<T> {
    pub d_k: usize,
    pub wq: CrossbarImage<T>,
    pub wk: CrossbarImage<T>,
    pub wv: CrossbarImage<T>,
    /// Power-of-two full scales of the projected columns.
    pub m_q: T,
    pub m_k: T,
    pub m_v: T,
}

/// Fold `1/sqrt(d_k)` into the query and key weights, `d_k^(-1/4)` each.
pub fn fold_scale<T: Scalar>(wq: &Matrix<T>, wk: &Matrix<T>, d_k: usize) -> (Matrix<T>, Matrix<T>) {
    let s = T::of((d_k as f64).powf(-0.25));
    (wq.map(|v| v * s), wk.map(|v| v * s))
}

fn dual<T: Scalar>(w: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(w.rows, 2 * w.cols, |i, j| if j < w.cols { w[(i, j)] } else { -w[(i, j - w.cols)] })
}

impl<T: Scalar> AttentionCore<T> {
    /// Program already-folded projections; inputs are assumed in `[-x_max, x_max]`.
    pub fn program(wq: &Matrix<T>, wk: &Matrix<T>, wv: &Matrix<T>, x_max: T, noise: &NoiseSpec<T>) -> Result<Self> {
        if wq.cols != wk.cols || wq.rows != wk.rows || wv.rows != wq.rows {
            return Err(Error::Dimension("projection shapes disagree".into()));
        }
        let prog = |w: &Matrix<T>, id: u64| -> Result<(CrossbarImage<T>, T)> {
            let w_max = w.max_abs().max(T::of(1e-12));
            let img = program_asl(&dual(w), w_max, noise, id)?.with_x_max(x_max);
            let m = pow2_ceil(img.col_scale.iter().copied().fold(T::zero(), T::max));
            Ok((img, m))
        };
        let (wq_img, m_q) = prog(wq, 101)?;
        let (wk_img, m_k) = prog(wk, 102)?;
        let (wv_img, m_v) = prog(wv, 103)?;
        Ok(Self { d_k: wq.cols, wq: wq_img, wk: wk_img, wv: wv_img, m_q, m_k, m_v })
    }
}

/// Linear layer with log activation: one signed log code per output column.
fn linear_log<T: Scalar>(e: &mut Engine<'_, T>, img: &CrossbarImage<T>, m: T, x: &[T], read: u64) -> Result<Vec<LogVal>> {
    let draw = e.noise.map(|s| Draw::new(s, rng::key(e.stream, &[rng::stream::READ, img.id, read])));
    let out = vmm(img, x, draw, 1)?;
    tally_vmm(img, 1, &mut e.ledger);
    let d = img.cols / 2;
    let u = &e.units.log;
    let floor = 0;
    Ok((0..d)
        .map(|j| {
            let p = e.search(u, out.dot[j] / m);
            let n = e.search(u, out.dot[j + d] / m);
            if p == floor && n == floor {
                LogVal { neg: false, code: None }
            } else if p >= n {
                LogVal { neg: false, code: Some(p) }
            } else {
                LogVal { neg: true, code: Some(n) }
            }
        })
        .collect())
}

/// Single-head attention on crossbars and units.
///
/// With `fused`, the log-scale softmax output feeds the second product directly;
/// otherwise it passes through an explicit exp unit and log unit first.
pub fn attention<T: Scalar>(
    core: &AttentionCore<T>,
    xq: &Matrix<T>,
    xk: &Matrix<T>,
    xv: &Matrix<T>,
    units: &LogExpUnits<T>,
    noise: Option<&NoiseSpec<T>>,
    fused: bool,
) -> Result<(Matrix<T>, RunLedger)> {
    if xk.rows != xv.rows || xq.cols != core.wq.rows || xk.cols != core.wk.rows || xv.cols != core.wv.rows {
        return Err(Error::Dimension("token and weight shapes disagree".into()));
    }
    let mut e = Engine::new(units, noise, rng::stream::NAF ^ 0xa77e);
    let q: Vec<Vec<LogVal>> = (0..xq.rows).map(|i| linear_log(&mut e, &core.wq, core.m_q, xq.row(i), i as u64)).collect::<Result<_>>()?;
    let k: Vec<Vec<LogVal>> = (0..xk.rows).map(|i| linear_log(&mut e, &core.wk, core.m_k, xk.row(i), i as u64)).collect::<Result<_>>()?;
    let v: Vec<Vec<LogVal>> = (0..xv.rows).map(|i| linear_log(&mut e, &core.wv, core.m_v, xv.row(i), i as u64)).collect::<Result<_>>()?;
    let dv = core.wv.cols / 2;
    let score_scale = core.m_q * core.m_k / e.out_scale();
    let max = units.cfg.max_code();
    let mut out = Matrix::zeros(xq.rows, dv);
    for i in 0..xq.rows {
        let scores: Vec<T> = k.iter().map(|kj| T::of(e.dot_codes(&q[i], kj) as f64) * score_scale).collect();
        let mut z = e.softmax_log(&scores);
        if !fused {
            z = z.into_iter().map(|c| e.exp_then_log(c)).collect();
        }
        let p: Vec<LogVal> = z.iter().map(|&c| LogVal { neg: false, code: Some(max - c) }).collect();
        for d in 0..dv {
            let col: Vec<LogVal> = v.iter().map(|vj| vj[d]).collect();
            let s = e.dot_codes(&p, &col);
            out[(i, d)] = T::of(s as f64) * core.m_v / e.out_scale();
        }
    }
    Ok((out, e.ledger))
}

/// Float reference: `softmax(Q K^T / sqrt(d_k)) V` with unfolded weights.
pub fn attention_reference<T: Scalar>(
    xq: &Matrix<T>,
    xk: &Matrix<T>,
    xv: &Matrix<T>,
    wq: &Matrix<T>,
    wk: &Matrix<T>,
    wv: &Matrix<T>,
) -> Result<Matrix<T>> {
    let q = xq.matmul(wq)?;
    let k = xk.matmul(wk)?;
    let v = xv.matmul(wv)?;
    let scale = T::one() / T::of(wq.cols as f64).sqrt();
    let s = q.matmul(&k.transpose())?.map(|x| x * scale);
    let mut p = Matrix::zeros(s.rows, s.cols);
    for i in 0..s.rows {
        let row = softmax_reference(s.row(i));
        p.data[i * s.cols..(i + 1) * s.cols].copy_from_slice(&row);
    }
    p.matmul(&v)
}

pub fn softmax_reference<T: Scalar>(y: &[T]) -> Vec<T> {
    let m = y.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = y.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.iter().map(|&v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::quantize;
    use crate::crossbar::program_dsl;
    use rand::Rng;
    use std::sync::OnceLock;

    fn units() -> &'static LogExpUnits<f64> {
        static U: OnceLock<LogExpUnits<f64>> = OnceLock::new();
        U.get_or_init(|| LogExpUnits::new(LogExpConfig::default(), &NoiseSpec::noise_free()).unwrap())
    }

    fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::stream_rng(seed, &[rng::stream::DATA]);
        (0..n).map(|_| r.random_range(lo..hi)).collect()
    }

    #[test]
    fn mul_basics() {
        let u = units();
        assert_eq!(mul_logexp(u, 0.0, 0.7, None), 0.0);
        assert_eq!(mul_logexp(u, 0.7, 0.0, None), 0.0);
        for b in [0.05, 0.3, 0.77, 1.0] {
            let got = mul_logexp(u, 1.0, b, None);
            assert!((got - b).abs() < b / 32.0 + 1.0 / 255.0, "b={b} got={got}");
        }
        assert!(mul_logexp(u, -0.5, 0.5, None) < 0.0);
        assert!(mul_logexp(u, -0.5, -0.5, None) > 0.0);
    }

    #[test]
    fn mul_is_commutative_and_accurate() {
        let u = units();
        let a = uniform(500, 0.0, 1.0, 1);
        let b = uniform(500, 0.0, 1.0, 2);
        let mut mse = 0.0;
        for (&x, &y) in a.iter().zip(&b) {
            let p = mul_logexp(u, x, y, None);
            assert_eq!(p, mul_logexp(u, y, x, None));
            mse += (p - x * y).powi(2);
        }
        mse /= 500.0;
        assert!(mse <= 5e-5, "mse {mse}");
    }

    #[test]
    fn dot_one_hot_and_long_vectors() {
        let u = units();
        let a = uniform(16, 0.0, 1.0, 3);
        let mut b = vec![0.0; 16];
        b[5] = 1.0;
        let got = dot_logexp(u, &a, &b, None).unwrap();
        assert!((got - a[5]).abs() < a[5] / 32.0 + 1.0 / 255.0);
        let a = uniform(256, 0.0, 1.0, 4);
        let b = uniform(256, 0.0, 1.0, 5);
        let exact: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let got = dot_logexp(u, &a, &b, None).unwrap();
        assert!((got / exact - 1.0).abs() < 0.02, "got {got} exact {exact}");
        assert!(dot_logexp(u, &a, &b[..3], None).is_err());
    }

    #[test]
    fn dot_event_counts() {
        let u = units();
        let a = uniform(256, 0.1, 1.0, 6);
        let mut e = Engine::new(u, None, 0);
        e.dot(&a, &a).unwrap();
        assert_eq!(e.ledger.get(Event::AcamUnitEval), 3 * 256);
        assert_eq!(e.ledger.get(Event::AdderOp), 256 + 255);
        assert_eq!(e.ledger.get(Event::AcamCellSearch), 130 * 3 * 256);
    }

    #[test]
    fn softmax_uniform_and_single() {
        let u = units();
        let step = 1.0 / 255.0;
        for l in [1usize, 4, 10, 64] {
            let p = softmax_logexp(u, &vec![0.3; l], None);
            for v in p {
                assert!((v - 1.0 / l as f64).abs() <= step, "L={l} v={v}");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let u = units();
        let y = uniform(64, -3.0, 3.0, 7);
        let p = softmax_logexp(u, &y, None);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() <= 64.0 / 255.0);
        let r = softmax_reference(&y);
        let err: f64 = p.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.01, "max err {err}");
    }

    #[test]
    fn exp_then_log_is_identity_on_the_grid() {
        let u = units();
        let mut e = Engine::new(u, None, 0);
        for k in 0..=255 {
            assert_eq!(e.exp_then_log(k), k);
        }
    }

    #[test]
    fn graphs_are_structurally_sound() {
        let f = AttentionGraph::new(8, true);
        let g = AttentionGraph::new(8, false);
        assert!(!f.has_exp_log_pair());
        assert!(g.has_exp_log_pair());
        assert!(f.nonlinear_outside_units().is_empty());
        assert!(g.nonlinear_outside_units().is_empty());
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let u = units();
        let nf = NoiseSpec::noise_free();
        let wq = Matrix::from_fn(4, 4, |i, j| if i == j { 0.5 } else { 0.1 });
        let (fq, fk) = fold_scale(&wq, &wq, 4);
        let wv = Matrix::identity(4);
        let core = AttentionCore::program(&fq, &fk, &wv, 1.0, &nf).unwrap();
        let x = Matrix::from_vec(1, 4, vec![0.2, -0.4, 0.6, 0.9]).unwrap();
        let (out, _) = attention(&core, &x, &x, &x, u, None, true).unwrap();
        for d in 0..4 {
            assert!((out[(0, d)] - x[(0, d)]).abs() < 0.03, "{:?}", out.data);
        }
    }

    #[test]
    fn core_modes() {
        let nf = NoiseSpec::<f64>::noise_free();
        let mut l = RunLedger::new();
        let w = Matrix::from_vec(3, 2, uniform(6, -1.0, 1.0, 8)).unwrap();
        let q = QuantSpec::new(-1.0, 1.0, -1.0, 1.0, 8, Encoding::Binary).unwrap();

        let xb = CoreConfig::crossbar_only(program_dsl(&w, &q, &nf, 0).unwrap(), &nf).unwrap();
        let x = [0.5, -0.25, 0.75];
        let out = run_core(&xb, &x, None, &mut l).unwrap();
        let analog = vmm(&xb.crossbar, &x, None, 1).unwrap().analog_out;
        let idq = BuiltinFn::Identity.default_qspec::<f64>(8, Encoding::Binary);
        for (c, a) in out.iter().zip(&analog) {
            assert_eq!(*c, quantize(*a, &idq).unwrap());
        }

        let sig = BuiltinFn::Sigmoid;
        let unit = AcamUnit::program(&sig.compile(&sig.default_qspec(8, Encoding::Gray)).unwrap(), &nf, 7).unwrap();
        let ao = CoreConfig::acam_only(3, &unit, &nf).unwrap();
        let sq = sig.default_qspec::<f64>(8, Encoding::Binary);
        for (c, &xj) in run_core(&ao, &x, None, &mut l).unwrap().iter().zip(&x) {
            assert_eq!(*c, quantize(sig.eval(xj), &sq).unwrap());
        }

        let w4 = program_asl(&w, 1.0, &nf, 0).unwrap();
        let dual = CoreConfig { mode: Mode::DualCompute, crossbar: w4.clone(), units: vec![unit.clone(); 2] };
        let wx = w.vecmul(&x).unwrap();
        for (c, v) in run_core(&dual, &x, None, &mut l).unwrap().iter().zip(&wx) {
            assert_eq!(*c, quantize(sig.eval(*v), &sq).unwrap());
        }

        let bad = CoreConfig { mode: Mode::AcamOnly, crossbar: w4, units: vec![unit.clone(); 2] };
        assert!(matches!(run_core(&bad, &x, None, &mut l), Err(Error::Mode(_))));
        let bad = CoreConfig { mode: Mode::CrossbarOnly, ..dual.clone() };
        assert!(matches!(run_core(&bad, &x, None, &mut l), Err(Error::Mode(_))));
    }
}
