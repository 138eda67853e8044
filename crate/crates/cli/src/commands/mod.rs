pub mod compile;
pub mod faults;
pub mod naf;
pub mod simulate;
pub mod table1;

use anyhow::Result;
use imc_core::dtcompile::{output_range, BuiltinFn};
use imc_core::f64::{Config, QuantSpec};
use imc_core::Error;

/// Parse `LO:HI`.
pub fn parse_domain(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("domain `{s}` is not LO:HI"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

/// Quantization spec for `f`: the built-in default, or `domain` with the output
/// range the function takes there.
pub fn qspec_for(f: BuiltinFn, cfg: &Config, bits: Option<u32>, domain: Option<&str>) -> Result<QuantSpec> {
    let n = bits.unwrap_or(cfg.quant.n_bits);
    let q = match domain {
        None => f.default_qspec(n, cfg.quant.encoding),
        Some(d) => {
            let (lo, hi) = parse_domain(d)?;
            if !(lo < hi) {
                return Err(Error::Domain(format!("empty domain [{lo}, {hi}]")).into());
            }
            let (out_lo, out_hi) = output_range(|x| f.eval(x), lo, hi);
            QuantSpec::new(lo, hi, out_lo, out_hi, n, cfg.quant.encoding)?
        }
    };
    Ok(q)
}

/// Error statistics of outputs against their oracle.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mse: f64,
    pub mean_error: f64,
    pub error_variance: f64,
    pub max_abs_error: f64,
    /// Pearson correlation of output with oracle.
    pub correlation: f64,
}

impl ErrorStats {
    pub fn of(pairs: &[(f64, f64)]) -> Self {
        let n = pairs.len().max(1) as f64;
        let err: Vec<f64> = pairs.iter().map(|(o, r)| o - r).collect();
        let mean_error = err.iter().sum::<f64>() / n;
        let mse = err.iter().map(|e| e * e).sum::<f64>() / n;
        let error_variance = err.iter().map(|e| (e - mean_error).powi(2)).sum::<f64>() / n;
        let max_abs_error = err.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let mo = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mr = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = pairs.iter().map(|(o, r)| (o - mo) * (r - mr)).sum::<f64>();
        let vo = pairs.iter().map(|(o, _)| (o - mo).powi(2)).sum::<f64>();
        let vr = pairs.iter().map(|(_, r)| (r - mr).powi(2)).sum::<f64>();
        let correlation = if vo > 0.0 && vr > 0.0 { cov / (vo * vr).sqrt() } else { 0.0 };
        Self { count: pairs.len(), mse, mean_error, error_variance, max_abs_error, correlation }
    }
}
