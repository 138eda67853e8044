//! Experiment configuration: everything a run needs besides the seed.

use serde::{Deserialize, Serialize};

use crate::codes::Encoding;
use crate::cost::ComponentCosts;
use crate::error::{Error, Result};
use crate::naf::NafConfig;
use crate::noisefault::NoiseSpec;
use crate::pipelines::LogExpConfig;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub n_bits: u32,
    pub encoding: Encoding,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { n_bits: 8, encoding: Encoding::Gray }
    }
}

/// Problem sizes for the simulated workloads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shapes {
    /// Crossbar rows and columns.
    pub rows: usize,
    pub cols: usize,
    pub vec_len: usize,
    pub softmax_len: usize,
    pub tokens: usize,
    pub d_model: usize,
    pub d_k: usize,
    /// Inputs per function sweep.
    pub sweep_points: usize,
    /// Device seeds averaged in noisy evaluations.
    pub devices: usize,
    /// Random operand pairs for the multiplier.
    pub pairs: usize,
}

impl Default for Shapes {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            vec_len: 256,
            softmax_len: 64,
            tokens: 4,
            d_model: 8,
            d_k: 8,
            sweep_points: 4000,
            devices: 8,
            pairs: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    /// Fraction of devices stuck, low and high equally likely.
    pub rate: f64,
    /// Fault maps averaged per estimate.
    pub maps: usize,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self { rate: 0.05, maps: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Scalar"))]
pub struct Config<T> {
    pub seed: u64,
    pub quant: QuantConfig,
    pub noise: NoiseSpec<T>,
    pub costs: ComponentCosts,
    pub naf: NafConfig<T>,
    pub logexp: LogExpConfig<T>,
    pub shapes: Shapes,
    pub faults: FaultConfig,
}

impl<T: Scalar> Default for Config<T> {
    fn default() -> Self {
        Self {
            seed: 0,
            quant: QuantConfig::default(),
            noise: NoiseSpec::synthetic(0),
            costs: ComponentCosts::default(),
            naf: NafConfig::default(),
            logexp: LogExpConfig::default(),
            shapes: Shapes::default(),
            faults: FaultConfig::default(),
        }
    }
}

impl<T: Scalar> Config<T> {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.quant.n_bits) {
            return Err(Error::Config(format!("n_bits {} outside 1..=16", self.quant.n_bits)));
        }
        if !(0.0..=1.0).contains(&self.faults.rate) || self.faults.maps == 0 {
            return Err(Error::Config("fault rate must lie in [0, 1] with at least one map".into()));
        }
        let s = &self.shapes;
        if [s.rows, s.cols, s.vec_len, s.softmax_len, s.tokens, s.d_model, s.d_k, s.sweep_points, s.devices, s.pairs].contains(&0) {
            return Err(Error::Config("shapes must be positive".into()));
        }
        if !(self.logexp.softmax_lo < T::zero()) || !(1..=16).contains(&self.logexp.n_bits) {
            return Err(Error::Config("softmax_lo must be negative and log n_bits in 1..=16".into()));
        }
        self.noise.validate()?;
        self.costs.validate()?;
        self.naf.validate()
    }

    /// Noise spec keyed by the run seed.
    pub fn noise_spec(&self) -> NoiseSpec<T> {
        self.noise.with_seed(self.seed)
    }
}
