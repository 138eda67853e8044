//! Noise-aware simulator for in-memory compute cores built from RRAM crossbars
//! and analog content-addressable memory (ACAM) units.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acam;
pub mod codes;
pub mod config;
pub mod cost;
pub mod crossbar;
pub mod dtcompile;
pub mod error;
pub mod matrix;
pub mod naf;
pub mod noisefault;
pub mod pipelines;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations.
pub mod f64 {
    pub type AcamUnit = crate::acam::AcamUnit<f64>;
    pub type CompiledFunction = crate::dtcompile::CompiledFunction<f64>;
    pub type Config = crate::config::Config<f64>;
    pub type CrossbarImage = crate::crossbar::CrossbarImage<f64>;
    pub type LogExpUnits = crate::pipelines::LogExpUnits<f64>;
    pub type Matrix = crate::matrix::Matrix<f64>;
    pub type NoiseSpec = crate::noisefault::NoiseSpec<f64>;
    pub type QuantSpec = crate::codes::QuantSpec<f64>;
    pub type SoftAcamParams = crate::naf::SoftAcamParams<f64>;
    pub type UnitImage = crate::acam::UnitImage<f64>;
}

/// Single-precision instantiations.
pub mod f32 {
    pub type AcamUnit = crate::acam::AcamUnit<f32>;
    pub type CompiledFunction = crate::dtcompile::CompiledFunction<f32>;
    pub type Config = crate::config::Config<f32>;
    pub type CrossbarImage = crate::crossbar::CrossbarImage<f32>;
    pub type LogExpUnits = crate::pipelines::LogExpUnits<f32>;
    pub type Matrix = crate::matrix::Matrix<f32>;
    pub type NoiseSpec = crate::noisefault::NoiseSpec<f32>;
    pub type QuantSpec = crate::codes::QuantSpec<f32>;
    pub type SoftAcamParams = crate::naf::SoftAcamParams<f32>;
    pub type UnitImage = crate::acam::UnitImage<f32>;
}
