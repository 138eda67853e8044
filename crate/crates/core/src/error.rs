use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid quantization spec: {0}")]
    InvalidQuantSpec(String),

    #[error("expected {expected:?} encoding, got {got:?}")]
    WrongEncoding { expected: crate::codes::Encoding, got: crate::codes::Encoding },

    #[error("code word has {got} bits, spec expects {expected}")]
    CodeLength { expected: usize, got: usize },

    #[error("compilation failed: function is not finite at x = {x}")]
    NonFinite { x: f64 },

    #[error("bit {bit} needs {needed} rows but the array holds {capacity}")]
    CapacityExceeded { bit: usize, needed: usize, capacity: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("weight {value} at ({row}, {col}) outside [{lo}, {hi}]")]
    WeightOutOfRange { row: usize, col: usize, value: f64, lo: f64, hi: f64 },

    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),

    #[error("fault address out of range: {0}")]
    BadAddress(String),

    #[error("inconsistent core configuration: {0}")]
    Mode(String),

    #[error("unknown event kind `{0}`")]
    UnknownEvent(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InvalidQuantSpec(_) => "invalid_quant_spec",
            Error::WrongEncoding { .. } => "wrong_encoding",
            Error::CodeLength { .. } => "code_length",
            Error::NonFinite { .. } => "non_finite",
            Error::CapacityExceeded { .. } => "capacity_exceeded",
            Error::Dimension(_) => "dimension",
            Error::WeightOutOfRange { .. } => "weight_out_of_range",
            Error::InvalidNoise(_) => "invalid_noise",
            Error::BadAddress(_) => "bad_address",
            Error::Mode(_) => "mode",
            Error::UnknownEvent(_) => "unknown_event",
            Error::Config(_) => "config",
        }
    }
}
