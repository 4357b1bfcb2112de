use thiserror::Error;

use crate::weights::ContainerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format Q{integer_bits}.{frac_bits} ({total_bits} bits)")]
    InvalidFormat {
        total_bits: u32,
        integer_bits: u32,
        frac_bits: i64,
    },
    #[error("accumulator overflow: |{value}| does not fit in {width_bits} bits")]
    AccumulatorOverflow { value: i128, width_bits: u32 },
    #[error("fixed-point format mismatch: {0}")]
    FormatMismatch(String),
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} does not support the {path} numeric path")]
    UnsupportedPath { op: &'static str, path: String },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("threshold T_{index} = {value} is outside its admissible grid")]
    ThresholdOutOfGrid { index: usize, value: f64 },
    #[error("invalid LUT in layer `{layer}`: {reason}")]
    InvalidLut { layer: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),
    #[error("unexpected dtype for `{name}`: {reason}")]
    WeightDtype { name: String, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
