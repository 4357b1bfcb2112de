//! Dual-path inference engine for a tiny Neural-ODE / self-attention hybrid
//! CNN: a float32 reference path and a bit-accurate fixed-point path with
//! lookup-table (LLT) quantization, plus parameter and memory accounting.

pub mod accounting;
pub mod attention;
pub mod error;
pub mod fixed;
pub mod init;
pub mod layers;
pub mod llt;
pub mod model;
pub mod ode;
pub mod par;
pub mod tensor;
pub mod weights;

pub use accounting::{account, flops, AccountingReport};
pub use error::{Error, Result};
pub use fixed::{AccumulatorSpec, FixedFormat, FixedScalar};
pub use init::gen_random_weights;
pub use llt::{LutQuantizer, QuantKind};
pub use model::{build_model, BlockRole, InferencePath, ModelConfig, ModelGraph, QuantMode};
pub use tensor::{NumericPath, Tensor};
pub use weights::{ContainerError, WeightContainer};
