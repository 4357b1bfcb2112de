//! Layers of the network, each runnable on the float and fixed/quantized
//! numeric paths.

mod conv;
mod norm;
mod ops;
mod quant;

pub use conv::{conv2d, dsc, dsc_param_count, ConvSpec, DscSpec};
pub use norm::{batchnorm, batchnorm_fold, layernorm, NormParams, LAYERNORM_EPS};
pub use ops::{add, add_time, avgpool_global, linear, matmul_nt, maxpool3x3s2, relu, scale_by};
pub use quant::quantize_activations;

use crate::fixed::{round_shift, FixedFormat};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Fractional bits of the requantization multiplier.
const REQUANT_FRAC: u32 = 40;

/// Convert integer dot products whose unit is `unit` (e.g. `step_a *
/// step_w`) into raw codes of `out`, via one fixed-point multiply and one
/// round-half-even shift.
pub(crate) fn requantize_codes(acc: &[i64], unit: f64, out: FixedFormat) -> Vec<i32> {
    let m = (unit * (out.frac_bits() as f64).exp2() * (REQUANT_FRAC as f64).exp2()).round() as i128;
    acc.iter()
        .map(|&v| out.saturate(round_shift(v as i128 * m, REQUANT_FRAC)) as i32)
        .collect()
}
