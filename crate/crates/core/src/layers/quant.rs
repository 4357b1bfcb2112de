use crate::error::Result;
use crate::llt::LutQuantizer;
use crate::tensor::{NumericPath, Tensor};

/// LLT activation quantization of a layer input.
///
/// Float inputs come back as float values `s_a * I-LUT[idx]`; fixed inputs
/// become integer level codes with step `s_a / 2^n`, computed from the raw
/// codes with integer arithmetic only.
pub fn quantize_activations(x: &Tensor, q: &LutQuantizer) -> Result<Tensor> {
    match x.path() {
        NumericPath::Float32 => Tensor::from_f32(
            x.shape(),
            x.f32_data()?.iter().map(|&v| q.fake_quantize(v)).collect(),
        ),
        NumericPath::Fixed(fmt) => {
            let m = q.fixed_index_multiplier(fmt);
            let codes = x
                .raw_data()?
                .iter()
                .map(|&r| q.activation_level_raw(r, m) as i32)
                .collect();
            Tensor::from_codes(x.shape(), q.bits(), q.activation_step(), codes)
        }
        NumericPath::Int { .. } => Err(x.unsupported("quantize_activations")),
    }
}
