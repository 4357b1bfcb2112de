//! Learnable lookup-table (LLT) quantization.
//!
//! Values are scaled by a per-layer `s`, clipped, and mapped onto the
//! `n`-bit grid `{i / 2^n}` through an integrated lookup table (I-LUT) of
//! `2^n * K` entries. Segment `i` of the table covers `[i/2^n, (i+1)/2^n)`
//! at granularity `K`; its first `j_i` entries hold level `i` and the rest
//! level `i + 1`, where `j_i in 1..=K` is the switch offset encoded by the
//! threshold `T_i = (i*K + j_i) / (2^n * K)`.
//!
//! Activations are clipped to `[0, 1]`. Weights are clipped to `[-1, 1]`
//! and looked up through the affine map `u = (w_hat + 1) / 2`, giving
//! signed codes `level - 2^(n-1)` limited to `+-(2^(n-1) - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::{div_round_half_away, FixedFormat};
use crate::tensor::Tensor;

/// Granularity used throughout the model.
pub const DEFAULT_GRANULARITY: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutQuantizer {
    bits: u32,
    granularity: usize,
    scale: f32,
    kind: QuantKind,
    /// Level `i` of each entry; the table value is `i / 2^n`.
    levels: Vec<u32>,
}

fn check_bits(bits: u32, granularity: usize) -> Result<()> {
    if !(1..=16).contains(&bits) || granularity == 0 {
        return Err(Error::InvalidConfig(format!(
            "LUT needs 1 <= n <= 16 and K >= 1 (got n={bits}, K={granularity})"
        )));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
        return Err(Error::NonPositiveScale(scale));
    }
    Ok(())
}

impl LutQuantizer {
    /// Table from per-segment switch offsets `j_i in 1..=K`.
    pub fn from_switch_offsets(
        offsets: &[u32],
        bits: u32,
        granularity: usize,
        kind: QuantKind,
        scale: f32,
    ) -> Result<Self> {
        check_bits(bits, granularity)?;
        check_scale(scale as f64)?;
        let segments = 1usize << bits;
        if offsets.len() != segments {
            return Err(Error::InvalidConfig(format!(
                "expected {segments} thresholds, got {}",
                offsets.len()
            )));
        }
        let mut levels = Vec::with_capacity(segments * granularity);
        for (i, &j) in offsets.iter().enumerate() {
            if !(1..=granularity as u32).contains(&j) {
                let value = (i * granularity) as f64 + j as f64;
                return Err(Error::ThresholdOutOfGrid {
                    index: i,
                    value: value / (segments * granularity) as f64,
                });
            }
            levels.extend((0..granularity as u32).map(|e| i as u32 + u32::from(e >= j)));
        }
        Ok(Self {
            bits,
            granularity,
            scale,
            kind,
            levels,
        })
    }

    /// Uniform quantizer: every threshold at its segment midpoint.
    pub fn canonical(bits: u32, granularity: usize, kind: QuantKind, scale: f32) -> Result<Self> {
        check_bits(bits, granularity)?;
        let mid = granularity.div_ceil(2) as u32;
        Self::from_switch_offsets(&vec![mid; 1 << bits], bits, granularity, kind, scale)
    }

    /// Validate a serialized table of values `i / 2^n`. `layer` names the
    /// owner in error messages.
    pub fn from_table(
        layer: &str,
        values: &[f32],
        bits: u32,
        granularity: usize,
        kind: QuantKind,
        scale: f32,
    ) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidLut {
            layer: layer.to_string(),
            reason,
        };
        check_bits(bits, granularity).map_err(|e| invalid(e.to_string()))?;
        check_scale(scale as f64).map_err(|e| invalid(e.to_string()))?;
        let segments = 1usize << bits;
        let expected = segments * granularity;
        if values.len() != expected {
            return Err(invalid(format!(
                "length {} != 2^n*K = {expected}",
                values.len()
            )));
        }
        let grid = (1u64 << bits) as f64;
        let mut levels = Vec::with_capacity(expected);
        for (idx, &v) in values.iter().enumerate() {
            let scaled = v as f64 * grid;
            if !scaled.is_finite() || scaled.fract() != 0.0 || !(0.0..=grid).contains(&scaled) {
                return Err(invalid(format!(
                    "entry {idx} = {v} is not on the 2^-{bits} grid"
                )));
            }
            levels.push(scaled as u32);
        }
        for (i, seg) in levels.chunks(granularity).enumerate() {
            let i = i as u32;
            if seg[0] != i {
                return Err(invalid(format!(
                    "segment {i} starts at level {} instead of {i}",
                    seg[0]
                )));
            }
            if let Some(pos) = seg.windows(2).position(|w| w[1] < w[0]) {
                return Err(invalid(format!(
                    "not monotone at entry {}",
                    i as usize * granularity + pos + 1
                )));
            }
            if seg.iter().any(|&l| l > i + 1) {
                return Err(invalid(format!(
                    "segment {i} leaves levels {{{i}, {}}}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            bits,
            granularity,
            scale,
            kind,
            levels,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn kind(&self) -> QuantKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    /// Table values `i / 2^n`.
    pub fn ilut(&self) -> Vec<f32> {
        let grid = (1u64 << self.bits) as f32;
        self.levels.iter().map(|&l| l as f32 / grid).collect()
    }

    /// Switch offset `j_i` of each segment.
    pub fn switch_offsets(&self) -> Vec<u32> {
        self.levels
            .chunks(self.granularity)
            .enumerate()
            .map(|(i, seg)| seg.iter().filter(|&&l| l == i as u32).count() as u32)
            .collect()
    }

    /// Thresholds `T_i` as reals.
    pub fn thresholds(&self) -> Vec<f64> {
        let size = self.len() as f64;
        self.switch_offsets()
            .iter()
            .enumerate()
            .map(|(i, &j)| (i * self.granularity) as f64 / size + j as f64 / size)
            .collect()
    }

    /// `Q_w = 2^(n-1) - 1` for weights, `Q_a = 2^n - 1` for activations.
    pub fn level_count(&self) -> u32 {
        match self.kind {
            QuantKind::Weight => (1 << (self.bits - 1)) - 1,
            QuantKind::Activation => (1 << self.bits) - 1,
        }
    }

    /// Table index for a clipped input: round half away from zero, then
    /// clamp into the table.
    pub fn index(&self, hat: f64) -> usize {
        let pos = (hat * self.len() as f64).round();
        if pos.is_nan() || pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.len() - 1)
        }
    }

    pub fn level(&self, hat: f64) -> u32 {
        self.levels[self.index(hat)]
    }

    /// Activation level for a real input (scale, clip, look up).
    pub fn activation_level(&self, a: f64) -> u32 {
        self.level((a / self.scale as f64).clamp(0.0, 1.0))
    }

    /// Float-path activation quantization `s_a * I-LUT[idx]`.
    pub fn fake_quantize(&self, a: f32) -> f32 {
        let grid = (1u64 << self.bits) as f32;
        self.scale * (self.activation_level(a as f64) as f32 / grid)
    }

    /// Integer multiplier for indexing straight from raw fixed-point input:
    /// `idx = round(raw * m / 2^32)`.
    pub fn fixed_index_multiplier(&self, format: FixedFormat) -> i64 {
        let m = self.len() as f64 / (self.scale as f64 * (format.frac_bits() as f64).exp2());
        (m * 2f64.powi(32)).round() as i64
    }

    /// Activation level for a raw fixed-point input, integer arithmetic only.
    pub fn activation_level_raw(&self, raw: i32, multiplier: i64) -> u32 {
        if raw <= 0 {
            return self.levels[0];
        }
        let idx = div_round_half_away(raw as i128 * multiplier as i128, 1i128 << 32);
        let idx = (idx as usize).min(self.len() - 1);
        self.levels[idx]
    }

    /// Real value of one weight code (`s_w / 2^(n-1)`).
    pub fn weight_step(&self) -> f32 {
        self.scale / (1u32 << (self.bits - 1)) as f32
    }

    /// Real value of one activation level (`s_a / 2^n`).
    pub fn activation_step(&self) -> f32 {
        self.scale / (1u64 << self.bits) as f32
    }

    /// Signed weight code for a real weight.
    pub fn weight_code(&self, w: f64) -> i32 {
        let hat = (w / self.scale as f64).clamp(-1.0, 1.0);
        let level = self.level((hat + 1.0) / 2.0) as i32;
        let limit = (1i32 << (self.bits - 1)) - 1;
        (level - (1 << (self.bits - 1))).clamp(-limit, limit)
    }
}

/// Table from real thresholds. Each `T_i` must sit on its admissible grid
/// `{(i*K + j) / (2^n * K) : j = 1..=K}`.
pub fn build_ilut(
    thresholds: &[f64],
    bits: u32,
    granularity: usize,
    kind: QuantKind,
    scale: f32,
) -> Result<LutQuantizer> {
    check_bits(bits, granularity)?;
    let size = ((1usize << bits) * granularity) as f64;
    let offsets = thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let pos = t * size;
            let rounded = pos.round();
            let j = rounded - (i * granularity) as f64;
            if (pos - rounded).abs() > 1e-6 || !(1.0..=granularity as f64).contains(&j) {
                return Err(Error::ThresholdOutOfGrid { index: i, value: t });
            }
            Ok(j as u32)
        })
        .collect::<Result<Vec<_>>>()?;
    LutQuantizer::from_switch_offsets(&offsets, bits, granularity, kind, scale)
}

/// `clip(x / s)` into `[-1, 1]` (weights) or `[0, 1]` (activations).
pub fn clip_scale(x: f64, scale: f64, kind: QuantKind) -> Result<f64> {
    check_scale(scale)?;
    let lo = match kind {
        QuantKind::Weight => -1.0,
        QuantKind::Activation => 0.0,
    };
    Ok((x / scale).clamp(lo, 1.0))
}

/// `s * I-LUT[round(a_hat * 2^n K)]`.
pub fn lut_lookup(a_hat: f64, q: &LutQuantizer) -> f64 {
    let grid = (1u64 << q.bits) as f64;
    q.scale as f64 * (q.level(a_hat) as f64 / grid)
}

/// Signed `n`-bit weight codes; dequantize with `code * scale / 2^(n-1)`.
pub fn quantize_weights(w: &Tensor, q: &LutQuantizer) -> Result<(Tensor, f32)> {
    if q.kind != QuantKind::Weight {
        return Err(Error::InvalidConfig(
            "quantize_weights needs a weight quantizer".into(),
        ));
    }
    let codes = w
        .to_f64_vec()
        .into_iter()
        .map(|v| q.weight_code(v))
        .collect();
    let t = Tensor::from_codes(w.shape(), q.bits, q.weight_step(), codes)?;
    Ok((t, q.scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantBudget {
    pub effective: bool,
    pub reduction: f64,
}

/// LUT plus two scales at 32 bits per entry (left side of the
/// effectiveness inequality).
pub fn lut_overhead_bits_f32(bits: u32, granularity: usize) -> u64 {
    32 * (((1u64 << bits) * granularity as u64) + 2)
}

/// LUT entries at `n` bits plus two 32-bit scales (on-chip footprint).
pub fn lut_overhead_bits_packed(bits: u32, granularity: usize) -> u64 {
    bits as u64 * (1u64 << bits) * granularity as u64 + 64
}

/// Whether LLT pays off for a layer of `params` weights, and the memory
/// reduction factor relative to 32-bit weights.
pub fn quant_budget(bits: u32, granularity: usize, params: u64) -> QuantBudget {
    let effective = lut_overhead_bits_f32(bits, granularity) < (32 - bits as u64) * params;
    let reduction = (32 * params) as f64
        / (bits as u64 * params + lut_overhead_bits_packed(bits, granularity)) as f64;
    QuantBudget {
        effective,
        reduction,
    }
}

/// Smallest layer size for which [`quant_budget`] reports `effective`.
pub fn min_effective_params(bits: u32, granularity: usize) -> u64 {
    lut_overhead_bits_f32(bits, granularity) / (32 - bits as u64) + 1
}
