//! Parameter, memory and compute accounting.
//!
//! Element counts come from the architecture table. Each block row carries
//! the published buffer size next to the computed one; several published
//! totals disagree with their own formulas and both are kept.
//!
//! Footprint bits follow the accelerator formats: quantized weights and the
//! activations that feed quantized layers at `n` bits, other weights in
//! Q4.12 (16 bits), other activations in Q10.10 (20 bits), and per quantized
//! layer one activation LUT of `n * 2^n * K` bits plus two 32-bit scales.
//! Footprints are reported in MiB (`2^20` bytes).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::llt::{lut_overhead_bits_packed, min_effective_params, quant_budget};
use crate::model::{
    architecture, BlockRole, LayerDef, LayerKind, ModelConfig, ModelGraph, QuantMode,
};

/// Published weight-buffer sizes of the feature blocks.
pub const PUBLISHED_BLOCK_ELEMENTS: [(BlockRole, u64); 5] = [
    (BlockRole::Ode1, 9_618),
    (BlockRole::Ode2, 35_858),
    (BlockRole::Ds1, 237_047),
    (BlockRole::Ds2, 925_943),
    (BlockRole::Mhsa, 64_433),
];
pub const PUBLISHED_FEATURE_TOTAL: u64 = 1_272_899;
pub const PUBLISHED_TOTAL_PARAMS: f64 = 1.26e6;
/// Intermediate feature-map buffers of the accelerator, in elements.
pub const ACTIVATION_BUFFER_ELEMENTS: u64 = 261_648;
pub const PUBLISHED_FOOTPRINT_MIB_4BIT: f64 = 1.23;
pub const PUBLISHED_FOOTPRINT_MIB_8BIT: f64 = 1.88;
pub const PUBLISHED_GFLOPS: f64 = 0.21;

pub const WEIGHT_BITS: u64 = 16;
pub const ACTIVATION_BITS: u64 = 20;

/// One FLOP per multiply and one per add.
pub const FLOP_CONVENTION: &str = "FLOPs = 2 x MAC over convolutions, linear layers and the \
     three attention matrix products; ODE blocks counted C times; norms, activations and \
     pooling excluded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAccount {
    pub block: BlockRole,
    /// Weight-buffer elements by the per-layer formulas.
    pub computed_elements: u64,
    pub published_elements: Option<u64>,
    /// `computed - published`, when a published value exists.
    pub deviation: Option<i64>,
    /// Weight elements stored as `n`-bit codes.
    pub quantized_elements: u64,
    pub quantized_layers: usize,
    /// `2^n K + 2` per quantized layer (LUT entries and two scales).
    pub lut_elements: u64,
    /// Weights at 32 bits, except quantized layers at `n * N_p` plus LUT and
    /// scales at `n * 2^n K + 64`.
    pub weight_bits_32: u64,
    /// Weights under the accelerator formats (see module docs).
    pub weight_bits: u64,
    /// Multiply-accumulates of one pass, ODE blocks including all `C`
    /// iterations.
    pub macs: u64,
}

impl BlockAccount {
    pub fn matches_published(&self) -> Option<bool> {
        self.deviation.map(|d| d == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub quant: QuantMode,
    pub quantized_weight_elements: u64,
    pub other_weight_elements: u64,
    pub lut_bits: u64,
    pub activation_elements: u64,
    /// Activations feeding a quantized layer, held as `n`-bit levels.
    pub quantized_activation_elements: u64,
    pub weight_bits: u64,
    pub activation_bits: u64,
    pub total_bits: u64,
    pub mib: f64,
    pub published_mib: Option<f64>,
    /// `mib / published_mib - 1`.
    pub relative_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub convention: String,
    pub ode_iterations: usize,
    pub macs: u64,
    /// MACs of the ODE blocks over all iterations.
    pub ode_macs: u64,
    pub flops: u64,
    pub gflops: f64,
    pub published_gflops: f64,
    pub relative_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantBudgetRow {
    pub layer: String,
    pub bits: u32,
    pub params: u64,
    /// `32 * N_p`.
    pub full_precision_bits: u64,
    /// `n * N_p + n * 2^n K + 64`.
    pub quantized_bits: u64,
    pub effective: bool,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub config: ModelConfig,
    /// Rows for every block, `pre` through `post`.
    pub blocks: Vec<BlockAccount>,
    /// Sum over the five feature blocks.
    pub feature_elements: u64,
    pub published_feature_elements: u64,
    /// `feature_elements / published - 1`.
    pub feature_relative_deviation: f64,
    /// All trainable parameters, including pre- and post-processing.
    pub total_params: u64,
    pub published_total_params: f64,
    pub footprint: Footprint,
    pub flops: FlopCount,
    /// Smallest `N_p` for which quantization pays off at this bit width.
    pub min_effective_params: Option<u64>,
    pub quant_budget: Vec<QuantBudgetRow>,
}

impl AccountingReport {
    pub fn block(&self, role: BlockRole) -> &BlockAccount {
        self.blocks
            .iter()
            .find(|b| b.block == role)
            .expect("every block has a row")
    }
}

fn layer_macs(def: &LayerDef, config: &ModelConfig) -> u64 {
    let attention = match &def.kind {
        // Q K^T, Q R^T and A V, each N x N x D over all heads.
        LayerKind::RelPos {
            h,
            w,
            head_dim,
            heads,
        } => {
            let n = (h * w) as u64;
            3 * n * n * (head_dim * heads) as u64
        }
        _ => 0,
    };
    let per_pass = def.macs() + attention;
    if def.block.is_ode() {
        per_pass * config.ode_iterations as u64
    } else {
        per_pass
    }
}

fn block_account(role: BlockRole, layers: &[LayerDef], config: &ModelConfig) -> BlockAccount {
    let bits = config.quant.bits().unwrap_or(32) as u64;
    let mut acc = BlockAccount {
        block: role,
        computed_elements: 0,
        published_elements: PUBLISHED_BLOCK_ELEMENTS
            .iter()
            .find(|(r, _)| *r == role)
            .map(|p| p.1),
        deviation: None,
        quantized_elements: 0,
        quantized_layers: 0,
        lut_elements: 0,
        weight_bits_32: 0,
        weight_bits: 0,
        macs: 0,
    };
    for def in layers.iter().filter(|d| d.block == role) {
        let n = def.buffer_elements() as u64;
        acc.computed_elements += n;
        acc.macs += layer_macs(def, config);
        if def.is_quantized(config) {
            let b = bits as u32;
            let lut = lut_overhead_bits_packed(b, config.granularity);
            // a dense bias stays full precision
            let w = def.weight_elements() as u64;
            acc.quantized_elements += w;
            acc.quantized_layers += 1;
            acc.lut_elements += (1u64 << b) * config.granularity as u64 + 2;
            acc.weight_bits_32 += bits * w + lut + 32 * (n - w);
            acc.weight_bits += bits * w + lut + WEIGHT_BITS * (n - w);
        } else {
            acc.weight_bits_32 += 32 * n;
            acc.weight_bits += WEIGHT_BITS * n;
        }
    }
    acc.deviation = acc
        .published_elements
        .map(|p| acc.computed_elements as i64 - p as i64);
    acc
}

/// Elements of the `n`-bit buffers that feed quantized layers. DS block
/// inputs stay in the shared Q10.10 buffers and are quantized on the fly;
/// the MHSA block quantizes its time-augmented input into its own buffer.
fn quantized_activation_elements(layers: &[LayerDef], config: &ModelConfig) -> u64 {
    if config.quant.bits().is_none() {
        return 0;
    }
    let mut total = 0;
    for def in layers.iter().filter(|d| d.is_quantized(config)) {
        let name = def.name.as_str();
        let n = match (&def.kind, name) {
            (_, "ds1.conv1" | "ds1.shortcut" | "ds2.conv1" | "ds2.shortcut") => 0,
            // the three projections share one quantized copy of X
            (_, "mhsa.attn.wk" | "mhsa.attn.wv") => 0,
            (
                LayerKind::Conv {
                    in_ch,
                    out_hw,
                    stride,
                    ..
                },
                _,
            ) => {
                let in_hw = out_hw * stride;
                (in_ch * in_hw * in_hw) as u64
            }
            (
                LayerKind::Dense {
                    in_features,
                    tokens,
                    ..
                },
                _,
            ) => (in_features * tokens) as u64,
            _ => 0,
        };
        total += n;
    }
    total
}

fn footprint(blocks: &[BlockAccount], layers: &[LayerDef], config: &ModelConfig) -> Footprint {
    let features = blocks
        .iter()
        .filter(|b| BlockRole::FEATURE.contains(&b.block));
    let (mut q, mut other, mut luts) = (0, 0, 0);
    for b in features {
        q += b.quantized_elements;
        other += b.computed_elements - b.quantized_elements;
        luts += b.quantized_layers as u64;
    }
    let bits = config.quant.bits().map_or(0, u64::from);
    let lut_bits = config.quant.bits().map_or(0, |b| {
        luts * lut_overhead_bits_packed(b, config.granularity)
    });
    let qa = quantized_activation_elements(layers, config);
    let weight_bits = bits * q + WEIGHT_BITS * other + lut_bits;
    let activation_bits = bits * qa + ACTIVATION_BITS * (ACTIVATION_BUFFER_ELEMENTS - qa);
    let total_bits = weight_bits + activation_bits;
    let mib = total_bits as f64 / 8.0 / (1u64 << 20) as f64;
    let published_mib = match config.quant {
        QuantMode::Llt4 => Some(PUBLISHED_FOOTPRINT_MIB_4BIT),
        QuantMode::Llt8 => Some(PUBLISHED_FOOTPRINT_MIB_8BIT),
        QuantMode::None => None,
    };
    Footprint {
        quant: config.quant,
        quantized_weight_elements: q,
        other_weight_elements: other,
        lut_bits,
        activation_elements: ACTIVATION_BUFFER_ELEMENTS,
        quantized_activation_elements: qa,
        weight_bits,
        activation_bits,
        total_bits,
        mib,
        published_mib,
        relative_deviation: published_mib.map(|p| mib / p - 1.0),
    }
}

/// FLOP count of one inference under [`FLOP_CONVENTION`].
pub fn flops_for(config: &ModelConfig) -> FlopCount {
    let layers = architecture(config);
    let (mut macs, mut ode_macs) = (0, 0);
    for def in &layers {
        let m = layer_macs(def, config);
        macs += m;
        if def.block.is_ode() {
            ode_macs += m;
        }
    }
    let flops = 2 * macs;
    let gflops = flops as f64 / 1e9;
    FlopCount {
        convention: FLOP_CONVENTION.into(),
        ode_iterations: config.ode_iterations,
        macs,
        ode_macs,
        flops,
        gflops,
        published_gflops: PUBLISHED_GFLOPS,
        relative_deviation: gflops / PUBLISHED_GFLOPS - 1.0,
    }
}

/// Accounting for a configuration; needs no weights.
pub fn account_config(config: &ModelConfig) -> AccountingReport {
    let layers = architecture(config);
    let blocks: Vec<BlockAccount> = BlockRole::ALL
        .iter()
        .map(|&r| block_account(r, &layers, config))
        .collect();
    let feature_elements: u64 = blocks
        .iter()
        .filter(|b| BlockRole::FEATURE.contains(&b.block))
        .map(|b| b.computed_elements)
        .sum();
    let total_params = blocks.iter().map(|b| b.computed_elements).sum();
    let quant_budget = match config.quant.bits() {
        None => Vec::new(),
        Some(bits) => layers
            .iter()
            .filter(|d| d.is_quantized(config))
            .map(|d| {
                let params = d.weight_elements() as u64;
                let qb = quant_budget(bits, config.granularity, params);
                QuantBudgetRow {
                    layer: d.name.clone(),
                    bits,
                    params,
                    full_precision_bits: 32 * params,
                    quantized_bits: bits as u64 * params
                        + lut_overhead_bits_packed(bits, config.granularity),
                    effective: qb.effective,
                    reduction: qb.reduction,
                }
            })
            .collect(),
    };
    AccountingReport {
        config: config.clone(),
        footprint: footprint(&blocks, &layers, config),
        flops: flops_for(config),
        min_effective_params: config
            .quant
            .bits()
            .map(|b| min_effective_params(b, config.granularity)),
        feature_elements,
        published_feature_elements: PUBLISHED_FEATURE_TOTAL,
        feature_relative_deviation: feature_elements as f64 / PUBLISHED_FEATURE_TOTAL as f64 - 1.0,
        total_params,
        published_total_params: PUBLISHED_TOTAL_PARAMS,
        blocks,
        quant_budget,
    }
}

pub fn account(model: &ModelGraph) -> AccountingReport {
    account_config(model.config())
}

pub fn flops(model: &ModelGraph) -> f64 {
    flops_for(model.config()).flops as f64
}

impl fmt::Display for AccountingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "config: quant={} C={} heads={} K={} attention={:?}",
            c.quant, c.ode_iterations, c.heads, c.granularity, c.attention
        )?;
        writeln!(
            f,
            "{:<6} {:>10} {:>10} {:>8} {:>10} {:>14}",
            "block", "computed", "published", "delta", "quantized", "MAC"
        )?;
        for b in &self.blocks {
            let published = b
                .published_elements
                .map_or("-".to_string(), |p| p.to_string());
            let delta = match b.deviation {
                Some(0) => "ok".to_string(),
                Some(d) => format!("{d:+}"),
                None => "-".to_string(),
            };
            writeln!(
                f,
                "{:<6} {:>10} {:>10} {:>8} {:>10} {:>14}",
                b.block.name(),
                b.computed_elements,
                published,
                delta,
                b.quantized_elements,
                b.macs
            )?;
        }
        writeln!(
            f,
            "feature blocks: {} (published {}, {:+.2}%)",
            self.feature_elements,
            self.published_feature_elements,
            100.0 * self.feature_relative_deviation
        )?;
        writeln!(
            f,
            "parameters: {} ({:.3}M, published {:.2}M)",
            self.total_params,
            self.total_params as f64 / 1e6,
            self.published_total_params / 1e6
        )?;
        let fp = &self.footprint;
        write!(
            f,
            "local memory: {} bits = {:.4} MiB (weights {} bits, LUTs {} bits, activations {} bits)",
            fp.total_bits, fp.mib, fp.weight_bits - fp.lut_bits, fp.lut_bits, fp.activation_bits
        )?;
        if let (Some(p), Some(d)) = (fp.published_mib, fp.relative_deviation) {
            write!(f, ", published {p:.2} ({:+.2}%)", 100.0 * d)?;
        }
        writeln!(f)?;
        let fl = &self.flops;
        writeln!(
            f,
            "compute: {} MAC, {:.4} GFLOPs (published {:.2}, {:+.1}%)",
            fl.macs,
            fl.gflops,
            fl.published_gflops,
            100.0 * fl.relative_deviation
        )?;
        writeln!(f, "  {}", fl.convention)?;
        if let Some(min) = self.min_effective_params {
            writeln!(f, "quantization pays off for N_p >= {min}")?;
            for r in &self.quant_budget {
                writeln!(
                    f,
                    "  {:<16} N_p={:>7} {:>9} -> {:>8} bits  x{:.3}{}",
                    r.layer,
                    r.params,
                    r.full_precision_bits,
                    r.quantized_bits,
                    r.reduction,
                    if r.effective { "" } else { "  (not effective)" }
                )?;
            }
        }
        Ok(())
    }
}
