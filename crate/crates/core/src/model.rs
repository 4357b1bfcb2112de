//! The network: architecture table, weight loading and dual-path inference.
//!
//! ```text
//! pre   7x7 conv s2 -> BN -> ReLU -> 3x3 max pool s2           [64, 24, 24]
//! ode1  Euler x C over: time, DSC, BN, ReLU, time, DSC, BN      [64, 24, 24]
//! ds1   3x3 s2, BN, ReLU, 3x3, BN  (+ 1x1 s2, BN) -> ReLU       [128, 12, 12]
//! ode2  as ode1                                                 [128, 12, 12]
//! ds2   as ds1                                                  [256, 6, 6]
//! mhsa  time, 1x1 257->64, BN, MHSA + LN, time, 1x1 65->256, ReLU [256, 6, 6]
//! post  global average pool -> linear                           [10]
//! ```
//!
//! Pre- and post-processing always run in float. The feature blocks run on
//! the selected path. Layers of quantized blocks quantize their input
//! through their activation LUT and use n-bit weight codes on both paths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa, AttentionActivation, AttentionSpec, Projection, RelPosEncoding};
use crate::error::{Error, Result};
use crate::fixed::FixedFormat;
use crate::layers::{
    add, add_time, avgpool_global, batchnorm, conv2d, linear, maxpool3x3s2, quantize_activations,
    relu, ConvSpec, DscSpec, NormParams,
};
use crate::llt::{LutQuantizer, QuantKind};
use crate::ode::{ode_solve, DscOdeFunc, OdeBlockSpec};
use crate::tensor::{NumericPath, Tensor};
use crate::weights::{Decoded, Dtype, Metadata, WeightContainer};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 96;
pub const NUM_CLASSES: usize = 10;

/// Feature dimension of the attention block.
pub const ATTENTION_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    None,
    Llt4,
    Llt8,
}

impl QuantMode {
    pub fn bits(self) -> Option<u32> {
        match self {
            QuantMode::None => None,
            QuantMode::Llt4 => Some(4),
            QuantMode::Llt8 => Some(8),
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::None => "none",
            QuantMode::Llt4 => "llt4",
            QuantMode::Llt8 => "llt8",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(QuantMode::None),
            "llt4" => Ok(QuantMode::Llt4),
            "llt8" => Ok(QuantMode::Llt8),
            _ => Err(Error::InvalidConfig(format!("unknown quant mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferencePath {
    Float,
    Fixed,
}

impl fmt::Display for InferencePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferencePath::Float => "float",
            InferencePath::Fixed => "fixed",
        })
    }
}

impl FromStr for InferencePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(InferencePath::Float),
            "fixed" => Ok(InferencePath::Fixed),
            _ => Err(Error::InvalidConfig(format!("unknown numeric path `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Euler iterations `C` per ODE block.
    pub ode_iterations: usize,
    pub quant: QuantMode,
    pub heads: usize,
    /// LUT granularity `K`.
    pub granularity: usize,
    #[serde(default = "default_activation")]
    pub attention: AttentionActivation,
}

fn default_activation() -> AttentionActivation {
    AttentionActivation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ode_iterations: 10,
            quant: QuantMode::Llt8,
            heads: 4,
            granularity: crate::llt::DEFAULT_GRANULARITY,
            attention: AttentionActivation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ode_iterations == 0 {
            return Err(Error::InvalidConfig("ODE iterations must be >= 1".into()));
        }
        if self.heads == 0 || !ATTENTION_DIM.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "{} heads do not divide the attention dim {ATTENTION_DIM}",
                self.heads
            )));
        }
        if self.granularity == 0 {
            return Err(Error::InvalidConfig("LUT granularity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        ATTENTION_DIM / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Pre,
    Ode1,
    Ds1,
    Ode2,
    Ds2,
    Mhsa,
    Post,
}

impl BlockRole {
    pub const ALL: [BlockRole; 7] = [
        BlockRole::Pre,
        BlockRole::Ode1,
        BlockRole::Ds1,
        BlockRole::Ode2,
        BlockRole::Ds2,
        BlockRole::Mhsa,
        BlockRole::Post,
    ];

    /// The blocks that run on the selected numeric path.
    pub const FEATURE: [BlockRole; 5] = [
        BlockRole::Ode1,
        BlockRole::Ds1,
        BlockRole::Ode2,
        BlockRole::Ds2,
        BlockRole::Mhsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockRole::Pre => "pre",
            BlockRole::Ode1 => "ode1",
            BlockRole::Ds1 => "ds1",
            BlockRole::Ode2 => "ode2",
            BlockRole::Ds2 => "ds2",
            BlockRole::Mhsa => "mhsa",
            BlockRole::Post => "post",
        }
    }

    /// Blocks quantized by the DS+Block3 configuration.
    pub fn is_quantized_block(self) -> bool {
        matches!(self, BlockRole::Ds1 | BlockRole::Ds2 | BlockRole::Mhsa)
    }

    pub fn is_ode(self) -> bool {
        matches!(self, BlockRole::Ode1 | BlockRole::Ode2)
    }

    /// Output shape at the block boundary.
    pub fn output_shape(self) -> Vec<usize> {
        match self {
            BlockRole::Pre | BlockRole::Ode1 => vec![64, 24, 24],
            BlockRole::Ds1 | BlockRole::Ode2 => vec![128, 12, 12],
            BlockRole::Ds2 | BlockRole::Mhsa => vec![256, 6, 6],
            BlockRole::Post => vec![NUM_CLASSES],
        }
    }
}

impl fmt::Display for BlockRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `in_ch` counts all input channels; depth-wise layers have
    /// `groups == in_ch == out_ch`.
    Conv {
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        out_hw: usize,
    },
    /// Weight `[out, in]` applied to `tokens` rows.
    Dense {
        out_features: usize,
        in_features: usize,
        tokens: usize,
        bias: bool,
    },
    /// Folded normalization: `.scale` and `.shift`, each of `shape`.
    Norm { shape: Vec<usize> },
    /// Per-head `R_h: [h, head_dim]` and `R_w: [w, head_dim]`.
    RelPos {
        heads: usize,
        h: usize,
        w: usize,
        head_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub block: BlockRole,
    pub name: String,
    pub kind: LayerKind,
    /// Quantized (n-bit weights, LUT-quantized input) when the config
    /// enables LLT.
    pub quantizable: bool,
}

impl LayerDef {
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match &self.kind {
            LayerKind::Conv {
                out_ch,
                in_ch,
                kernel,
                groups,
                ..
            } => Some(vec![*out_ch, in_ch / groups, *kernel, *kernel]),
            LayerKind::Dense {
                out_features,
                in_features,
                ..
            } => Some(vec![*out_features, *in_features]),
            _ => None,
        }
    }

    /// Fan-in of one output element.
    pub fn fan_in(&self) -> usize {
        match &self.kind {
            LayerKind::Conv {
                in_ch,
                kernel,
                groups,
                ..
            } => in_ch / groups * kernel * kernel,
            LayerKind::Dense { in_features, .. } => *in_features,
            _ => 0,
        }
    }

    /// Weight elements of a conv or dense layer (no bias).
    pub fn weight_elements(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    /// Elements counted for the on-chip buffer. The positional term counts
    /// the precomputed `[N, D]` table `R`.
    pub fn buffer_elements(&self) -> usize {
        match &self.kind {
            LayerKind::Conv { .. } => self.weight_elements(),
            LayerKind::Dense {
                out_features, bias, ..
            } => self.weight_elements() + if *bias { *out_features } else { 0 },
            LayerKind::Norm { shape } => 2 * shape.iter().product::<usize>(),
            LayerKind::RelPos {
                heads,
                h,
                w,
                head_dim,
            } => heads * head_dim * h * w,
        }
    }

    /// Multiply-accumulates of one forward pass through this layer.
    pub fn macs(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv { out_ch, out_hw, .. } => {
                (*out_ch * out_hw * out_hw * self.fan_in()) as u64
            }
            LayerKind::Dense {
                out_features,
                in_features,
                tokens,
                ..
            } => (tokens * out_features * in_features) as u64,
            _ => 0,
        }
    }

    pub fn is_quantized(&self, config: &ModelConfig) -> bool {
        self.quantizable && config.quant.bits().is_some()
    }
}

fn conv(
    block: BlockRole,
    name: &str,
    (out_ch, in_ch): (usize, usize),
    (kernel, stride, padding): (usize, usize, usize),
    out_hw: usize,
    quantizable: bool,
) -> LayerDef {
    LayerDef {
        block,
        name: name.into(),
        kind: LayerKind::Conv {
            out_ch,
            in_ch,
            kernel,
            stride,
            padding,
            groups: 1,
            out_hw,
        },
        quantizable,
    }
}

fn depthwise(block: BlockRole, name: &str, ch: usize, out_hw: usize) -> LayerDef {
    LayerDef {
        block,
        name: name.into(),
        kind: LayerKind::Conv {
            out_ch: ch,
            in_ch: ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: ch,
            out_hw,
        },
        quantizable: false,
    }
}

fn norm(block: BlockRole, name: &str, shape: &[usize]) -> LayerDef {
    LayerDef {
        block,
        name: name.into(),
        kind: LayerKind::Norm {
            shape: shape.to_vec(),
        },
        quantizable: false,
    }
}

fn dense(
    block: BlockRole,
    name: &str,
    (out_f, in_f): (usize, usize),
    tokens: usize,
    bias: bool,
    q: bool,
) -> LayerDef {
    LayerDef {
        block,
        name: name.into(),
        kind: LayerKind::Dense {
            out_features: out_f,
            in_features: in_f,
            tokens,
            bias,
        },
        quantizable: q,
    }
}

/// Every parameterized layer of the model in execution order. Names are the
/// container prefixes (`<name>.weight`, `<name>.scale`, ...).
pub fn architecture(config: &ModelConfig) -> Vec<LayerDef> {
    use BlockRole::*;
    let mut l = vec![
        conv(Pre, "pre.conv", (64, INPUT_CHANNELS), (7, 2, 3), 48, false),
        norm(Pre, "pre.bn", &[64]),
    ];
    for (role, ch, hw) in [(Ode1, 64, 24), (Ode2, 128, 12)] {
        let p = role.name();
        for i in 1..=2 {
            l.push(depthwise(role, &format!("{p}.dsc{i}.dw"), ch + 1, hw));
            l.push(conv(
                role,
                &format!("{p}.dsc{i}.pw"),
                (ch, ch + 1),
                (1, 1, 0),
                hw,
                false,
            ));
            l.push(norm(role, &format!("{p}.bn{i}"), &[ch]));
        }
        let (ds, out, ohw) = if role == Ode1 {
            (Ds1, 2 * ch, hw / 2)
        } else {
            (Ds2, 2 * ch, hw / 2)
        };
        let p = ds.name();
        l.extend([
            conv(ds, &format!("{p}.conv1"), (out, ch), (3, 2, 1), ohw, true),
            norm(ds, &format!("{p}.bn1"), &[out]),
            conv(ds, &format!("{p}.conv2"), (out, out), (3, 1, 1), ohw, true),
            norm(ds, &format!("{p}.bn2"), &[out]),
            conv(
                ds,
                &format!("{p}.shortcut"),
                (out, ch),
                (1, 2, 0),
                ohw,
                true,
            ),
            norm(ds, &format!("{p}.bn_sc"), &[out]),
        ]);
    }
    let (d, n) = (ATTENTION_DIM, 36);
    l.extend([
        conv(Mhsa, "mhsa.conv_in", (d, 257), (1, 1, 0), 6, true),
        norm(Mhsa, "mhsa.bn", &[d]),
        dense(Mhsa, "mhsa.attn.wq", (d, d), n, false, true),
        dense(Mhsa, "mhsa.attn.wk", (d, d), n, false, true),
        dense(Mhsa, "mhsa.attn.wv", (d, d), n, false, true),
        LayerDef {
            block: Mhsa,
            name: "mhsa.attn.rel".into(),
            kind: LayerKind::RelPos {
                heads: config.heads,
                h: 6,
                w: 6,
                head_dim: config.head_dim(),
            },
            quantizable: false,
        },
        norm(Mhsa, "mhsa.ln", &[n, d]),
        conv(Mhsa, "mhsa.conv_out", (256, d + 1), (1, 1, 0), 6, true),
        dense(Post, "post.linear", (NUM_CLASSES, 256), 1, true, false),
    ]);
    l
}

/// A conv whose input may pass through an activation LUT first.
#[derive(Debug, Clone, PartialEq)]
struct QConv {
    spec: ConvSpec,
    act: Option<LutQuantizer>,
}

impl QConv {
    fn run(&self, x: &Tensor) -> Result<Tensor> {
        match &self.act {
            Some(q) => conv2d(&quantize_activations(x, q)?, &self.spec),
            None => conv2d(x, &self.spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DsBlock {
    conv1: QConv,
    bn1: NormParams,
    conv2: QConv,
    bn2: NormParams,
    shortcut: QConv,
    bn_sc: NormParams,
}

impl DsBlock {
    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let y = relu(&batchnorm(&self.conv1.run(x)?, &self.bn1)?)?;
        let y = batchnorm(&self.conv2.run(&y)?, &self.bn2)?;
        let s = batchnorm(&self.shortcut.run(x)?, &self.bn_sc)?;
        relu(&add(&y, &s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MhsaBlock {
    conv_in: QConv,
    bn: NormParams,
    attn: AttentionSpec,
    rel: Vec<RelPosEncoding>,
    ln: NormParams,
    conv_out: QConv,
}

impl MhsaBlock {
    /// The block is not iterated; its Add-time planes carry `t = 0`.
    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x.dims3()?;
        let y = batchnorm(&self.conv_in.run(&add_time(x, 0.0)?)?, &self.bn)?;
        let y = mhsa(&y.to_tokens()?, &self.attn, &self.rel, &self.ln)?.from_tokens(h, w)?;
        relu(&self.conv_out.run(&add_time(&y, 0.0)?)?)
    }
}

#[derive(Debug, Clone)]
struct FeatureBlocks {
    ode1: OdeBlockSpec<DscOdeFunc>,
    ds1: DsBlock,
    ode2: OdeBlockSpec<DscOdeFunc>,
    ds2: DsBlock,
    mhsa: MhsaBlock,
}

impl FeatureBlocks {
    fn run(&self, role: BlockRole, x: &Tensor) -> Result<Tensor> {
        match role {
            BlockRole::Ode1 => ode_solve(x, &self.ode1),
            BlockRole::Ds1 => self.ds1.run(x),
            BlockRole::Ode2 => ode_solve(x, &self.ode2),
            BlockRole::Ds2 => self.ds2.run(x),
            BlockRole::Mhsa => self.mhsa.run(x),
            BlockRole::Pre | BlockRole::Post => unreachable!("float-only block"),
        }
    }

    fn set_iterations(&mut self, c: usize) -> Result<()> {
        self.ode1 = OdeBlockSpec::new(self.ode1.rhs.clone(), c)?;
        self.ode2 = OdeBlockSpec::new(self.ode2.rhs.clone(), c)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub role: BlockRole,
    pub output: Tensor,
}

/// A loaded, immutable model.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: ModelConfig,
    metadata: Metadata,
    pre_conv: ConvSpec,
    pre_bn: NormParams,
    float: FeatureBlocks,
    fixed: FeatureBlocks,
    post_weight: Tensor,
    post_bias: Tensor,
}

/// Wire the model described by `config` from `weights`.
///
/// `config` must agree with the container on quantization, head count and
/// LUT granularity; the ODE iteration count is a runtime setting and is
/// taken from `config`.
pub fn build_model(config: &ModelConfig, weights: &WeightContainer) -> Result<ModelGraph> {
    config.validate()?;
    let stored = &weights.metadata.config;
    if (stored.quant, stored.heads, stored.granularity)
        != (config.quant, config.heads, config.granularity)
    {
        return Err(Error::InvalidConfig(format!(
            "weights were generated for quant {} / {} heads / K = {}, requested quant {} / {} heads / K = {}",
            stored.quant, stored.heads, stored.granularity, config.quant, config.heads, config.granularity
        )));
    }
    let l = Loader { c: weights, config };
    let pre_conv = ConvSpec::new(
        l.float("pre.conv.weight", &[64, INPUT_CHANNELS, 7, 7])?,
        2,
        3,
    )?;
    let pre_bn = l.norm("pre.bn", &[64])?.0;
    let (float, fixed) = l.feature_blocks()?;
    Ok(ModelGraph {
        config: config.clone(),
        metadata: weights.metadata.clone(),
        pre_conv,
        pre_bn,
        float,
        fixed,
        post_weight: l.float("post.linear.weight", &[NUM_CLASSES, 256])?,
        post_bias: l.float("post.linear.bias", &[NUM_CLASSES])?,
    })
}

impl ModelGraph {
    /// Build with the configuration stored in the container.
    pub fn from_container(weights: &WeightContainer) -> Result<Self> {
        build_model(&weights.metadata.config.clone(), weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    /// Same weights, different Euler iteration count.
    pub fn with_iterations(&self, c: usize) -> Result<Self> {
        let mut m = self.clone();
        m.float.set_iterations(c)?;
        m.fixed.set_iterations(c)?;
        m.config.ode_iterations = c;
        Ok(m)
    }

    /// The ODE right-hand side of `role` on `path`.
    pub fn ode_block(
        &self,
        role: BlockRole,
        path: InferencePath,
    ) -> Option<&OdeBlockSpec<DscOdeFunc>> {
        let b = self.blocks(path);
        match role {
            BlockRole::Ode1 => Some(&b.ode1),
            BlockRole::Ode2 => Some(&b.ode2),
            _ => None,
        }
    }

    fn blocks(&self, path: InferencePath) -> &FeatureBlocks {
        match path {
            InferencePath::Float => &self.float,
            InferencePath::Fixed => &self.fixed,
        }
    }

    /// Standardize a `[3, 96, 96]` image with values in `[0, 1]`.
    pub fn normalize_input(&self, image: &Tensor) -> Result<Tensor> {
        let expected = [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE];
        if image.shape() != expected {
            return Err(Error::shape("infer", &expected, image.shape()));
        }
        let plane = INPUT_SIZE * INPUT_SIZE;
        let (mean, std) = (self.metadata.input_mean, self.metadata.input_std);
        let data = image.to_float();
        let out = data
            .f32_data()?
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i / plane]) / std[i / plane])
            .collect();
        Tensor::from_f32(&expected, out)
    }

    /// Run one block. `pre` takes the raw image and `post` returns logits;
    /// feature blocks take their input on any path and convert it to `path`
    /// first (fixed inputs enter in the activation format).
    pub fn run_block(&self, role: BlockRole, x: &Tensor, path: InferencePath) -> Result<Tensor> {
        match role {
            BlockRole::Pre => {
                let x = self.normalize_input(x)?;
                let y = relu(&batchnorm(&conv2d(&x, &self.pre_conv)?, &self.pre_bn)?)?;
                maxpool3x3s2(&y)
            }
            BlockRole::Post => linear(
                &avgpool_global(&x.to_float())?,
                &self.post_weight,
                Some(&self.post_bias),
            ),
            _ => {
                let x = match (path, x.path()) {
                    (InferencePath::Float, _) => x.to_float(),
                    (InferencePath::Fixed, NumericPath::Float32) => {
                        x.to_fixed(FixedFormat::ACTIVATION)?
                    }
                    (InferencePath::Fixed, _) => x.clone(),
                };
                self.blocks(path).run(role, &x)
            }
        }
    }

    /// Outputs at every block boundary, `pre` through `post`.
    pub fn infer_trace(&self, image: &Tensor, path: InferencePath) -> Result<Vec<BlockOutput>> {
        let mut out = Vec::with_capacity(BlockRole::ALL.len());
        let mut x = image.clone();
        for role in BlockRole::ALL {
            x = self.run_block(role, &x, path)?;
            out.push(BlockOutput {
                role,
                output: x.clone(),
            });
        }
        Ok(out)
    }

    /// Class logits `[10]` for a `[3, 96, 96]` image in `[0, 1]`.
    pub fn infer(&self, image: &Tensor, path: InferencePath) -> Result<Tensor> {
        let mut x = image.clone();
        for role in BlockRole::ALL {
            x = self.run_block(role, &x, path)?;
        }
        Ok(x)
    }
}

pub fn argmax(logits: &Tensor) -> usize {
    logits
        .to_f64_vec()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

struct Loader<'a> {
    c: &'a WeightContainer,
    config: &'a ModelConfig,
}

impl Loader<'_> {
    fn entry(&self, name: &str, shape: &[usize]) -> Result<&crate::weights::Entry> {
        let e = self
            .c
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.into()))?;
        if e.shape != shape {
            return Err(Error::shape("weight load", shape, &e.shape));
        }
        Ok(e)
    }

    /// A full-precision tensor stored as `f32` or a fixed-point dtype.
    fn float(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let e = self.entry(name, shape)?;
        match e.dtype {
            Dtype::F32 | Dtype::Fx16_4 | Dtype::Fx20_10 => Ok(e.to_tensor()?.to_float()),
            Dtype::I8 | Dtype::I4Packed => Err(Error::WeightDtype {
                name: name.into(),
                reason: format!("expected a full-precision tensor, found {}", e.dtype.name()),
            }),
        }
    }

    fn norm(&self, name: &str, shape: &[usize]) -> Result<(NormParams, NormParams)> {
        let p = NormParams::new(
            self.float(&format!("{name}.scale"), shape)?,
            self.float(&format!("{name}.shift"), shape)?,
        )?;
        let fixed = p.to_fixed(FixedFormat::WEIGHT)?;
        Ok((p, fixed))
    }

    /// Float-path and fixed-path weights of a conv or dense layer, plus its
    /// activation quantizer when quantized.
    fn weight(&self, def: &LayerDef) -> Result<(Tensor, Tensor, Option<LutQuantizer>)> {
        let shape = def.weight_shape().expect("weighted layer");
        let name = format!("{}.weight", def.name);
        if !def.is_quantized(self.config) {
            let w = self.float(&name, &shape)?;
            let f = w.to_fixed(FixedFormat::WEIGHT)?;
            return Ok((w, f, None));
        }
        let bits = self.config.quant.bits().expect("quantized");
        let e = self.entry(&name, &shape)?;
        let stored_bits = match e.dtype {
            Dtype::I8 => 8,
            Dtype::I4Packed => 4,
            other => {
                return Err(Error::WeightDtype {
                    name,
                    reason: format!("quantized layer stored as {}", other.name()),
                })
            }
        };
        if stored_bits != bits {
            return Err(Error::WeightDtype {
                name,
                reason: format!("{stored_bits}-bit codes in a {bits}-bit model"),
            });
        }
        let limit = (1i32 << (bits - 1)) - 1;
        if let Decoded::Int(codes) = e.decode() {
            if codes.iter().any(|c| c.abs() > limit) {
                return Err(Error::WeightDtype {
                    name,
                    reason: format!("code outside +-{limit}"),
                });
            }
        }
        let codes = e.to_tensor()?;
        let lut_name = format!("{}.act_lut", def.name);
        let lut = self
            .c
            .get(&lut_name)
            .ok_or_else(|| Error::MissingWeight(lut_name.clone()))?;
        let values = match (lut.dtype, lut.decode()) {
            (Dtype::F32, Decoded::F32(v)) => v,
            _ => {
                return Err(Error::WeightDtype {
                    name: lut_name,
                    reason: "activation LUT must be f32".into(),
                })
            }
        };
        let scale = lut.scale.ok_or_else(|| Error::WeightDtype {
            name: lut_name.clone(),
            reason: "activation LUT without a scale".into(),
        })?;
        let q = LutQuantizer::from_table(
            &def.name,
            &values,
            bits,
            self.config.granularity,
            QuantKind::Activation,
            scale,
        )?;
        Ok((codes.clone(), codes, Some(q)))
    }

    fn find(&self, name: &str) -> LayerDef {
        architecture(self.config)
            .into_iter()
            .find(|d| d.name == name)
            .unwrap_or_else(|| panic!("layer {name} is in the architecture table"))
    }

    fn conv_pair(&self, name: &str) -> Result<(QConv, QConv)> {
        let def = self.find(name);
        let LayerKind::Conv {
            stride,
            padding,
            groups,
            ..
        } = def.kind
        else {
            unreachable!("{name} is a conv")
        };
        let (wf, wx, act) = self.weight(&def)?;
        let mk = |w: Tensor| {
            if groups > 1 {
                ConvSpec::depthwise(w, stride, padding)
            } else {
                ConvSpec::new(w, stride, padding)
            }
        };
        Ok((
            QConv {
                spec: mk(wf)?,
                act: act.clone(),
            },
            QConv { spec: mk(wx)?, act },
        ))
    }

    fn ode(
        &self,
        role: BlockRole,
        ch: usize,
    ) -> Result<(OdeBlockSpec<DscOdeFunc>, OdeBlockSpec<DscOdeFunc>)> {
        let p = role.name();
        let mut parts = Vec::new();
        for i in 1..=2 {
            let (dwf, dwx) = self.conv_pair(&format!("{p}.dsc{i}.dw"))?;
            let (pwf, pwx) = self.conv_pair(&format!("{p}.dsc{i}.pw"))?;
            let (bnf, bnx) = self.norm(&format!("{p}.bn{i}"), &[ch])?;
            parts.push((
                DscSpec::new(dwf.spec.weight, pwf.spec.weight)?,
                DscSpec::new(dwx.spec.weight, pwx.spec.weight)?,
                bnf,
                bnx,
            ));
        }
        let (a, b) = (parts.remove(0), parts.remove(0));
        let c = self.config.ode_iterations;
        Ok((
            OdeBlockSpec::new(
                DscOdeFunc {
                    dsc1: a.0,
                    bn1: a.2,
                    dsc2: b.0,
                    bn2: b.2,
                },
                c,
            )?,
            OdeBlockSpec::new(
                DscOdeFunc {
                    dsc1: a.1,
                    bn1: a.3,
                    dsc2: b.1,
                    bn2: b.3,
                },
                c,
            )?,
        ))
    }

    fn ds(&self, role: BlockRole, out: usize) -> Result<(DsBlock, DsBlock)> {
        let p = role.name();
        let (c1f, c1x) = self.conv_pair(&format!("{p}.conv1"))?;
        let (c2f, c2x) = self.conv_pair(&format!("{p}.conv2"))?;
        let (scf, scx) = self.conv_pair(&format!("{p}.shortcut"))?;
        let (b1f, b1x) = self.norm(&format!("{p}.bn1"), &[out])?;
        let (b2f, b2x) = self.norm(&format!("{p}.bn2"), &[out])?;
        let (bsf, bsx) = self.norm(&format!("{p}.bn_sc"), &[out])?;
        Ok((
            DsBlock {
                conv1: c1f,
                bn1: b1f,
                conv2: c2f,
                bn2: b2f,
                shortcut: scf,
                bn_sc: bsf,
            },
            DsBlock {
                conv1: c1x,
                bn1: b1x,
                conv2: c2x,
                bn2: b2x,
                shortcut: scx,
                bn_sc: bsx,
            },
        ))
    }

    fn mhsa(&self) -> Result<(MhsaBlock, MhsaBlock)> {
        let d = ATTENTION_DIM;
        let (cif, cix) = self.conv_pair("mhsa.conv_in")?;
        let (cof, cox) = self.conv_pair("mhsa.conv_out")?;
        let (bnf, bnx) = self.norm("mhsa.bn", &[d])?;
        let (lnf, lnx) = self.norm("mhsa.ln", &[36, d])?;
        let mut proj = Vec::new();
        for w in ["wq", "wk", "wv"] {
            let (pf, px, act) = self.weight(&self.find(&format!("mhsa.attn.{w}")))?;
            let mk = |t: Tensor| Projection {
                weight: t,
                input_quant: act.clone(),
            };
            proj.push((mk(pf), mk(px)));
        }
        let (pv, pk, pq) = (
            proj.pop().unwrap(),
            proj.pop().unwrap(),
            proj.pop().unwrap(),
        );
        let heads = self.config.heads;
        let act = self.config.attention;
        let attn_f = AttentionSpec::new(heads, pq.0, pk.0, pv.0, act)?;
        let attn_x = AttentionSpec::new(heads, pq.1, pk.1, pv.1, act)?;
        let dh = self.config.head_dim();
        let mut rel_f = Vec::with_capacity(heads);
        let mut rel_x = Vec::with_capacity(heads);
        for h in 0..heads {
            let r = RelPosEncoding::new(
                self.float(&format!("mhsa.attn.rel{h}.r_h"), &[6, dh])?,
                self.float(&format!("mhsa.attn.rel{h}.r_w"), &[6, dh])?,
            )?;
            rel_x.push(r.to_fixed(FixedFormat::WEIGHT)?);
            rel_f.push(r);
        }
        Ok((
            MhsaBlock {
                conv_in: cif,
                bn: bnf,
                attn: attn_f,
                rel: rel_f,
                ln: lnf,
                conv_out: cof,
            },
            MhsaBlock {
                conv_in: cix,
                bn: bnx,
                attn: attn_x,
                rel: rel_x,
                ln: lnx,
                conv_out: cox,
            },
        ))
    }

    fn feature_blocks(&self) -> Result<(FeatureBlocks, FeatureBlocks)> {
        let (o1f, o1x) = self.ode(BlockRole::Ode1, 64)?;
        let (d1f, d1x) = self.ds(BlockRole::Ds1, 128)?;
        let (o2f, o2x) = self.ode(BlockRole::Ode2, 128)?;
        let (d2f, d2x) = self.ds(BlockRole::Ds2, 256)?;
        let (mf, mx) = self.mhsa()?;
        Ok((
            FeatureBlocks {
                ode1: o1f,
                ds1: d1f,
                ode2: o2f,
                ds2: d2f,
                mhsa: mf,
            },
            FeatureBlocks {
                ode1: o1x,
                ds1: d1x,
                ode2: o2x,
                ds2: d2x,
                mhsa: mx,
            },
        ))
    }
}
