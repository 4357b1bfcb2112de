//! Multi-head self-attention with a relative positional term on the query
//! side, ReLU (or softmax) attention and a terminal layer norm.
//!
//! Projection weights are stored `[D_out, D_in]` like every other linear
//! weight in the crate, so head `i` owns output rows `i*D_h..(i+1)*D_h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::FixedFormat;
use crate::layers::{add, layernorm, matmul_nt, quantize_activations, relu, scale_by, NormParams};
use crate::llt::LutQuantizer;
use crate::par;
use crate::tensor::{NumericPath, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionActivation {
    Relu,
    Softmax,
}

/// Learned row and column vectors whose broadcast sum is the `[N, D_h]`
/// positional table `R[(y, x)] = R_h[y] + R_w[x]`, with `n = y * W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosEncoding {
    r_h: Tensor,
    r_w: Tensor,
    table: Tensor,
}

impl RelPosEncoding {
    /// `r_h: [H, D_h]`, `r_w: [W, D_h]`, both on the same path.
    pub fn new(r_h: Tensor, r_w: Tensor) -> Result<Self> {
        let (h, d) = r_h.dims2()?;
        let (w, d2) = r_w.dims2()?;
        if d != d2 || r_h.path() != r_w.path() {
            return Err(Error::shape("RelPosEncoding::new", &[w, d], r_w.shape()));
        }
        let order_h: Vec<usize> = (0..h * w).map(|n| n / w).collect();
        let order_w: Vec<usize> = (0..h * w).map(|n| n % w).collect();
        let table = add(&r_h.gather_rows(&order_h)?, &r_w.gather_rows(&order_w)?)?;
        Ok(Self { r_h, r_w, table })
    }

    pub fn zeros(h: usize, w: usize, dim: usize, path: NumericPath) -> Self {
        Self::new(
            Tensor::zeros(&[h, dim], path),
            Tensor::zeros(&[w, dim], path),
        )
        .expect("consistent shapes")
    }

    pub fn r_h(&self) -> &Tensor {
        &self.r_h
    }

    pub fn r_w(&self) -> &Tensor {
        &self.r_w
    }

    /// The precomputed `[N, D_h]` table.
    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn tokens(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn to_fixed(&self, format: FixedFormat) -> Result<Self> {
        Self::new(self.r_h.to_fixed(format)?, self.r_w.to_fixed(format)?)
    }
}

/// One projection `X W^T`, optionally with LLT-quantized input.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub input_quant: Option<LutQuantizer>,
}

impl Projection {
    pub fn new(weight: Tensor) -> Self {
        Self {
            weight,
            input_quant: None,
        }
    }

    pub fn quantized(weight: Tensor, input_quant: LutQuantizer) -> Self {
        Self {
            weight,
            input_quant: Some(input_quant),
        }
    }

    fn apply(&self, x: &Tensor, rows: std::ops::Range<usize>) -> Result<Tensor> {
        let w = self.weight.rows(rows.start, rows.end)?;
        match &self.input_quant {
            Some(q) => matmul_nt(&quantize_activations(x, q)?, &w),
            None => matmul_nt(x, &w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub activation: AttentionActivation,
}

impl AttentionSpec {
    pub fn new(
        heads: usize,
        wq: Projection,
        wk: Projection,
        wv: Projection,
        activation: AttentionActivation,
    ) -> Result<Self> {
        let (d, d_in) = wq.weight.dims2()?;
        for p in [&wq, &wk, &wv] {
            if p.weight.shape() != [d, d] {
                return Err(Error::shape(
                    "AttentionSpec::new",
                    &[d, d],
                    p.weight.shape(),
                ));
            }
        }
        if d != d_in || heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {d} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            wq,
            wk,
            wv,
            activation,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.weight.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn param_count(&self) -> usize {
        3 * self.dim() * self.dim()
    }
}

/// `Q R^T` for `Q: [N, D_h]`.
pub fn build_relative_logits(q: &Tensor, rel: &RelPosEncoding) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    if rel.table().shape() != [n, d] {
        return Err(Error::shape(
            "build_relative_logits",
            &[n, d],
            rel.table().shape(),
        ));
    }
    matmul_nt(q, rel.table())
}

/// `act((Q K^T + Q R^T) / sqrt(D_h)) V` for one head.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rel: &RelPosEncoding,
    activation: AttentionActivation,
) -> Result<Tensor> {
    let (_, d_h) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attend", q.shape(), k.shape()));
    }
    let logits = add(&matmul_nt(q, k)?, &build_relative_logits(q, rel)?)?;
    let logits = scale_by(&logits, 1.0 / (d_h as f64).sqrt(), FixedFormat::WEIGHT)?;
    let a = attention_weights(&logits, activation)?;
    matmul_nt(&a, &v.transpose2()?)
}

/// Row-wise attention activation. Softmax on the fixed path is evaluated in
/// `f64` and rounded back into the logits' format.
pub fn attention_weights(logits: &Tensor, activation: AttentionActivation) -> Result<Tensor> {
    match activation {
        AttentionActivation::Relu => relu(logits),
        AttentionActivation::Softmax => {
            let (n, m) = logits.dims2()?;
            let vals = logits.to_f64_vec();
            let mut out = Vec::with_capacity(n * m);
            for row in vals.chunks(m) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.into_iter().map(|v| v / s));
            }
            match logits.path() {
                NumericPath::Float32 => {
                    Tensor::from_f32(&[n, m], out.into_iter().map(|v| v as f32).collect())
                }
                NumericPath::Fixed(fmt) => Ok(Tensor::from_raw_unchecked(
                    &[n, m],
                    fmt,
                    out.into_iter()
                        .map(|v| fmt.raw_from_f64(v) as i32)
                        .collect(),
                )),
                NumericPath::Int { .. } => Err(logits.unsupported("softmax")),
            }
        }
    }
}

/// Head `head` of the block: project `x: [N, D]` onto its column slice and
/// attend.
pub fn self_attention_head(
    x: &Tensor,
    spec: &AttentionSpec,
    head: usize,
    rel: &RelPosEncoding,
) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if d != spec.dim() {
        return Err(Error::shape(
            "self_attention_head",
            &[x.shape()[0], spec.dim()],
            x.shape(),
        ));
    }
    if head >= spec.heads {
        return Err(Error::InvalidConfig(format!(
            "head {head} of {}",
            spec.heads
        )));
    }
    let dh = spec.head_dim();
    let cols = head * dh..(head + 1) * dh;
    let q = spec.wq.apply(x, cols.clone())?;
    let k = spec.wk.apply(x, cols.clone())?;
    let v = spec.wv.apply(x, cols)?;
    attend(&q, &k, &v, rel, spec.activation)
}

/// Concatenated head outputs `[N, D]` before the layer norm.
pub fn multi_head(x: &Tensor, spec: &AttentionSpec, rel: &[RelPosEncoding]) -> Result<Tensor> {
    if rel.len() != spec.heads {
        return Err(Error::InvalidConfig(format!(
            "{} positional encodings for {} heads",
            rel.len(),
            spec.heads
        )));
    }
    let heads = par::try_map_range(spec.heads, |h| self_attention_head(x, spec, h, &rel[h]))?;
    Tensor::concat_cols(&heads)
}

/// `LayerNorm([SA_1(X); ...; SA_k(X)])`.
pub fn mhsa(
    x: &Tensor,
    spec: &AttentionSpec,
    rel: &[RelPosEncoding],
    ln: &NormParams,
) -> Result<Tensor> {
    layernorm(&multi_head(x, spec, rel)?, ln)
}

/// Sinusoidal absolute position table `[N, D]`: even columns
/// `sin(pos / 10000^(2i/D))`, odd columns the matching cosine.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Tensor {
    let mut out = Vec::with_capacity(n * d);
    for pos in 0..n {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Tensor::from_f32(&[n, d], out).expect("shape matches data")
}
