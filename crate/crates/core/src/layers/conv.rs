//! Convolutions and depth-wise separable convolution.
//!
//! Output channels are computed independently (and in parallel under the
//! `parallel` feature). Within one output element the accumulation order
//! is fixed: input channel, then kernel row, then kernel column.
//!
//! Supported operand pairs:
//!
//! | input            | weights          | output            |
//! |------------------|------------------|-------------------|
//! | float32          | float32          | float32           |
//! | float32          | int codes        | float32 (weights dequantized) |
//! | fixed `Qa`       | fixed `Qw`       | fixed `Qa`        |
//! | int codes (LLT)  | int codes        | fixed activation format |

use crate::error::{Error, Result};
use crate::fixed::{AccumulatorSpec, FixedFormat};
use crate::par;
use crate::tensor::{NumericPath, Tensor};

use super::{requantize_codes, Geometry};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 1 for dense convolution, `in_ch` for depth-wise.
    pub groups: usize,
    /// `[out_ch, in_ch / groups, kernel, kernel]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvSpec {
    pub fn new(weight: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out_ch, in_ch, kernel) = match weight.shape()[..] {
            [o, i, k, k2] if k == k2 => (o, i, k),
            _ => return Err(Error::shape("ConvSpec::new", &[0, 0, 0, 0], weight.shape())),
        };
        Self::build(weight, in_ch, out_ch, kernel, stride, padding, 1)
    }

    /// Depth-wise convolution over `channels` planes.
    pub fn depthwise(weight: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (channels, kernel) = match weight.shape()[..] {
            [c, 1, k, k2] if k == k2 => (c, k),
            _ => {
                return Err(Error::shape(
                    "ConvSpec::depthwise",
                    &[0, 1, 0, 0],
                    weight.shape(),
                ))
            }
        };
        Self::build(
            weight, channels, channels, kernel, stride, padding, channels,
        )
    }

    fn build(
        weight: Tensor,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidConfig(
                "kernel and stride must be >= 1".into(),
            ));
        }
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.shape() != [self.out_ch] {
            return Err(Error::shape(
                "ConvSpec::with_bias",
                &[self.out_ch],
                bias.shape(),
            ));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let (c, h, w) = x.dims3()?;
        if c != self.in_ch {
            return Err(Error::shape("conv2d", &[self.in_ch, h, w], x.shape()));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(
                "conv2d",
                &[c, self.kernel, self.kernel],
                x.shape(),
            ));
        }
        let (oh, ow) = self.output_size(h, w);
        Ok(Geometry {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            h,
            w,
            oh,
            ow,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        })
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(out: usize, input: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits the taps `(ic, ky, kx, weight_index)` of output channel `oc` in
/// accumulation order.
#[inline(always)]
fn for_each_tap(g: &Geometry, oc: usize, mut pass: impl FnMut(usize, usize, usize, usize)) {
    let in_per_group = g.in_ch / g.groups;
    let out_per_group = g.out_ch / g.groups;
    let group = oc / out_per_group;
    for icg in 0..in_per_group {
        let ic = group * in_per_group + icg;
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let widx = ((oc * in_per_group + icg) * g.kernel + ky) * g.kernel + kx;
                pass(ic, ky, kx, widx);
            }
        }
    }
}

fn conv_plane_f32(x: &[f32], wt: &[f32], g: &Geometry, oc: usize) -> Vec<f32> {
    let mut out = vec![0f32; g.oh * g.ow];
    let (ys, xs) = (g.stride, g.stride);
    for_each_tap(g, oc, |ic, ky, kx, widx| {
        let wv = wt[widx];
        let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        let (oy0, oy1) = tap_range(g.oh, g.h, ys, g.padding, ky);
        let (ox0, ox1) = tap_range(g.ow, g.w, xs, g.padding, kx);
        for oy in oy0..oy1 {
            let iy = oy * ys + ky - g.padding;
            let row = &plane[iy * g.w..(iy + 1) * g.w];
            let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
            if xs == 1 {
                let ix0 = ox0 + kx - g.padding;
                for (o, &v) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                    *o += wv * v;
                }
            } else {
                for ox in ox0..ox1 {
                    orow[ox] += wv * row[ox * xs + kx - g.padding];
                }
            }
        }
    });
    out
}

/// Exact integer accumulation; errors if any partial sum leaves the
/// accumulator width.
fn conv_plane_int(
    x: &[i32],
    wt: &[i32],
    g: &Geometry,
    oc: usize,
    spec: AccumulatorSpec,
    max_abs_x: i64,
) -> Result<Vec<i64>> {
    let mut out = vec![0i64; g.oh * g.ow];
    let in_per_group = g.in_ch / g.groups;
    let wslice =
        &wt[oc * in_per_group * g.kernel * g.kernel..][..in_per_group * g.kernel * g.kernel];
    let worst: i128 = wslice.iter().map(|&v| (v as i128).abs()).sum::<i128>() * max_abs_x as i128;
    let checked = worst >= spec.bound();
    let bound = spec.bound() as i64;
    let mut overflow = None;
    let s = g.stride;
    for_each_tap(g, oc, |ic, ky, kx, widx| {
        let wv = wt[widx] as i64;
        let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        let (oy0, oy1) = tap_range(g.oh, g.h, s, g.padding, ky);
        let (ox0, ox1) = tap_range(g.ow, g.w, s, g.padding, kx);
        for oy in oy0..oy1 {
            let iy = oy * s + ky - g.padding;
            let row = &plane[iy * g.w..(iy + 1) * g.w];
            let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
            if s == 1 {
                let ix0 = ox0 + kx - g.padding;
                for (o, &v) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                    *o += wv * v as i64;
                }
            } else {
                for ox in ox0..ox1 {
                    orow[ox] += wv * row[ox * s + kx - g.padding] as i64;
                }
            }
            if checked && overflow.is_none() {
                if let Some(&v) = orow.iter().find(|&&v| v >= bound || v < -bound) {
                    overflow = Some(v);
                }
            }
        }
    });
    match overflow {
        Some(value) => Err(Error::AccumulatorOverflow {
            value: value as i128,
            width_bits: spec.width_bits,
        }),
        None => Ok(out),
    }
}

fn max_abs(x: &[i32]) -> i64 {
    x.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0)
}

/// Cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = spec.geometry(x)?;
    let out_shape = [g.out_ch, g.oh, g.ow];
    match (x.path(), spec.weight.path()) {
        (NumericPath::Float32, NumericPath::Float32) => {
            let xs = x.f32_data()?;
            let ws = spec.weight.f32_data()?;
            conv_float(xs, ws, &g, spec, &out_shape)
        }
        (NumericPath::Float32, NumericPath::Int { step, .. }) => {
            let ws: Vec<f32> = spec
                .weight
                .raw_data()?
                .iter()
                .map(|&c| c as f32 * step)
                .collect();
            conv_float(x.f32_data()?, &ws, &g, spec, &out_shape)
        }
        (NumericPath::Fixed(af), NumericPath::Fixed(wf)) => {
            let xs = x.raw_data()?;
            let ws = spec.weight.raw_data()?;
            let acc_spec = AccumulatorSpec::DEFAULT;
            let mx = max_abs(xs);
            let planes =
                par::try_map_range(g.out_ch, |oc| conv_plane_int(xs, ws, &g, oc, acc_spec, mx))?;
            let acc_frac = af.frac_bits() + wf.frac_bits();
            let bias = fixed_bias(spec, acc_frac)?;
            let mut raw = Vec::with_capacity(g.out_ch * g.oh * g.ow);
            for (oc, plane) in planes.into_iter().enumerate() {
                let b = bias.as_ref().map_or(0, |b| b[oc]);
                raw.extend(
                    plane
                        .into_iter()
                        .map(|v| af.requantize(v as i128 + b, acc_frac) as i32),
                );
            }
            Ok(Tensor::from_raw_unchecked(&out_shape, af, raw))
        }
        (NumericPath::Int { step: xstep, .. }, NumericPath::Int { step: wstep, .. }) => {
            let xs = x.raw_data()?;
            let ws = spec.weight.raw_data()?;
            let acc_spec = AccumulatorSpec::DEFAULT;
            let mx = max_abs(xs);
            let planes =
                par::try_map_range(g.out_ch, |oc| conv_plane_int(xs, ws, &g, oc, acc_spec, mx))?;
            let out_fmt = FixedFormat::ACTIVATION;
            let bias = spec.bias.as_ref().map(|b| raw_in(b, out_fmt));
            let flat: Vec<i64> = planes.into_iter().flatten().collect();
            let mut raw = requantize_codes(&flat, xstep as f64 * wstep as f64, out_fmt);
            if let Some(b) = bias {
                let per = g.oh * g.ow;
                for (i, r) in raw.iter_mut().enumerate() {
                    *r = out_fmt.saturate(*r as i128 + b[i / per] as i128) as i32;
                }
            }
            Ok(Tensor::from_raw_unchecked(&out_shape, out_fmt, raw))
        }
        (xp, wp) => Err(Error::UnsupportedPath {
            op: "conv2d",
            path: format!("{xp} x {wp}"),
        }),
    }
}

fn conv_float(
    xs: &[f32],
    ws: &[f32],
    g: &Geometry,
    spec: &ConvSpec,
    out_shape: &[usize],
) -> Result<Tensor> {
    let bias = match &spec.bias {
        Some(b) => Some(b.to_float().f32_data()?.to_vec()),
        None => None,
    };
    let planes = par::map_range(g.out_ch, |oc| {
        let mut p = conv_plane_f32(xs, ws, g, oc);
        if let Some(b) = &bias {
            p.iter_mut().for_each(|v| *v += b[oc]);
        }
        p
    });
    Tensor::from_f32(out_shape, planes.concat())
}

/// Bias raw codes aligned to the accumulator's fractional bits.
fn fixed_bias(spec: &ConvSpec, acc_frac: u32) -> Result<Option<Vec<i128>>> {
    let Some(b) = &spec.bias else { return Ok(None) };
    let fmt = b
        .fixed_format()
        .ok_or_else(|| b.unsupported("conv2d bias"))?;
    if fmt.frac_bits() > acc_frac {
        return Err(Error::FormatMismatch(format!(
            "bias format {fmt} is finer than the accumulator"
        )));
    }
    let shift = acc_frac - fmt.frac_bits();
    Ok(Some(
        b.raw_data()?
            .iter()
            .map(|&v| (v as i128) << shift)
            .collect(),
    ))
}

fn raw_in(t: &Tensor, fmt: FixedFormat) -> Vec<i32> {
    t.to_f64_vec()
        .into_iter()
        .map(|v| fmt.raw_from_f64(v) as i32)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DscSpec {
    pub depthwise: ConvSpec,
    pub pointwise: ConvSpec,
}

impl DscSpec {
    /// `depthwise: [in, 1, 3, 3]`, `pointwise: [out, in, 1, 1]`.
    pub fn new(depthwise: Tensor, pointwise: Tensor) -> Result<Self> {
        let dw = ConvSpec::depthwise(depthwise, 1, 1)?;
        let pw = ConvSpec::new(pointwise, 1, 0)?;
        if dw.kernel != 3 || pw.kernel != 1 || pw.in_ch != dw.out_ch {
            return Err(Error::shape(
                "DscSpec::new",
                &[dw.out_ch, dw.out_ch, 1, 1],
                pw.weight.shape(),
            ));
        }
        Ok(Self {
            depthwise: dw,
            pointwise: pw,
        })
    }

    pub fn in_ch(&self) -> usize {
        self.depthwise.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.pointwise.out_ch
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

/// `Ch_in * K * K + Ch_out * Ch_in` weights of a depth-wise separable conv.
pub fn dsc_param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
    in_ch * kernel * kernel + out_ch * in_ch
}

pub fn dsc(x: &Tensor, spec: &DscSpec) -> Result<Tensor> {
    let mid = conv2d(x, &spec.depthwise)?;
    conv2d(&mid, &spec.pointwise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent nested-loop oracle in f64.
    fn naive_conv(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        wt: &[f64],
        oc_n: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; oc_n * oh * ow];
        for oc in 0..oc_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += wt[((oc * c + ic) * k + ky) * k + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_pointwise_is_identity() {
        let c = 3;
        let mut wt = vec![0.0; c * c];
        for i in 0..c {
            wt[i * c + i] = 1.0;
        }
        let spec = ConvSpec::new(Tensor::from_f32(&[c, c, 1, 1], wt).unwrap(), 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_f32(&[c, 4, 5], random(&mut rng, 60)).unwrap();
        assert!(conv2d(&x, &spec).unwrap().bit_eq(&x));
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new(
            Tensor::from_f32(&[2, 3, 3, 3], random(&mut rng, 54)).unwrap(),
            1,
            1,
        )
        .unwrap();
        let x = Tensor::zeros(&[3, 4, 4], NumericPath::Float32);
        assert!(conv2d(&x, &spec)
            .unwrap()
            .f32_data()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let spec = spec
            .with_bias(Tensor::from_f32(&[2], vec![0.5, -2.0]).unwrap())
            .unwrap();
        let y = conv2d(&x, &spec).unwrap();
        let d = y.f32_data().unwrap();
        assert!(d[..16].iter().all(|&v| v == 0.5) && d[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn strided_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = random(&mut rng, 25);
        let ws = random(&mut rng, 9);
        let x = Tensor::from_f32(&[1, 5, 5], xs.clone()).unwrap();
        let spec =
            ConvSpec::new(Tensor::from_f32(&[1, 1, 3, 3], ws.clone()).unwrap(), 2, 1).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let oracle = naive_conv(&to64(&xs), (1, 5, 5), &to64(&ws), 1, 3, 2, 1);
        for (a, b) in y.f32_data().unwrap().iter().zip(oracle) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn random_convs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let c = rng.random_range(1..=8);
            let oc = rng.random_range(1..=8);
            let h = rng.random_range(3..=8);
            let w = rng.random_range(3..=8);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let xs = random(&mut rng, c * h * w);
            let ws = random(&mut rng, oc * c * k * k);
            let x = Tensor::from_f32(&[c, h, w], xs.clone()).unwrap();
            let spec = ConvSpec::new(
                Tensor::from_f32(&[oc, c, k, k], ws.clone()).unwrap(),
                stride,
                pad,
            )
            .unwrap();
            let y = conv2d(&x, &spec).unwrap();
            let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
            let oracle = naive_conv(&to64(&xs), (c, h, w), &to64(&ws), oc, k, stride, pad);
            assert_eq!(y.len(), oracle.len());
            for (a, b) in y.f32_data().unwrap().iter().zip(oracle) {
                assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fixed_conv_matches_exact_oracle() {
        let af = FixedFormat::ACTIVATION;
        let wf = FixedFormat::WEIGHT;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w, oc) = (3, 6, 6, 4);
        let xr: Vec<i32> = (0..c * h * w)
            .map(|_| rng.random_range(-3000..3000))
            .collect();
        let wr: Vec<i32> = (0..oc * c * 9)
            .map(|_| rng.random_range(-5000..5000))
            .collect();
        let x = Tensor::from_raw(&[c, h, w], af, xr.clone()).unwrap();
        let spec = ConvSpec::new(
            Tensor::from_raw(&[oc, c, 3, 3], wf, wr.clone()).unwrap(),
            2,
            1,
        )
        .unwrap();
        let y = conv2d(&x, &spec).unwrap();
        // exact integer sums through the f64 oracle (all values < 2^53)
        let oracle = naive_conv(
            &xr.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            (c, h, w),
            &wr.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            oc,
            3,
            2,
            1,
        );
        for (got, acc) in y.raw_data().unwrap().iter().zip(oracle) {
            let expected = af.requantize(acc as i128, 22);
            assert_eq!(*got as i64, expected);
        }
    }

    #[test]
    fn dsc_param_count_formula() {
        assert_eq!(dsc_param_count(65, 64, 3), 4745);
        let spec = DscSpec::new(
            Tensor::zeros(&[65, 1, 3, 3], NumericPath::Float32),
            Tensor::zeros(&[64, 65, 1, 1], NumericPath::Float32),
        )
        .unwrap();
        assert_eq!(spec.param_count(), 4745);
    }

    #[test]
    fn dsc_identity() {
        let c = 4;
        let mut dw = vec![0.0; c * 9];
        for i in 0..c {
            dw[i * 9 + 4] = 1.0;
        }
        let mut pw = vec![0.0; c * c];
        for i in 0..c {
            pw[i * c + i] = 1.0;
        }
        let spec = DscSpec::new(
            Tensor::from_f32(&[c, 1, 3, 3], dw).unwrap(),
            Tensor::from_f32(&[c, c, 1, 1], pw).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_f32(&[c, 5, 5], random(&mut rng, 100)).unwrap();
        assert!(dsc(&x, &spec).unwrap().bit_eq(&x));
    }

    #[test]
    fn dsc_is_composition_of_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = DscSpec::new(
            Tensor::from_f32(&[5, 1, 3, 3], random(&mut rng, 45)).unwrap(),
            Tensor::from_f32(&[3, 5, 1, 1], random(&mut rng, 15)).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_f32(&[5, 6, 6], random(&mut rng, 180)).unwrap();
        let composed = conv2d(&conv2d(&x, &spec.depthwise).unwrap(), &spec.pointwise).unwrap();
        assert!(dsc(&x, &spec).unwrap().bit_eq(&composed));

        // depth-wise stage: each plane convolved with its own kernel
        let dw = conv2d(&x, &spec.depthwise).unwrap();
        let xs: Vec<f64> = x.to_f64_vec();
        let ws: Vec<f64> = spec.depthwise.weight.to_f64_vec();
        for ch in 0..5 {
            let oracle = naive_conv(
                &xs[ch * 36..(ch + 1) * 36],
                (1, 6, 6),
                &ws[ch * 9..(ch + 1) * 9],
                1,
                3,
                1,
                1,
            );
            for (a, b) in dw.to_f64_vec()[ch * 36..(ch + 1) * 36].iter().zip(oracle) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let spec = ConvSpec::new(Tensor::zeros(&[2, 3, 1, 1], NumericPath::Float32), 1, 0).unwrap();
        let x = Tensor::zeros(&[4, 2, 2], NumericPath::Float32);
        assert!(matches!(
            conv2d(&x, &spec),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
