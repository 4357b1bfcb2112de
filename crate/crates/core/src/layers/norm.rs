//! Folded batch normalization and per-token layer normalization.

use crate::error::{Error, Result};
use crate::fixed::{div_round_half_away, round_shift, FixedFormat};
use crate::tensor::{NumericPath, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Folded affine normalization `y = scale * x + shift`.
///
/// Batch norm carries one pair per channel; layer norm one pair per
/// feature element of the `[N, D]` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl NormParams {
    pub fn new(scale: Tensor, shift: Tensor) -> Result<Self> {
        if scale.shape() != shift.shape() {
            return Err(Error::shape(
                "NormParams::new",
                scale.shape(),
                shift.shape(),
            ));
        }
        Ok(Self { scale, shift })
    }

    pub fn param_count(&self) -> usize {
        self.scale.len() + self.shift.len()
    }

    pub fn to_fixed(&self, format: FixedFormat) -> Result<Self> {
        Ok(Self {
            scale: self.scale.to_fixed(format)?,
            shift: self.shift.to_fixed(format)?,
        })
    }
}

/// Precompute `scale = gamma / sqrt(var + eps)` and
/// `shift = beta - mean * scale`.
pub fn batchnorm_fold(
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<NormParams> {
    let c = gamma.len();
    for v in [beta, mean, var] {
        if v.len() != c {
            return Err(Error::shape("batchnorm_fold", &[c], &[v.len()]));
        }
    }
    let scale: Vec<f32> = gamma
        .iter()
        .zip(var)
        .map(|(&g, &v)| (g as f64 / (v as f64 + eps as f64).sqrt()) as f32)
        .collect();
    let shift: Vec<f32> = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| (b as f64 - m as f64 * s as f64) as f32)
        .collect();
    NormParams::new(
        Tensor::from_f32(&[c], scale)?,
        Tensor::from_f32(&[c], shift)?,
    )
}

/// Apply per-channel folded batch norm to a `[C, H, W]` map.
pub fn batchnorm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if p.scale.shape() != [c] {
        return Err(Error::shape("batchnorm", &[c], p.scale.shape()));
    }
    let plane = h * w;
    affine(x, p, |i| i / plane, "batchnorm")
}

/// `y[i] = scale[k(i)] * x[i] + shift[k(i)]` on either path.
fn affine(
    x: &Tensor,
    p: &NormParams,
    param_index: impl Fn(usize) -> usize,
    op: &'static str,
) -> Result<Tensor> {
    match (x.path(), p.scale.path(), p.shift.path()) {
        (NumericPath::Float32, NumericPath::Float32, NumericPath::Float32) => {
            let (s, b) = (p.scale.f32_data()?, p.shift.f32_data()?);
            let out = x
                .f32_data()?
                .iter()
                .enumerate()
                .map(|(i, &v)| s[param_index(i)] * v + b[param_index(i)])
                .collect();
            Tensor::from_f32(x.shape(), out)
        }
        (NumericPath::Fixed(af), NumericPath::Fixed(sf), NumericPath::Fixed(bf)) => {
            let prod_frac = af.frac_bits() + sf.frac_bits();
            if bf.frac_bits() > prod_frac {
                return Err(Error::FormatMismatch(format!(
                    "{op}: shift format {bf} too fine"
                )));
            }
            let bshift = prod_frac - bf.frac_bits();
            let (s, b) = (p.scale.raw_data()?, p.shift.raw_data()?);
            let out = x
                .raw_data()?
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let k = param_index(i);
                    let acc = s[k] as i128 * v as i128 + ((b[k] as i128) << bshift);
                    af.requantize(acc, prod_frac) as i32
                })
                .collect();
            Ok(Tensor::from_raw_unchecked(x.shape(), af, out))
        }
        _ => Err(Error::UnsupportedPath {
            op,
            path: format!("{} with {} params", x.path(), p.scale.path()),
        }),
    }
}

/// Normalize each token of an `[N, D]` matrix over its `D` features
/// (biased variance, eps 1e-5), then apply the per-element affine map.
pub fn layernorm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if p.scale.shape() != [n, d] {
        return Err(Error::shape("layernorm", &[n, d], p.scale.shape()));
    }
    let normalized = match x.path() {
        NumericPath::Float32 => {
            let data = x.f32_data()?;
            let mut out = Vec::with_capacity(n * d);
            for row in data.chunks(d) {
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                out.extend(row.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
            }
            Tensor::from_f32(x.shape(), out)?
        }
        NumericPath::Fixed(af) => {
            let data = x.raw_data()?;
            Tensor::from_raw_unchecked(x.shape(), af, normalize_fixed(data, d, af))
        }
        NumericPath::Int { .. } => return Err(x.unsupported("layernorm")),
    };
    affine(&normalized, p, |i| i, "layernorm")
}

/// Fractional bits of the fixed-point reciprocal standard deviation.
const INV_STD_FRAC: u32 = 20;

/// Integer layer normalization. Token statistics are exact integers; the
/// reciprocal square root is the only irrational step and is rounded once
/// to `INV_STD_FRAC` bits.
fn normalize_fixed(data: &[i32], d: usize, fmt: FixedFormat) -> Vec<i32> {
    let dd = d as i128;
    let lsb2 = (2.0 * fmt.frac_bits() as f64).exp2();
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(d) {
        let sum: i128 = row.iter().map(|&v| v as i128).sum();
        // centered values scaled by D stay integral
        let centered: Vec<i128> = row.iter().map(|&v| v as i128 * dd - sum).collect();
        let sq: i128 = centered.iter().map(|c| c * c).sum();
        // variance in real units: sq / (D^3 * 2^(2 frac))
        let var = sq as f64 / (dd * dd * dd) as f64 / lsb2;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        let inv_q = (inv * (INV_STD_FRAC as f64).exp2()).round() as i128;
        out.extend(centered.iter().map(|&c| {
            let scaled = div_round_half_away(c * inv_q, dd);
            fmt.saturate(round_shift(scaled, INV_STD_FRAC)) as i32
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(shape: &[usize], v: f32) -> Tensor {
        Tensor::from_f32(shape, vec![v; shape.iter().product()]).unwrap()
    }

    #[test]
    fn identity_fold() {
        let p = batchnorm_fold(&[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(p.scale.f32_data().unwrap(), &[1.0]);
        assert_eq!(p.shift.f32_data().unwrap(), &[0.0]);
    }

    #[test]
    fn hand_computed_fold() {
        let p = batchnorm_fold(&[2.0], &[1.0], &[3.0], &[4.0], 0.0).unwrap();
        assert_eq!(p.scale.f32_data().unwrap(), &[1.0]);
        assert_eq!(p.shift.f32_data().unwrap(), &[-2.0]);
    }

    #[test]
    fn folded_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 6;
        let gen = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| -> Vec<f32> {
            (0..c).map(|_| rng.random_range(lo..hi)).collect()
        };
        let (g, b, m, v) = (
            gen(&mut rng, 0.5, 2.0),
            gen(&mut rng, -1.0, 1.0),
            gen(&mut rng, -1.0, 1.0),
            gen(&mut rng, 0.1, 3.0),
        );
        let eps = 1e-5f32;
        let p = batchnorm_fold(&g, &b, &m, &v, eps).unwrap();
        let xs: Vec<f32> = (0..c * 16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = batchnorm(&Tensor::from_f32(&[c, 4, 4], xs.clone()).unwrap(), &p).unwrap();
        for (i, (&x, &yv)) in xs.iter().zip(y.f32_data().unwrap()).enumerate() {
            let k = i / 16;
            let text = g[k] as f64 * (x as f64 - m[k] as f64) / (v[k] as f64 + eps as f64).sqrt()
                + b[k] as f64;
            assert!((yv as f64 - text).abs() < 1e-6 * text.abs().max(1.0));
        }
    }

    #[test]
    fn fixed_batchnorm_single_rounding() {
        let af = FixedFormat::ACTIVATION;
        let wf = FixedFormat::WEIGHT;
        let p = NormParams::new(
            Tensor::from_f32(&[1], vec![0.5]).unwrap(),
            Tensor::from_f32(&[1], vec![0.25]).unwrap(),
        )
        .unwrap()
        .to_fixed(wf)
        .unwrap();
        let x = Tensor::from_raw(&[1, 1, 3], af, vec![3, -3, 1024]).unwrap();
        let y = batchnorm(&x, &p).unwrap();
        // 0.5*3 = 1.5 lsb + 256 -> 257.5 -> 258 (even); 0.5*-3 + 256 = 254.5 -> 254
        assert_eq!(y.raw_data().unwrap(), &[258, 254, 768]);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = ones(&[2, 8], 3.5);
        let p = NormParams::new(ones(&[2, 8], 1.0), ones(&[2, 8], 0.0)).unwrap();
        assert!(layernorm(&x, &p)
            .unwrap()
            .f32_data()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, d) = (5, 64);
        let xs: Vec<f32> = (0..n * d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p = NormParams::new(ones(&[n, d], 1.0), ones(&[n, d], 0.0)).unwrap();
        let y = layernorm(&Tensor::from_f32(&[n, d], xs).unwrap(), &p).unwrap();
        for row in y.f32_data().unwrap().chunks(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn layernorm_scale_zero_gives_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = NormParams::new(ones(&[3, 4], 0.0), ones(&[3, 4], 7.0)).unwrap();
        let y = layernorm(&Tensor::from_f32(&[3, 4], xs).unwrap(), &p).unwrap();
        assert!(y.f32_data().unwrap().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn fixed_layernorm_tracks_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (n, d) = (6, 64);
        let xs: Vec<f32> = (0..n * d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let sc: Vec<f32> = (0..n * d).map(|_| rng.random_range(0.5..1.5)).collect();
        let sh: Vec<f32> = (0..n * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let p = NormParams::new(
            Tensor::from_f32(&[n, d], sc).unwrap(),
            Tensor::from_f32(&[n, d], sh).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_f32(&[n, d], xs).unwrap();
        let yf = layernorm(&x, &p).unwrap();
        let xq = x.to_fixed(FixedFormat::ACTIVATION).unwrap();
        let yq = layernorm(&xq, &p.to_fixed(FixedFormat::WEIGHT).unwrap()).unwrap();
        assert!(yf.max_abs_diff(&yq).unwrap() < 5e-3);
    }

    #[test]
    fn shape_mismatch() {
        let p = NormParams::new(ones(&[3], 1.0), ones(&[3], 0.0)).unwrap();
        assert!(batchnorm(&ones(&[2, 2, 2], 1.0), &p).is_err());
        assert!(NormParams::new(ones(&[3], 1.0), ones(&[2], 0.0)).is_err());
    }
}
