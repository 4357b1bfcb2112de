use crate::error::{Error, Result};
use crate::fixed::{div_round_half_away, AccumulatorSpec, FixedFormat};
use crate::par;
use crate::tensor::{NumericPath, Tensor};

use super::requantize_codes;

pub fn relu(x: &Tensor) -> Result<Tensor> {
    match x.path() {
        NumericPath::Float32 => Tensor::from_f32(
            x.shape(),
            x.f32_data()?
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        ),
        NumericPath::Fixed(fmt) => Ok(Tensor::from_raw_unchecked(
            x.shape(),
            fmt,
            x.raw_data()?.iter().map(|&v| v.max(0)).collect(),
        )),
        NumericPath::Int { bits, step } => Tensor::from_codes(
            x.shape(),
            bits,
            step,
            x.raw_data()?.iter().map(|&v| v.max(0)).collect(),
        ),
    }
}

/// 3x3 max pooling, stride 2, padding 1 (padded cells never win).
pub fn maxpool3x3s2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    fn pool<T: Copy + PartialOrd>(
        d: &[T],
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> Vec<T> {
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<T> = None;
                    for iy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(h) {
                        for ix in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(w) {
                            let v = plane[iy * w + ix];
                            if best.is_none_or(|b| v > b) {
                                best = Some(v);
                            }
                        }
                    }
                    out.push(best.expect("window overlaps the input"));
                }
            }
        }
        out
    }
    let shape = [c, oh, ow];
    match x.path() {
        NumericPath::Float32 => Tensor::from_f32(&shape, pool(x.f32_data()?, c, h, w, oh, ow)),
        NumericPath::Fixed(fmt) => Ok(Tensor::from_raw_unchecked(
            &shape,
            fmt,
            pool(x.raw_data()?, c, h, w, oh, ow),
        )),
        NumericPath::Int { .. } => Err(x.unsupported("maxpool3x3s2")),
    }
}

/// Mean of each channel plane: `[C, H, W] -> [C]`.
pub fn avgpool_global(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let n = h * w;
    match x.path() {
        NumericPath::Float32 => Tensor::from_f32(
            &[c],
            x.f32_data()?
                .chunks(n)
                .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
                .collect(),
        ),
        NumericPath::Fixed(fmt) => Ok(Tensor::from_raw_unchecked(
            &[c],
            fmt,
            x.raw_data()?
                .chunks(n)
                .map(|p| {
                    let s: i128 = p.iter().map(|&v| v as i128).sum();
                    div_round_half_away(s, n as i128) as i32
                })
                .collect(),
        )),
        NumericPath::Int { .. } => Err(x.unsupported("avgpool_global")),
    }
}

/// `a @ b^T` for `a: [N, K]`, `b: [M, K]`; rows run in parallel and each
/// dot product sums in ascending `k`.
///
/// Fixed operands produce `a`'s format; pairs of integer code tensors
/// produce the fixed activation format.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (m, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", &[m, k], b.shape()));
    }
    let shape = [n, m];
    match (a.path(), b.path()) {
        (NumericPath::Float32, NumericPath::Float32 | NumericPath::Int { .. }) => {
            let ad = a.f32_data()?;
            let bf = b.to_float();
            let bd = bf.f32_data()?;
            let rows = par::map_range(n, |i| {
                let ar = &ad[i * k..(i + 1) * k];
                (0..m)
                    .map(|j| {
                        ar.iter()
                            .zip(&bd[j * k..(j + 1) * k])
                            .fold(0f32, |s, (&x, &y)| s + x * y)
                    })
                    .collect::<Vec<f32>>()
            });
            Tensor::from_f32(&shape, rows.concat())
        }
        (NumericPath::Fixed(af), NumericPath::Fixed(bf)) => {
            let acc = int_products(a.raw_data()?, b.raw_data()?, n, m, k)?;
            let frac = af.frac_bits() + bf.frac_bits();
            let raw = acc
                .into_iter()
                .map(|v| af.requantize(v as i128, frac) as i32)
                .collect();
            Ok(Tensor::from_raw_unchecked(&shape, af, raw))
        }
        (NumericPath::Int { step: sa, .. }, NumericPath::Int { step: sb, .. }) => {
            let acc = int_products(a.raw_data()?, b.raw_data()?, n, m, k)?;
            let out = FixedFormat::ACTIVATION;
            let raw = requantize_codes(&acc, sa as f64 * sb as f64, out);
            Ok(Tensor::from_raw_unchecked(&shape, out, raw))
        }
        (ap, bp) => Err(Error::UnsupportedPath {
            op: "matmul_nt",
            path: format!("{ap} x {bp}"),
        }),
    }
}

fn int_products(a: &[i32], b: &[i32], n: usize, m: usize, k: usize) -> Result<Vec<i64>> {
    let spec = AccumulatorSpec::DEFAULT;
    let rows = par::try_map_range(n, |i| {
        let ar = &a[i * k..(i + 1) * k];
        (0..m)
            .map(|j| {
                let mut acc = 0i128;
                for (&x, &y) in ar.iter().zip(&b[j * k..(j + 1) * k]) {
                    acc += x as i128 * y as i128;
                    spec.check(acc)?;
                }
                Ok(acc as i64)
            })
            .collect::<Result<Vec<i64>>>()
    })?;
    Ok(rows.concat())
}

/// `x W^T + b` with `x: [in]` or `[N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let vector = x.shape().len() == 1;
    let x2 = if vector {
        x.clone().reshape(&[1, x.len()])?
    } else {
        x.clone()
    };
    let y = matmul_nt(&x2, w)?;
    let (n, m) = y.dims2()?;
    let y = match b {
        None => y,
        Some(b) => {
            if b.shape() != [m] {
                return Err(Error::shape("linear", &[m], b.shape()));
            }
            let bias = Tensor::from_f32(&[n, m], {
                let bf = b.to_float();
                bf.f32_data()?.repeat(n)
            })?;
            match y.path() {
                NumericPath::Float32 => add(&y, &bias)?,
                NumericPath::Fixed(fmt) => add(&y, &bias.to_fixed(fmt)?)?,
                NumericPath::Int { .. } => return Err(y.unsupported("linear bias")),
            }
        }
    };
    if vector {
        y.reshape(&[m])
    } else {
        Ok(y)
    }
}

/// Append a constant plane holding the time `t`: `[C, H, W] -> [C+1, H, W]`.
pub fn add_time(x: &Tensor, t: f64) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let shape = [c + 1, h, w];
    match x.path() {
        NumericPath::Float32 => {
            let mut d = x.f32_data()?.to_vec();
            d.resize(d.len() + h * w, t as f32);
            Tensor::from_f32(&shape, d)
        }
        NumericPath::Fixed(fmt) => {
            let mut d = x.raw_data()?.to_vec();
            d.resize(d.len() + h * w, fmt.raw_from_f64(t) as i32);
            Ok(Tensor::from_raw_unchecked(&shape, fmt, d))
        }
        NumericPath::Int { .. } => Err(x.unsupported("add_time")),
    }
}

/// Elementwise sum; fixed operands must share a format and saturate.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    match (a.path(), b.path()) {
        (NumericPath::Float32, NumericPath::Float32) => Tensor::from_f32(
            a.shape(),
            a.f32_data()?
                .iter()
                .zip(b.f32_data()?)
                .map(|(&x, &y)| x + y)
                .collect(),
        ),
        (NumericPath::Fixed(fa), NumericPath::Fixed(fb)) if fa == fb => {
            Ok(Tensor::from_raw_unchecked(
                a.shape(),
                fa,
                a.raw_data()?
                    .iter()
                    .zip(b.raw_data()?)
                    .map(|(&x, &y)| fa.saturate(x as i128 + y as i128) as i32)
                    .collect(),
            ))
        }
        (ap, bp) => Err(Error::UnsupportedPath {
            op: "add",
            path: format!("{ap} + {bp}"),
        }),
    }
}

/// Multiply by a scalar constant. On the fixed path the constant is first
/// rounded into `const_format` and the product rounded once.
pub fn scale_by(x: &Tensor, c: f64, const_format: FixedFormat) -> Result<Tensor> {
    match x.path() {
        NumericPath::Float32 => {
            let c = c as f32;
            Tensor::from_f32(x.shape(), x.f32_data()?.iter().map(|&v| c * v).collect())
        }
        NumericPath::Fixed(fmt) => {
            let craw = const_format.raw_from_f64(c) as i128;
            let frac = fmt.frac_bits() + const_format.frac_bits();
            Ok(Tensor::from_raw_unchecked(
                x.shape(),
                fmt,
                x.raw_data()?
                    .iter()
                    .map(|&v| fmt.requantize(v as i128 * craw, frac) as i32)
                    .collect(),
            ))
        }
        NumericPath::Int { .. } => Err(x.unsupported("scale_by")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::from_f32(&[3], vec![-1.5, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).unwrap().f32_data().unwrap(), &[0.0, 2.0, 0.0]);
        let fx = Tensor::from_raw(&[2], FixedFormat::ACTIVATION, vec![-7, 9]).unwrap();
        assert_eq!(relu(&fx).unwrap().raw_data().unwrap(), &[0, 9]);
    }

    #[test]
    fn maxpool_halves_48_to_24() {
        let x = Tensor::zeros(&[64, 48, 48], NumericPath::Float32);
        assert_eq!(maxpool3x3s2(&x).unwrap().shape(), &[64, 24, 24]);
    }

    #[test]
    fn maxpool_dominates_window_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (7, 6);
        let d: Vec<f32> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = Tensor::from_f32(&[1, h, w], d.clone()).unwrap();
        let y = maxpool3x3s2(&x).unwrap();
        let (_, oh, ow) = y.dims3().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = vec![];
                for iy in (2 * oy) as isize - 1..=(2 * oy) as isize + 1 {
                    for ix in (2 * ox) as isize - 1..=(2 * ox) as isize + 1 {
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            vals.push(d[iy as usize * w + ix as usize]);
                        }
                    }
                }
                let max = vals.iter().cloned().fold(f32::MIN, f32::max);
                let mean = vals.iter().sum::<f32>() / vals.len() as f32;
                let got = y.f32_data().unwrap()[oy * ow + ox];
                assert_eq!(got, max);
                assert!(got >= mean);
            }
        }
    }

    #[test]
    fn avgpool_of_constant_plane() {
        let x = Tensor::from_f32(&[2, 3, 3], [vec![1.25; 9], vec![-4.0; 9]].concat()).unwrap();
        assert_eq!(
            avgpool_global(&x).unwrap().f32_data().unwrap(),
            &[1.25, -4.0]
        );
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::from_f32(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_f32(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_f32(&[3], vec![0.5, 0.5, -3.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.f32_data().unwrap(), &[1.5, 2.5, 0.0]);
    }

    #[test]
    fn linear_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let (n, i, o) = (
                rng.random_range(1..8),
                rng.random_range(1..8),
                rng.random_range(1..8),
            );
            let x: Vec<f32> = (0..n * i).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f32> = (0..o * i).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = linear(
                &Tensor::from_f32(&[n, i], x.clone()).unwrap(),
                &Tensor::from_f32(&[o, i], w.clone()).unwrap(),
                None,
            )
            .unwrap();
            for r in 0..n {
                for c in 0..o {
                    let e: f64 = (0..i)
                        .map(|k| x[r * i + k] as f64 * w[c * i + k] as f64)
                        .sum();
                    let g = y.f32_data().unwrap()[r * o + c] as f64;
                    assert!((g - e).abs() <= 1e-5 * e.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn add_time_appends_constant_plane() {
        let x = Tensor::zeros(&[64, 24, 24], NumericPath::Float32);
        let y = add_time(&x, 0.0).unwrap();
        assert_eq!(y.shape(), &[65, 24, 24]);
        assert!(y.f32_data().unwrap()[64 * 576..].iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d: Vec<f32> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_f32(&[2, 3, 3], d.clone()).unwrap();
        let y = add_time(&x, 0.3).unwrap();
        assert_eq!(&y.f32_data().unwrap()[..18], &d[..]);
        assert!(y.f32_data().unwrap()[18..].iter().all(|&v| v == 0.3f32));
        for (c, expected) in [(64, 65), (128, 129), (256, 257)] {
            let x = Tensor::zeros(&[c, 1, 1], NumericPath::Float32);
            assert_eq!(add_time(&x, 0.5).unwrap().shape()[0], expected);
        }
    }

    #[test]
    fn fixed_scale_rounds_once() {
        let fmt = FixedFormat::ACTIVATION;
        let x = Tensor::from_raw(&[2], fmt, vec![1000, -1000]).unwrap();
        let y = scale_by(&x, 0.1, FixedFormat::STEP).unwrap();
        // 0.1 -> 6554 / 2^16; 1000 * 6554 / 65536 = 100.006 -> 100
        assert_eq!(y.raw_data().unwrap(), &[100, -100]);
    }

    #[test]
    fn fixed_add_saturates() {
        let fmt = FixedFormat::ACTIVATION;
        let x = Tensor::from_raw(&[1], fmt, vec![fmt.max_raw() as i32]).unwrap();
        assert_eq!(
            add(&x, &x).unwrap().raw_data().unwrap(),
            &[fmt.max_raw() as i32]
        );
    }
}
