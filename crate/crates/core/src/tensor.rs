//! Dense tensors tagged with the numeric path they live on.
//!
//! Feature maps are stored channel-major `[C, H, W]`; token matrices are
//! `[N, D]`. Fixed-point tensors hold raw two's-complement codes, integer
//! tensors hold quantization codes with a per-tensor step.

use std::fmt;

use crate::error::{Error, Result};
use crate::fixed::FixedFormat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NumericPath {
    Float32,
    Fixed(FixedFormat),
    /// `value = code * step`, codes fit in `bits` bits.
    Int {
        bits: u32,
        step: f32,
    },
}

impl fmt::Display for NumericPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericPath::Float32 => write!(f, "float32"),
            NumericPath::Fixed(fmt) => write!(f, "fixed {fmt}"),
            NumericPath::Int { bits, step } => write!(f, "int{bits} (step {step})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    Raw(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    path: NumericPath,
    storage: Storage,
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(Error::DataLength {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            path: NumericPath::Float32,
            storage: Storage::F32(data),
        })
    }

    /// Raw fixed-point codes; every code must be representable in `format`.
    pub fn from_raw(shape: &[usize], format: FixedFormat, raw: Vec<i32>) -> Result<Self> {
        check_len(shape, raw.len())?;
        if let Some(bad) = raw.iter().find(|&&r| !format.contains_raw(r as i64)) {
            return Err(Error::FormatMismatch(format!(
                "raw code {bad} is not representable in {format}"
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            path: NumericPath::Fixed(format),
            storage: Storage::Raw(raw),
        })
    }

    /// Caller guarantees every code is representable.
    pub(crate) fn from_raw_unchecked(shape: &[usize], format: FixedFormat, raw: Vec<i32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), raw.len());
        Self {
            shape: shape.to_vec(),
            path: NumericPath::Fixed(format),
            storage: Storage::Raw(raw),
        }
    }

    pub fn from_codes(shape: &[usize], bits: u32, step: f32, codes: Vec<i32>) -> Result<Self> {
        check_len(shape, codes.len())?;
        let (lo, hi) = (-(1i64 << bits), 1i64 << bits);
        if let Some(bad) = codes.iter().find(|&&c| !(lo..=hi).contains(&(c as i64))) {
            return Err(Error::FormatMismatch(format!(
                "code {bad} does not fit an int{bits} tensor"
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            path: NumericPath::Int { bits, step },
            storage: Storage::Raw(codes),
        })
    }

    pub fn zeros(shape: &[usize], path: NumericPath) -> Self {
        let n = shape.iter().product();
        let storage = match path {
            NumericPath::Float32 => Storage::F32(vec![0.0; n]),
            _ => Storage::Raw(vec![0; n]),
        };
        Self {
            shape: shape.to_vec(),
            path,
            storage,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn path(&self) -> NumericPath {
        self.path
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn f32_data(&self) -> Result<&[f32]> {
        match &self.storage {
            Storage::F32(d) => Ok(d),
            Storage::Raw(_) => Err(self.unsupported("f32_data")),
        }
    }

    pub fn raw_data(&self) -> Result<&[i32]> {
        match &self.storage {
            Storage::Raw(d) => Ok(d),
            Storage::F32(_) => Err(self.unsupported("raw_data")),
        }
    }

    pub fn fixed_format(&self) -> Option<FixedFormat> {
        match self.path {
            NumericPath::Fixed(f) => Some(f),
            _ => None,
        }
    }

    pub(crate) fn unsupported(&self, op: &'static str) -> Error {
        Error::UnsupportedPath {
            op,
            path: self.path.to_string(),
        }
    }

    /// Real values of every element, whatever the path.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match (&self.storage, self.path) {
            (Storage::F32(d), _) => d.iter().map(|&v| v as f64).collect(),
            (Storage::Raw(d), NumericPath::Fixed(fmt)) => {
                d.iter().map(|&r| fmt.to_f64(r as i64)).collect()
            }
            (Storage::Raw(d), NumericPath::Int { step, .. }) => {
                d.iter().map(|&c| c as f64 * step as f64).collect()
            }
            (Storage::Raw(_), NumericPath::Float32) => unreachable!("raw storage on float path"),
        }
    }

    pub fn to_float(&self) -> Tensor {
        match &self.storage {
            Storage::F32(_) => self.clone(),
            Storage::Raw(_) => Tensor {
                shape: self.shape.clone(),
                path: NumericPath::Float32,
                storage: Storage::F32(self.to_f64_vec().into_iter().map(|v| v as f32).collect()),
            },
        }
    }

    /// Round a float tensor into `format` (ties to even, saturating).
    pub fn to_fixed(&self, format: FixedFormat) -> Result<Tensor> {
        let data = self.f32_data()?;
        let raw = data
            .iter()
            .map(|&v| format.raw_from_f64(v as f64) as i32)
            .collect();
        Ok(Tensor::from_raw_unchecked(&self.shape, format, raw))
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        check_len(shape, self.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape("dims3", &[0, 0, 0], &self.shape)),
        }
    }

    /// `(N, D)` of a rank-2 matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::shape("dims2", &[0, 0], &self.shape)),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .to_f64_vec()
            .iter()
            .zip(other.to_f64_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise identity of shape, path and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.path != other.path {
            return false;
        }
        match (&self.storage, &other.storage) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::Raw(a), Storage::Raw(b)) => a == b,
            _ => false,
        }
    }

    /// Transpose a `[C, H, W]` map into a `[H*W, C]` token matrix.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let n = h * w;
        let shape = [n, c];
        Ok(match &self.storage {
            Storage::F32(d) => Tensor {
                shape: shape.to_vec(),
                path: self.path,
                storage: Storage::F32(transpose(d, c, n)),
            },
            Storage::Raw(d) => Tensor {
                shape: shape.to_vec(),
                path: self.path,
                storage: Storage::Raw(transpose(d, c, n)),
            },
        })
    }

    /// Inverse of [`Tensor::to_tokens`].
    pub fn from_tokens(&self, h: usize, w: usize) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        if n != h * w {
            return Err(Error::shape("from_tokens", &[h * w, c], &self.shape));
        }
        let shape = [c, h, w];
        Ok(match &self.storage {
            Storage::F32(d) => Tensor {
                shape: shape.to_vec(),
                path: self.path,
                storage: Storage::F32(transpose(d, n, c)),
            },
            Storage::Raw(d) => Tensor {
                shape: shape.to_vec(),
                path: self.path,
                storage: Storage::Raw(transpose(d, n, c)),
            },
        })
    }

    /// Transpose a rank-2 matrix.
    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(self.with_storage(&[c, r], |d| transpose(d, r, c), |d| transpose(d, r, c)))
    }

    /// Sub-tensor of leading-axis indices `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = self.shape.first().copied().unwrap_or(0);
        if start > end || end > lead {
            return Err(Error::shape("rows", &[end - start.min(end)], &self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let range = start * inner..end * inner;
        Ok(self.with_storage(
            &shape,
            |d| d[range.clone()].to_vec(),
            |d| d[range.clone()].to_vec(),
        ))
    }

    /// Reorder the leading axis: row `i` of the result is row `order[i]`.
    pub fn gather_rows(&self, order: &[usize]) -> Result<Tensor> {
        let lead = self.shape.first().copied().unwrap_or(0);
        if order.iter().any(|&i| i >= lead) {
            return Err(Error::shape("gather_rows", &[lead], &[order.len()]));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = order.len();
        fn pick<T: Copy>(d: &[T], order: &[usize], inner: usize) -> Vec<T> {
            order
                .iter()
                .flat_map(|&i| d[i * inner..(i + 1) * inner].iter().copied())
                .collect()
        }
        Ok(self.with_storage(&shape, |d| pick(d, order, inner), |d| pick(d, order, inner)))
    }

    /// Concatenate `[N, d_i]` matrices on the same path along the columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("concat_cols of nothing".into()))?;
        let (n, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, d) = p.dims2()?;
            if pn != n || p.path != first.path {
                return Err(Error::shape("concat_cols", &[n, d], &p.shape));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        fn cat<T: Copy>(parts: Vec<&[T]>, widths: &[usize], n: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(n * widths.iter().sum::<usize>());
            for r in 0..n {
                for (d, &w) in parts.iter().zip(widths) {
                    out.extend_from_slice(&d[r * w..(r + 1) * w]);
                }
            }
            out
        }
        let storage = match &first.storage {
            Storage::F32(_) => Storage::F32(cat(
                parts.iter().map(|p| p.f32_data()).collect::<Result<_>>()?,
                &widths,
                n,
            )),
            Storage::Raw(_) => Storage::Raw(cat(
                parts.iter().map(|p| p.raw_data()).collect::<Result<_>>()?,
                &widths,
                n,
            )),
        };
        Ok(Tensor {
            shape: vec![n, total],
            path: first.path,
            storage,
        })
    }

    fn with_storage(
        &self,
        shape: &[usize],
        f: impl FnOnce(&[f32]) -> Vec<f32>,
        g: impl FnOnce(&[i32]) -> Vec<i32>,
    ) -> Tensor {
        let storage = match &self.storage {
            Storage::F32(d) => Storage::F32(f(d)),
            Storage::Raw(d) => Storage::Raw(g(d)),
        };
        Tensor {
            shape: shape.to_vec(),
            path: self.path,
            storage,
        }
    }
}

fn transpose<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| data[r * cols + c]));
    }
    out
}
