//! Single-file weight container.
//!
//! Byte layout (all integers little-endian; see `docs/CONTAINER.md`):
//!
//! ```text
//! magic      8 bytes  "ODEFWGT\0"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON metadata
//! count      u32, then `count` index records:
//!   name_len u16, name bytes
//!   dtype    u8
//!   ndim     u8, then ndim x u32 dims
//!   flags    u8 (bit 0: scale present), scale f32 (always written)
//!   offset   u64 (relative to the payload section)
//!   length   u64
//!   crc32    u32 (IEEE, over the payload bytes)
//! payloads   concatenated in index order
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::FixedFormat;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"ODEFWGT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a weight container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch in entry `{name}`")]
    Checksum { name: String },
    #[error("container truncated while reading {what}")]
    Truncated { what: String },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type CResult<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    Fx16_4,
    Fx20_10,
    I8,
    I4Packed,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::Fx16_4 => 1,
            Dtype::Fx20_10 => 2,
            Dtype::I8 => 3,
            Dtype::I4Packed => 4,
        }
    }

    fn from_tag(t: u8) -> CResult<Self> {
        Ok(match t {
            0 => Dtype::F32,
            1 => Dtype::Fx16_4,
            2 => Dtype::Fx20_10,
            3 => Dtype::I8,
            4 => Dtype::I4Packed,
            _ => return Err(ContainerError::Malformed(format!("unknown dtype tag {t}"))),
        })
    }

    /// Payload size in bytes for `elems` elements.
    pub fn payload_len(self, elems: usize) -> usize {
        match self {
            Dtype::F32 | Dtype::Fx20_10 => 4 * elems,
            Dtype::Fx16_4 => 2 * elems,
            Dtype::I8 => elems,
            Dtype::I4Packed => elems.div_ceil(2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::Fx16_4 => "fx16_4",
            Dtype::Fx20_10 => "fx20_10",
            Dtype::I8 => "i8",
            Dtype::I4Packed => "i4packed",
        }
    }
}

/// Model-level metadata stored as JSON in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: ModelConfig,
    /// Per-channel input standardization `(x - mean) / std`, RGB order.
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

impl Default for Metadata {
    fn default() -> Self {
        Self {
            config: ModelConfig::default(),
            input_mean: [0.0; 3],
            input_std: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub scale: Option<f32>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.payload)
    }

    pub fn f32(name: impl Into<String>, shape: &[usize], data: &[f32]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F32,
            shape: shape.to_vec(),
            scale: None,
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    /// Fixed-point raw values; `dtype` must be `Fx16_4` or `Fx20_10`.
    pub fn fixed(name: impl Into<String>, dtype: Dtype, shape: &[usize], raw: &[i32]) -> Self {
        let payload = match dtype {
            Dtype::Fx16_4 => raw.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect(),
            Dtype::Fx20_10 => raw.iter().flat_map(|&v| v.to_le_bytes()).collect(),
            other => panic!("Entry::fixed called with {}", other.name()),
        };
        Self {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
            scale: None,
            payload,
        }
    }

    /// Signed integer codes stored as `i8` or packed `i4` (low nibble first).
    pub fn codes(
        name: impl Into<String>,
        bits: u32,
        shape: &[usize],
        codes: &[i32],
        scale: f32,
    ) -> Self {
        let (dtype, payload) = if bits <= 4 {
            let payload = codes
                .chunks(2)
                .map(|p| {
                    let lo = (p[0] as u8) & 0x0f;
                    let hi = p.get(1).map_or(0, |&v| (v as u8) & 0x0f);
                    lo | (hi << 4)
                })
                .collect();
            (Dtype::I4Packed, payload)
        } else {
            (Dtype::I8, codes.iter().map(|&c| c as i8 as u8).collect())
        };
        Self {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
            scale: Some(scale),
            payload,
        }
    }

    /// Decode the payload into plain values: floats for `f32`, raw integers
    /// for the fixed and code dtypes.
    pub fn decode(&self) -> Decoded {
        let p = &self.payload;
        match self.dtype {
            Dtype::F32 => Decoded::F32(
                p.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            Dtype::Fx16_4 => Decoded::Int(
                p.chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as i32)
                    .collect(),
            ),
            Dtype::Fx20_10 => Decoded::Int(
                p.chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            Dtype::I8 => Decoded::Int(p.iter().map(|&b| b as i8 as i32).collect()),
            Dtype::I4Packed => {
                let sext = |n: u8| ((n << 4) as i8 >> 4) as i32;
                let mut v: Vec<i32> = p
                    .iter()
                    .flat_map(|&b| [sext(b & 0x0f), sext(b >> 4)])
                    .collect();
                v.truncate(self.elems());
                Decoded::Int(v)
            }
        }
    }

    /// Decode into a tensor on the numeric path implied by the dtype.
    pub fn to_tensor(&self) -> crate::Result<Tensor> {
        let data = self.decode();
        match (self.dtype, data) {
            (Dtype::F32, Decoded::F32(v)) => Tensor::from_f32(&self.shape, v),
            (Dtype::Fx16_4, Decoded::Int(v)) => {
                Tensor::from_raw(&self.shape, FixedFormat::WEIGHT, v)
            }
            (Dtype::Fx20_10, Decoded::Int(v)) => {
                Tensor::from_raw(&self.shape, FixedFormat::ACTIVATION, v)
            }
            (Dtype::I8 | Dtype::I4Packed, Decoded::Int(v)) => {
                let bits = if self.dtype == Dtype::I8 { 8 } else { 4 };
                let scale = self.scale.ok_or_else(|| crate::Error::WeightDtype {
                    name: self.name.clone(),
                    reason: "integer codes without a scale".into(),
                })?;
                Tensor::from_codes(&self.shape, bits, scale / (1u32 << (bits - 1)) as f32, v)
            }
            _ => unreachable!("decode matches dtype"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    F32(Vec<f32>),
    Int(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightContainer {
    pub metadata: Metadata,
    pub entries: Vec<Entry>,
}

impl WeightContainer {
    pub fn new(metadata: Metadata) -> Self {
        Self {
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Entry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn save(&self) -> CResult<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)
            .map_err(|e| ContainerError::Malformed(format!("metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.entries.len(), "entry count")?.to_le_bytes());
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(ContainerError::Duplicate(e.name.clone()));
            }
            if e.payload.len() != e.dtype.payload_len(e.elems()) {
                return Err(ContainerError::Malformed(format!(
                    "entry `{}` has {} payload bytes, expected {}",
                    e.name,
                    e.payload.len(),
                    e.dtype.payload_len(e.elems())
                )));
            }
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| ContainerError::Malformed(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype.tag());
            let ndim = u8::try_from(e.shape.len())
                .map_err(|_| ContainerError::Malformed(format!("too many dims in `{}`", e.name)))?;
            out.push(ndim);
            for &d in &e.shape {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            out.push(e.scale.is_some() as u8);
            out.extend_from_slice(&e.scale.unwrap_or(0.0).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.checksum().to_le_bytes());
            offset += e.payload.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&e.payload);
        }
        Ok(out)
    }

    pub fn load(bytes: &[u8]) -> CResult<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| ContainerError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("entry count")? as usize;

        struct Index {
            name: String,
            dtype: Dtype,
            shape: Vec<usize>,
            scale: Option<f32>,
            offset: u64,
            length: u64,
            crc: u32,
        }
        let mut index = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16("entry name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec())
                .map_err(|_| ContainerError::Malformed("entry name is not UTF-8".into()))?;
            let what = |f: &str| format!("{f} of `{name}`");
            let dtype = Dtype::from_tag(r.u8(&what("dtype"))?)?;
            let ndim = r.u8(&what("rank"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32(&what("shape")).map(|d| d as usize))
                .collect::<CResult<Vec<_>>>()?;
            let flags = r.u8(&what("flags"))?;
            let scale = f32::from_le_bytes(r.array(&what("scale"))?);
            let offset = r.u64(&what("offset"))?;
            let length = r.u64(&what("length"))?;
            let crc = r.u32(&what("checksum"))?;
            index.push(Index {
                name,
                dtype,
                shape,
                scale: (flags & 1 == 1).then_some(scale),
                offset,
                length,
                crc,
            });
        }

        let data = &bytes[r.pos..];
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(index.len());
        for ix in index {
            if !seen.insert(ix.name.clone()) {
                return Err(ContainerError::Duplicate(ix.name));
            }
            let elems: usize = ix.shape.iter().product();
            if ix.length != ix.dtype.payload_len(elems) as u64 {
                return Err(ContainerError::Malformed(format!(
                    "entry `{}` declares {} bytes for {} {} elements",
                    ix.name,
                    ix.length,
                    elems,
                    ix.dtype.name()
                )));
            }
            let end = ix.offset.checked_add(ix.length);
            let payload = match end {
                Some(end) if end <= data.len() as u64 => &data[ix.offset as usize..end as usize],
                _ => {
                    return Err(ContainerError::Truncated {
                        what: format!("payload of `{}`", ix.name),
                    })
                }
            };
            if crc32fast::hash(payload) != ix.crc {
                return Err(ContainerError::Checksum { name: ix.name });
            }
            entries.push(Entry {
                name: ix.name,
                dtype: ix.dtype,
                shape: ix.shape,
                scale: ix.scale,
                payload: payload.to_vec(),
            });
        }
        Ok(Self { metadata, entries })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> CResult<()> {
        Ok(std::fs::write(path, self.save()?)?)
    }

    pub fn read_file(path: impl AsRef<Path>) -> CResult<Self> {
        Self::load(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> CResult<u32> {
    u32::try_from(n).map_err(|_| ContainerError::Malformed(format!("{what} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(ContainerError::Truncated { what: what.into() });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> CResult<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> CResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> CResult<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> CResult<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> CResult<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}
