//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MULTIONLAB-CKPT\n"  magic, 16 bytes
//! u32                  format version
//! u32                  entry count
//! per entry:
//!   u32 name length, UTF-8 name
//!   u8  dtype (0 = f32, 1 = f64)
//!   u32 rank, rank x u64 dims
//!   raw little-endian scalars
//! ```

use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 16] = b"MULTIONLAB-CKPT\n";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }
}

pub trait IntoDyn: Scalar {
    fn into_dyn(t: Tensor<Self>) -> DynTensor;
    fn from_dyn(d: &DynTensor) -> Option<Tensor<Self>>;
}

impl IntoDyn for f32 {
    fn into_dyn(t: Tensor<f32>) -> DynTensor {
        DynTensor::F32(t)
    }
    fn from_dyn(d: &DynTensor) -> Option<Tensor<f32>> {
        match d {
            DynTensor::F32(t) => Some(t.clone()),
            DynTensor::F64(_) => None,
        }
    }
}

impl IntoDyn for f64 {
    fn into_dyn(t: Tensor<f64>) -> DynTensor {
        DynTensor::F64(t)
    }
    fn from_dyn(d: &DynTensor) -> Option<Tensor<f64>> {
        match d {
            DynTensor::F64(t) => Some(t.clone()),
            DynTensor::F32(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, DynTensor)>,
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn decode<T: Scalar>(shape: Vec<usize>, r: &mut Reader) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let bytes = r.take(n * T::DTYPE.size())?;
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: IntoDyn>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), T::into_dyn(t)));
    }

    pub fn get<T: IntoDyn>(&self, name: &str) -> Option<Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).and_then(|(_, d)| T::from_dyn(d))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match t {
                DynTensor::F32(t) => encode(t, &mut out),
                DynTensor::F64(t) => encode(t, &mut out),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("entry name is not UTF-8"))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| bad(format!("unknown dtype {code} for {name}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let t = match dtype {
                DType::F32 => DynTensor::F32(decode(shape, &mut r)?),
                DType::F64 => DynTensor::F64(decode(shape, &mut r)?),
            };
            entries.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
