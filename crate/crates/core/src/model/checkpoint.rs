//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! u32 magic = 0x464F4F4C        u32 version = 1
//! u32 descriptor length         UTF-8 descriptor text
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!             u8 ndim, ndim × u64 dims, row-major payload
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ArchDescriptor, ArchError, Params};
use crate::engine::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: u32 = 0x464F_4F4C;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic 0x{0:08X}")]
    BadMagic(u32),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("descriptor: {0}")]
    Descriptor(#[from] ArchError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CheckpointError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic(_) => "bad_magic",
            CheckpointError::Version(_) => "version_mismatch",
            CheckpointError::Truncated(_) => "truncated",
            CheckpointError::BadDtype(_) => "bad_dtype",
            CheckpointError::Utf8(_) => "bad_utf8",
            CheckpointError::TrailingBytes(_) => "trailing_bytes",
            CheckpointError::Duplicate(_) => "duplicate_tensor",
            CheckpointError::Descriptor(_) => "bad_descriptor",
            CheckpointError::Io(_) => "io",
        }
    }
}

/// A tensor as stored, keeping its on-disk element type.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

/// Descriptor text plus named tensors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &Params<T>, desc: &ArchDescriptor) -> Self {
        Self {
            descriptor: desc.to_text(),
            tensors: params.iter().map(|(k, v)| (k.clone(), StoredTensor::from_tensor(v))).collect(),
        }
    }

    pub fn arch(&self) -> Result<ArchDescriptor, CheckpointError> {
        Ok(ArchDescriptor::parse(&self.descriptor)?)
    }

    pub fn params<T: Real>(&self) -> Params<T> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC.to_le_bytes());
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    /// Decodes a checkpoint from untrusted bytes. Never panics.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.u32("magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let dlen = r.u32("descriptor length")? as usize;
        let descriptor = std::str::from_utf8(r.take(dlen, "descriptor")?)
            .map_err(|_| CheckpointError::Utf8("descriptor"))?
            .to_string();
        let count = r.u32("tensor count")? as usize;
        let mut tensors: Vec<(String, StoredTensor)> = Vec::new();
        for i in 0..count {
            let what = || format!("tensor {i} of {count}");
            let nlen = r.u32("name length").map_err(|_| CheckpointError::Truncated(what()))? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| CheckpointError::Utf8("tensor name"))?
                .to_string();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(CheckpointError::Duplicate(name));
            }
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or(CheckpointError::BadDtype(code))?;
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64("dimension")?)
                    .map_err(|_| CheckpointError::Truncated(format!("{name}: dimension overflows")))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| CheckpointError::Truncated(format!("{name}: element count overflows")))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| CheckpointError::Truncated(format!("{name}: payload size overflows")))?;
            let payload = r.take(nbytes, "tensor payload")?;
            let tensor = match dtype {
                DType::F32 => StoredTensor::F32(decode_payload(shape, payload)),
                DType::F64 => StoredTensor::F64(decode_payload(shape, payload)),
            };
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { descriptor, tensors })
    }
}

fn decode_payload<T: Real>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).expect("payload length matches shape")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    params: &Params<T>,
    desc: &ArchDescriptor,
) -> Result<(), CheckpointError> {
    fs::write(path, Checkpoint::from_params(params, desc).encode())?;
    Ok(())
}

/// Loads parameters (converted to `T`) and the validated descriptor.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Params<T>, ArchDescriptor), CheckpointError> {
    let ckpt = Checkpoint::decode(&fs::read(path)?)?;
    let desc = ckpt.arch()?;
    desc.validate()?;
    Ok((ckpt.params(), desc))
}
