//! Named-tensor container.
//!
//! Layout (little-endian): magic `AUTR`, `u32` version 1, `u32` entry count,
//! then per entry a `u16` name length, the UTF-8 name, a `u8` dtype
//! (1 = f32, 2 = f64), a `u8` rank, one `u32` per dimension and the raw
//! values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{numel, Tensor};

const MAGIC: &[u8; 4] = b"AUTR";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    dtype: DType,
    tensor: Tensor,
}

/// Ordered map of unique names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert_as(name, tensor, DType::F64)
    }

    /// Stores `tensor` with the given element type; `F32` rounds the values.
    pub fn insert_as(&mut self, name: &str, tensor: Tensor, dtype: DType) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::contract(format!("invalid entry name length {}", name.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::contract(format!("duplicate container entry {name:?}")));
        }
        if tensor.ndim() > u8::MAX as usize || tensor.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::contract(format!("shape {:?} cannot be stored", tensor.shape())));
        }
        let tensor = match dtype {
            DType::F64 => tensor,
            DType::F32 => Tensor::from_fn(tensor.shape(), |i| f64::from(tensor.data()[i] as f32)),
        };
        self.entries.push(Entry {
            name: name.to_string(),
            dtype,
            tensor,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.dtype)
    }

    /// Entry that must exist.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("container has no entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.push(e.tensor.ndim() as u8);
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                match e.dtype {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected AUTR"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut out = Container::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error_at(start + 2, "entry name is not UTF-8"))?
                .to_string();
            if name.is_empty() || out.get(&name).is_some() {
                return Err(r.error_at(start, format!("empty or duplicate entry name {name:?}")));
            }
            let dtype_at = r.pos;
            let dtype = match r.u8("dtype")? {
                1 => DType::F32,
                2 => DType::F64,
                d => return Err(r.error_at(dtype_at, format!("unknown dtype {d}"))),
            };
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let at = r.pos;
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return Err(r.error_at(at, "zero-sized dimension"));
                }
                shape.push(d);
            }
            let n = numel(&shape);
            let raw = r.take(n.saturating_mul(dtype.width()), "tensor data")?;
            let data = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                    .collect(),
            };
            out.entries.push(Entry {
                name,
                dtype,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
