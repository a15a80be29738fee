//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "IVF1"
//! version u32      currently 1
//! count   u32      number of tensor records
//! record: name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!         rank u8, dims u32 × rank, values (little-endian, row-major)
//! ```
//!
//! Records are written sorted by name, so serializing the same contents
//! always produces the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::autodiff::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"IVF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    /// Raw little-endian element bytes.
    bytes: Vec<u8>,
}

/// An in-memory set of named tensors with a stable binary encoding.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
    /// Where this checkpoint was loaded from, for error messages.
    origin: Option<PathBuf>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    fn origin(&self) -> PathBuf {
        self.origin.clone().unwrap_or_else(|| "<memory>".into())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in serialization (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Insert or replace a tensor.
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        for &v in tensor.data() {
            v.write_le(&mut bytes);
        }
        self.entries.insert(
            name.into(),
            Entry {
                dtype: T::DTYPE,
                shape: tensor.shape().to_vec(),
                bytes,
            },
        );
    }

    /// Fetch a tensor; the stored dtype must match `T` exactly.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self.entries.get(name).ok_or_else(|| Error::MissingTensor {
            path: self.origin(),
            name: name.to_string(),
        })?;
        if entry.dtype != T::DTYPE {
            return Err(Error::Corrupt {
                path: self.origin(),
                msg: format!(
                    "tensor {name:?} stored as {:?}, requested {:?}",
                    entry.dtype,
                    T::DTYPE
                ),
            });
        }
        let size = T::DTYPE.size();
        let data: Vec<T> = entry
            .bytes
            .chunks_exact(size)
            .map(|c| T::read_le(c))
            .collect();
        Tensor::new(entry.shape.clone(), data)
    }

    /// Shape of a stored tensor, if present.
    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    /// Serialize to the binary layout described in the module docs.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            if name.len() > u16::MAX as usize {
                return Err(Error::invalid("Checkpoint::to_bytes", "tensor name too long"));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype.code());
            out.push(entry.shape.len() as u8);
            for &d in &entry.shape {
                if d > u32::MAX as usize {
                    return Err(Error::invalid("Checkpoint::to_bytes", "dimension too large"));
                }
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&entry.bytes);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Parse the binary layout; every length is validated before use, so a
    /// truncated or corrupt file fails with a precise error naming `path`.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
        let mut cursor = Cursor { path, bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: u32::from_be_bytes(MAGIC),
                found: u32::from_be_bytes([magic[0], magic[1], magic[2], magic[3]]),
            });
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: VERSION,
                found: version,
            });
        }
        let count = cursor.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = cursor.u16()? as usize;
            let name_bytes = cursor.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Corrupt {
                    path: path.to_path_buf(),
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let dtype_code = cursor.u8()?;
            let dtype = Dtype::from_code(dtype_code).ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                msg: format!("unknown dtype code {dtype_code} for tensor {name:?}"),
            })?;
            let rank = cursor.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = cursor.take(numel * dtype.size())?.to_vec();
            if entries
                .insert(
                    name.clone(),
                    Entry {
                        dtype,
                        shape,
                        bytes,
                    },
                )
                .is_some()
            {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    msg: format!("duplicate tensor {name:?}"),
                });
            }
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                msg: format!("{} trailing bytes after payload", bytes.len() - cursor.pos),
            });
        }
        Ok(Checkpoint {
            entries,
            origin: Some(path.to_path_buf()),
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(path, &bytes)
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos + n - self.bytes.len(),
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
