//! Binary tensor container.
//!
//! A single tensor is stored as:
//!
//! ```text
//! "TIOT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | u64 dims[ndim] | payload
//! ```
//!
//! with every multi-byte field little-endian. Checkpoints bundle several named tensors and a
//! text metadata record in an archive:
//!
//! ```text
//! "TIOC" | u8 version=1 | u32 meta_len | meta (utf-8 key=value lines)
//!        | u32 count | { u16 name_len | name (utf-8) | TIOT record }*
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::Scalar;

const TENSOR_MAGIC: &[u8; 4] = b"TIOT";
const ARCHIVE_MAGIC: &[u8; 4] = b"TIOC";
const VERSION: u8 = 1;

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(buf)
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.rank())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[VERSION, T::DTYPE as u8, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&T::to_le_bytes_vec(t.data()))?;
    Ok(())
}

/// Reads one tensor record, converting the stored precision to `T` if it differs.
pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let [version, dtype, ndim] = read_exact::<3>(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
    }
    let numel: usize = shape.iter().product();
    let elem = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut payload = vec![0u8; numel * elem];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data: Vec<T> = if dtype == T::DTYPE as u8 {
        T::from_le_bytes_slice(&payload)
    } else if dtype == DType::F32 as u8 {
        f32::from_le_bytes_slice(&payload)
            .into_iter()
            .map(|v| T::lit(v as f64))
            .collect()
    } else {
        f64::from_le_bytes_slice(&payload)
            .into_iter()
            .map(T::lit)
            .collect()
    };
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    read_tensor(&mut Cursor::new(bytes))
}

/// Named tensors plus a free-form metadata record.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    pub meta: String,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Archive<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Value of a `key=value` line in the metadata record.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.lines().find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 4] = read_exact(r)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("bad archive magic {magic:?}")));
        }
        let [version] = read_exact::<1>(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let meta_len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|e| Error::Format(e.to_string()))?;
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            entries.push((name, read_tensor(r)?));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read(&mut Cursor::new(bytes))
    }
}
