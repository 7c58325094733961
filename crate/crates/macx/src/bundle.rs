//! The `.macx` bundle: named real-valued arrays in one file.
//!
//! Layout, all little-endian:
//!   magic "MACX" | version u32 (=1) | array count u32
//!   per array: name length u32 | UTF-8 name | dtype byte (0=f32, 1=f64)
//!              | ndim u32 | extents u64 each | row-major payload
//!
//! Writes go to a temp file in the same directory and are renamed into
//! place on success, so a failed write never leaves a partial bundle.

use crate::error::{Error, Result};
use crate::tensor::Dtype;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MACX";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 regardless of storage width.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// Arrays in insertion order with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBundle {
    entries: Vec<(String, BundleArray)>,
}

impl FeatureBundle {
    pub fn new() -> Self {
        FeatureBundle { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateName(name));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "bundle",
                shape,
                reason: format!("payload length {} != product of extents {}", data.len(), numel),
            });
        }
        self.entries.push((name, BundleArray { shape, data }));
        Ok(())
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert(name, shape, ArrayData::F32(data))
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.insert(name, shape, ArrayData::F64(data))
    }

    pub fn get(&self, name: &str) -> Option<&BundleArray> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BundleArray)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, arr) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(arr.data.dtype().byte());
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for &e in &arr.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &arr.data {
                ArrayData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name_bytes = cur.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::CorruptBundle("array name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let dtype = Dtype::from_byte(cur.byte()?)
                .ok_or_else(|| Error::CorruptBundle("unknown dtype byte".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = cur.take(numel * dtype.width())?;
            let data = match dtype {
                Dtype::F32 => ArrayData::F32(
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                Dtype::F64 => ArrayData::F64(
                    payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
            };
            entries.push((name, BundleArray { shape, data }));
        }
        if cur.pos != bytes.len() {
            return Err(Error::CorruptBundle(format!(
                "{} trailing bytes after the last array",
                bytes.len() - cur.pos
            )));
        }
        Ok(FeatureBundle { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptBundle(format!(
                "wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Atomic file write: temp file in the target directory, rename on success.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    write_atomic(path, &bundle.to_bytes())
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    FeatureBundle::from_bytes(&bytes)
}
