//! `PYRT` named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PYRT" | version: u16 | entry count: u32
//! per entry: name length: u16 | UTF-8 name | dtype: u8 | ndim: u8 | dims: u32 × ndim | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = i64. Entries keep insertion order, so a
//! load followed by a save reproduces the input bytes exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"PYRT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Entry {
    pub fn ints(data: Vec<i64>) -> Self {
        Entry::I64 {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
            Entry::I64 { .. } => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::I64 { shape, .. } => shape,
        }
    }
}

impl From<Tensor<f32>> for Entry {
    fn from(t: Tensor<f32>) -> Self {
        Entry::F32(t)
    }
}

impl From<Tensor<f64>> for Entry {
    fn from(t: Tensor<f64>) -> Self {
        Entry::F64(t)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: impl Into<Entry>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long ({} bytes)", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        self.entries.push((name, entry.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    /// Floating-point entry converted to the requested precision.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        match self.require(name)? {
            Entry::F32(t) => Ok(t.cast()),
            Entry::F64(t) => Ok(t.cast()),
            Entry::I64 { .. } => Err(Error::Format(format!("entry `{name}` is not floating point"))),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[i64]> {
        match self.require(name)? {
            Entry::I64 { data, .. } => Ok(data),
            _ => Err(Error::Format(format!("entry `{name}` is not i64"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype() as u8);
            let shape = entry.shape();
            let ndim = u8::try_from(shape.len())
                .map_err(|_| Error::Format(format!("`{name}` has too many dimensions")))?;
            out.push(ndim);
            for &d in shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("`{name}` extent {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::I64 { data, .. } => {
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PYRT container".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype code {code}")))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * dtype.size())?;
            let entry = match dtype {
                DType::F32 => Entry::F32(Tensor::new(
                    &shape,
                    payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )?),
                DType::F64 => Entry::F64(Tensor::new(
                    &shape,
                    payload
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )?),
                DType::I64 => Entry::I64 {
                    shape,
                    data: payload
                        .chunks_exact(8)
                        .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                },
            };
            c.insert(name, entry)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.insert("ab", Tensor::from_slice(&[1.5f32])).unwrap();
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..4], b"PYRT");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..12], &2u16.to_le_bytes());
        assert_eq!(&b[12..14], b"ab");
        assert_eq!(b[14], 0); // f32
        assert_eq!(b[15], 1); // ndim
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.insert("x", Entry::ints(vec![1, 2, 3])).unwrap();
        let b = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'Q';
        assert!(Container::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(Container::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut extra = b;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        assert!(c.insert("x", Entry::ints(vec![])).is_err());
    }

    proptest! {
        #[test]
        fn load_save_is_byte_identical(
            a in prop::collection::vec(any::<f32>(), 1..20),
            b in prop::collection::vec(any::<f64>(), 1..20),
            ints in prop::collection::vec(any::<i64>(), 0..20),
        ) {
            let mut c = Container::new();
            c.insert("layer.weight", Tensor::from_slice(&a)).unwrap();
            c.insert("stats", Tensor::from_slice(&b)).unwrap();
            c.insert("counters", Entry::ints(ints)).unwrap();
            let bytes = c.to_bytes().unwrap();
            let again = Container::from_bytes(&bytes).unwrap().to_bytes().unwrap();
            prop_assert_eq!(bytes, again);
        }
    }
}
