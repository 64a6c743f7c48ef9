//! Binary array container shared by cached features and checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PRPF" | version: u16 | entry count: u16
//! per entry: name length: u16 | name (UTF-8) | dtype: u8 | ndim: u8 | dims: u64 * ndim | row-major data
//! ```
//!
//! Complex entries store interleaved (real, imaginary) pairs.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PRPF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    F32 = 2,
    F64 = 3,
    Complex64 = 4,
    Complex128 = 5,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => DType::U8,
            2 => DType::F32,
            3 => DType::F64,
            4 => DType::Complex64,
            5 => DType::Complex128,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    fn element_size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Complex64 => 8,
            DType::Complex128 => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    Complex64(Vec<Complex32>),
    Complex128(Vec<Complex64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::Complex64(_) => DType::Complex64,
            ArrayData::Complex128(_) => DType::Complex128,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::Complex64(v) => v.len(),
            ArrayData::Complex128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: ArrayData) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "entry {name}: shape {shape:?} holds {expected} elements, data has {}",
                data.len()
            )));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("container has no entry named {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u16).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype() as u8);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                ArrayData::U8(v) => out.extend_from_slice(v),
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::Complex64(v) => v.iter().for_each(|x| {
                    out.extend_from_slice(&x.re.to_le_bytes());
                    out.extend_from_slice(&x.im.to_le_bytes());
                }),
                ArrayData::Complex128(v) => v.iter().for_each(|x| {
                    out.extend_from_slice(&x.re.to_le_bytes());
                    out.extend_from_slice(&x.im.to_le_bytes());
                }),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing PRPF magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u16()?;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.element_size()).ok_or_else(|| Error::Format("shape overflow".into()))?)?;
            let f32s = |raw: &[u8]| -> Vec<f32> {
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
            };
            let f64s = |raw: &[u8]| -> Vec<f64> {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            };
            let data = match dtype {
                DType::U8 => ArrayData::U8(raw.to_vec()),
                DType::F32 => ArrayData::F32(f32s(raw)),
                DType::F64 => ArrayData::F64(f64s(raw)),
                DType::Complex64 => {
                    ArrayData::Complex64(f32s(raw).chunks_exact(2).map(|c| Complex32::new(c[0], c[1])).collect())
                }
                DType::Complex128 => {
                    ArrayData::Complex128(f64s(raw).chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
                }
            };
            container.push(&name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(container)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("container truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut c = Container::new();
        c.push("x", &[2], ArrayData::F32(vec![1.0, 2.0])).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"PRPF");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 1);
        // name, dtype, ndim, dim0
        assert_eq!(&b[8..11], &[1, 0, b'x']);
        assert_eq!(b[11], DType::F32 as u8);
        assert_eq!(b[12], 1);
        assert_eq!(u64::from_le_bytes(b[13..21].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[21..25].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.push("x", &[1, 2], ArrayData::F64(vec![1.0, 2.0])).unwrap();
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(c.push("y", &[3], ArrayData::U8(vec![0])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(re in proptest::collection::vec(-1e3f64..1e3, 0..20), flags in proptest::collection::vec(any::<u8>(), 0..8)) {
            let mut c = Container::new();
            c.push("a", &[re.len()], ArrayData::F64(re.clone())).unwrap();
            let cx: Vec<Complex32> = re.iter().map(|&v| Complex32::new(v as f32, -v as f32)).collect();
            c.push("complex", &[1, cx.len()], ArrayData::Complex64(cx)).unwrap();
            c.push("mask", &[flags.len()], ArrayData::U8(flags)).unwrap();
            prop_assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }
}
