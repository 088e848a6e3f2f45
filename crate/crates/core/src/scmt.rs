//! Binary tensor files and sectioned containers.
//!
//! Tensor record: magic `SCMT`, `u32` version, `u32` dtype tag, `u32` rank,
//! `u32` dims, then little-endian row-major values.
//!
//! Container: magic `SCMC`, `u32` version, `u32` section count, a table of
//! contents of (`u32` name length, name, `u64` offset, `u64` length), then
//! the section payloads. A section holds a `u32` entry count followed by
//! (`u32` name length, name, tensor record) entries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SCMT";
pub const CONTAINER_MAGIC: &[u8; 4] = b"SCMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl Dtype {
    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::U8),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Values a tensor record can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Float(Tensor),
    Bytes(Vec<u8>),
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = header(dtype, t.shape());
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::U8 => return Err(Error::Format("float tensors cannot be stored as u8".into())),
    }
    Ok(out)
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u8> {
    let mut out = header(Dtype::U8, &[bytes.len()]);
    out.extend_from_slice(bytes);
    out
}

fn header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * shape.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated data: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<Record> {
        if self.take(4)? != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let dtype = Dtype::from_tag(self.u32()?)?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let raw = self.take(count.checked_mul(dtype.size()).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(match dtype {
            Dtype::F32 => Record::Float(Tensor::new(
                shape,
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            )?),
            Dtype::F64 => Record::Float(Tensor::new(
                shape,
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            )?),
            Dtype::U8 => Record::Bytes(raw.to_vec()),
        })
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<Record> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let rec = r.record()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(rec)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    match decode_record(bytes)? {
        Record::Float(t) => Ok(t),
        Record::Bytes(_) => Err(Error::Format("expected a float tensor, found bytes".into())),
    }
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Ordered named records of one container section.
pub type Section = BTreeMap<String, Record>;

/// Named sections, written in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: BTreeMap<String, Section>,
}

impl Container {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections.get(name).ok_or_else(|| Error::Format(format!("missing section {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payloads = Vec::with_capacity(self.sections.len());
        for section in self.sections.values() {
            let mut p = Vec::new();
            p.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for (name, rec) in section {
                p.extend_from_slice(&(name.len() as u32).to_le_bytes());
                p.extend_from_slice(name.as_bytes());
                match rec {
                    Record::Float(t) => p.extend(encode_tensor(t, Dtype::F64)?),
                    Record::Bytes(b) => p.extend(encode_bytes(b)),
                }
            }
            payloads.push(p);
        }
        let toc_len: usize = self.sections.keys().map(|n| 4 + n.len() + 16).sum();
        let mut offset = (12 + toc_len) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, p) in self.sections.keys().zip(&payloads) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            offset += p.len() as u64;
        }
        for p in payloads {
            out.extend(p);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut toc = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            toc.push((r.name()?, r.u64()? as usize, r.u64()? as usize));
        }
        let mut sections = BTreeMap::new();
        for (name, offset, len) in toc {
            let end = offset.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
                Error::Format(format!("section {name} runs past the end of the file"))
            })?;
            let mut sr = Reader {
                buf: &bytes[offset..end],
                pos: 0,
            };
            let entries = sr.u32()? as usize;
            let mut section = Section::new();
            for _ in 0..entries {
                let key = sr.name()?;
                section.insert(key, sr.record()?);
            }
            if sr.pos != len {
                return Err(Error::Format(format!("section {name} has trailing bytes")));
            }
            sections.insert(name, section);
        }
        Ok(Self { sections })
    }

    /// Writes through a temporary file so a crash never leaves a partial container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = encode_tensor(&t, Dtype::F64).unwrap();
        assert_eq!(&b[..4], b"SCMT");
        assert_eq!(b.len(), 16 + 12 + 24 * 8);
        assert_eq!(decode_tensor(&b).unwrap(), t);
        let t32 = decode_tensor(&encode_tensor(&t, Dtype::F32).unwrap()).unwrap();
        assert!(t32.max_abs_diff(&t) < 1e-6);
        // f32 values survive a second round trip exactly
        assert_eq!(decode_tensor(&encode_tensor(&t32, Dtype::F32).unwrap()).unwrap(), t32);
        assert_eq!(decode_record(&encode_bytes(b"abc")).unwrap(), Record::Bytes(b"abc".to_vec()));
    }

    #[test]
    fn tensor_errors() {
        let t = Tensor::zeros(&[4]);
        let b = encode_tensor(&t, Dtype::F64).unwrap();
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        let mut ver = b.clone();
        ver[4] = 9;
        assert!(decode_tensor(&ver).is_err());
        let mut tag = b;
        tag[8] = 7;
        assert!(decode_tensor(&tag).is_err());
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Container::default();
        let mut a = Section::new();
        a.insert("w".into(), Record::Float(Tensor::randn(&[3, 3], 1.0, &mut rng)));
        a.insert("b".into(), Record::Float(Tensor::randn(&[3], 1.0, &mut rng)));
        c.sections.insert("base".into(), a);
        let mut m = Section::new();
        m.insert("json".into(), Record::Bytes(br#"{"step":3}"#.to_vec()));
        c.sections.insert("meta".into(), m);
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.scmc");
        c.save(&p).unwrap();
        assert_eq!(Container::load(&p).unwrap(), c);
        assert!(c.section("nope").is_err());
    }
}
