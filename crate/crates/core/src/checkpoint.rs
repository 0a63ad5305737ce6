//! Versioned binary container: magic header, format version, a JSON
//! metadata block and named tensor sections.
//!
//! ```text
//! magic[16] | version u32 | meta_len u64 | meta (utf-8 JSON)
//! | count u32 | { name_len u32 | name | kind u8 | ndim u32 | dims i64* | nbytes u64 | data }*
//! ```
//! All integers little-endian.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;
use tch::{Device, Kind, Tensor};

pub const MAGIC: &[u8; 16] = b"SEMSYNTH-CKPT\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Container {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn kind_code(kind: Kind) -> Result<u8> {
    match kind {
        Kind::Float => Ok(0),
        Kind::Double => Ok(1),
        Kind::Int64 => Ok(2),
        other => Err(Error::InvalidArgument(format!("unsupported tensor kind {other:?}"))),
    }
}

fn code_kind(code: u8) -> Option<Kind> {
    match code {
        0 => Some(Kind::Float),
        1 => Some(Kind::Double),
        2 => Some(Kind::Int64),
        _ => None,
    }
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.shallow_clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let t = t.detach().contiguous();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind_code(t.kind())?);
            let dims = t.size();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in &dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            let numel = t.numel();
            let nbytes = numel * t.kind().elt_size_in_bytes();
            let mut data = vec![0u8; nbytes];
            t.f_copy_data_u8(&mut data, numel)?;
            out.extend_from_slice(&(nbytes as u64).to_le_bytes());
            out.extend_from_slice(&data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        let mut magic = [0u8; 16];
        if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
            return Err(Error::Version {
                found: format!("header {:?}", String::from_utf8_lossy(&magic)),
                expected: format!("{} v{FORMAT_VERSION}", String::from_utf8_lossy(MAGIC).trim_end_matches('\0')),
            });
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version.to_string(), expected: FORMAT_VERSION.to_string() });
        }
        let meta_len = read_u64(&mut r).ok_or_else(|| bad("truncated metadata length"))? as usize;
        let meta = take(&mut r, meta_len).ok_or_else(|| bad("truncated metadata"))?;
        let meta = String::from_utf8(meta.to_vec()).map_err(|_| bad("metadata is not utf-8"))?;
        let count = read_u32(&mut r).ok_or_else(|| bad("truncated tensor count"))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r).ok_or_else(|| bad("truncated tensor name"))? as usize;
            let name = take(&mut r, name_len).ok_or_else(|| bad("truncated tensor name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not utf-8"))?;
            let kind = take(&mut r, 1).and_then(|k| code_kind(k[0])).ok_or_else(|| bad("unknown tensor kind"))?;
            let ndim = read_u32(&mut r).ok_or_else(|| bad("truncated dims"))?;
            let mut dims = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r).ok_or_else(|| bad("truncated dims"))? as i64);
            }
            let nbytes = read_u64(&mut r).ok_or_else(|| bad("truncated tensor data"))? as usize;
            let numel: i64 = dims.iter().product();
            if dims.iter().any(|&d| d < 0) || numel as usize * kind.elt_size_in_bytes() != nbytes {
                return Err(bad(&format!("tensor {name} has inconsistent size")));
            }
            let data = take(&mut r, nbytes).ok_or_else(|| bad("truncated tensor data"))?;
            let t = Tensor::f_from_data_size(data, &dims, kind)?.to_device(Device::Cpu);
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if r.len() < n {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Some(head)
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    take(r, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    take(r, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bit_equal;

    fn sample() -> Container {
        Container {
            meta: r#"{"iteration":3}"#.into(),
            tensors: vec![
                ("a".into(), Tensor::randn([2, 3], (Kind::Float, Device::Cpu))),
                ("b/c".into(), Tensor::randn([4], (Kind::Double, Device::Cpu))),
                ("t".into(), Tensor::from_slice(&[7i64])),
                ("s".into(), Tensor::from_slice(&[1.5f32]).reshape([])),
            ],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.size(), tb.size());
            assert!(bit_equal(ta, tb));
        }
        assert_eq!(back.section("b/").len(), 1);
    }

    #[test]
    fn corrupted_header_is_a_version_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes, Path::new("mem")), Err(Error::Version { .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[16] = 9;
        assert!(matches!(Container::from_bytes(&bytes, Path::new("mem")), Err(Error::Version { .. })));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        let r = Container::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem"));
        assert!(matches!(r, Err(Error::Format { .. })));
    }
}
