//! `DRNW` weight files.
//!
//! Layout (all integers little-endian): magic `DRNW`, version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, `u8`
//! rank, one `u32` per dim, and the values as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRNW";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.ndim()).map_err(|_| Error::invalid(format!("tensor rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dim too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            let single = v as f32;
            if v.is_finite() && !single.is_finite() {
                return Err(Error::invalid(format!("{name}: {v} overflows f32 storage")));
            }
            out.extend_from_slice(&single.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::invalid("truncated DRNW data".to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("not a DRNW file (bad magic)".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported DRNW version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::invalid("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::invalid("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after DRNW payload".to_string()));
    }
    Ok(out)
}

/// Every tensor of `store` (weights and buffers), in registration order.
pub fn snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    save_tensors(&snapshot(store), path)
}

pub fn save_tensors(tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies named tensors into `store`. Names absent from the store are
/// rejected; store entries absent from `tensors` are left untouched unless
/// `require_all` is set.
pub fn load_into(store: &mut ParamStore, tensors: &[(String, Tensor)], require_all: bool) -> Result<()> {
    for (name, t) in tensors {
        let id = store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown tensor `{name}` in weight file")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::shape(format!(
                "`{name}`: file has {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    if require_all {
        for (_, p) in store.iter() {
            if !tensors.iter().any(|(n, _)| n == &p.name) {
                return Err(Error::invalid(format!("weight file lacks `{}`", p.name)));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("a.w".into(), t)]).unwrap();
        assert_eq!(&bytes[..4], b"DRNW");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..14], &[3, 0]);
        assert_eq!(&bytes[14..17], b"a.w");
        assert_eq!(bytes[17], 1);
        assert_eq!(&bytes[18..22], &[2, 0, 0, 0]);
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[26..30], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("x".into(), t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn values_survive_at_single_precision() {
        let t = Tensor::new(&[2, 2], vec![0.1, 1e-3, -7.25, 3.0]).unwrap();
        let back = decode(&encode(&[("w".into(), t.clone())]).unwrap()).unwrap();
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1.shape(), &[2, 2]);
        for (a, b) in back[0].1.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= b.abs() * 1e-7);
        }
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2]).unwrap(), true).unwrap();
        let bad_shape = vec![("w".to_string(), Tensor::zeros(&[3]).unwrap())];
        assert!(load_into(&mut store, &bad_shape, true).is_err());
        let unknown = vec![("v".to_string(), Tensor::zeros(&[2]).unwrap())];
        assert!(load_into(&mut store, &unknown, false).is_err());
        let ok = vec![("w".to_string(), Tensor::full(&[2], 4.0).unwrap())];
        load_into(&mut store, &ok, true).unwrap();
        assert_eq!(store.by_name("w").unwrap().value.data(), &[4.0, 4.0]);
    }
}
