//! Versioned binary parameter files.
//!
//! Layout: 4-byte magic, `u32` version, `u32` parameter count, then per
//! parameter a `u32`-length UTF-8 name, `u32` rank, `u32` dims and `f32`
//! values. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const PERCEPTION_MAGIC: [u8; 4] = *b"DACP";
pub const DENOISER_MAGIC: [u8; 4] = *b"DADF";
pub const VERSION: u32 = 1;

pub fn encode(magic: [u8; 4], params: &ParamStore) -> Vec<u8> {
    let mut out = magic.to_vec();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    put(&mut out, VERSION);
    put(&mut out, params.len() as u32);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put(&mut out, d as u32);
        }
        for &v in t.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("parameter `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        if store.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        store.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(path: &Path, magic: [u8; 4], params: &ParamStore) -> Result<()> {
    fs::write(path, encode(magic, params))?;
    Ok(())
}

pub fn load(path: &Path, magic: [u8; 4]) -> Result<ParamStore> {
    decode(magic, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn store() -> ParamStore {
        let mut rng = Rng::new(5);
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::randn([2, 3], 1.0, &mut rng));
        s.add("b", Tensor::randn([4], 1.0, &mut rng));
        s
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let s = store();
        let back = decode(DENOISER_MAGIC, &encode(DENOISER_MAGIC, &s)).unwrap();
        assert_eq!(back.names(), s.names());
        for (a, b) in back.tensors().iter().zip(s.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| *x == *y as f32 as f64));
        }
        let again = encode(DENOISER_MAGIC, &back);
        assert_eq!(again, encode(DENOISER_MAGIC, &s));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(PERCEPTION_MAGIC, &store());
        assert!(decode(DENOISER_MAGIC, &bytes).is_err());
        assert!(decode(PERCEPTION_MAGIC, &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(PERCEPTION_MAGIC, &extra).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(decode(PERCEPTION_MAGIC, &version).is_err());
    }
}
