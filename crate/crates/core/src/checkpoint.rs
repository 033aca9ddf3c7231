//! Binary tensor checkpoints.
//!
//! Layout (little-endian): magic `CUTB`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, name bytes, `u32` rank, `u32` dims,
//! and the payload as `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use autograd::{ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"CUTB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_stores(stores: &[&ParamStore]) -> Self {
        let tensors = stores
            .iter()
            .flat_map(|s| s.iter().map(|(n, t)| (n.to_string(), t.clone())))
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint. Missing names
    /// and shape mismatches are errors; extra checkpoint entries are ignored.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a CUTB checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { tensors })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.weight".into(), Tensor::new(&[2, 3], vec![0.5, -1.0, 2.25, 3.0, 0.0, 1e-3]).unwrap()),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"CUTB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.get("a.weight").unwrap().shape(), &[2, 3]);
        assert_eq!(back.get("a.weight").unwrap().data()[5], 1e-3f32 as f64);
        assert_eq!(back.get("b").unwrap().shape(), &[1]);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::scalar(0.0)).unwrap();
        sample().restore_into(&mut store).unwrap();
        assert_eq!(store.get(store.id("b").unwrap()).item(), 7.0);
        let mut other = ParamStore::new();
        other.add("missing", Tensor::scalar(0.0)).unwrap();
        assert!(sample().restore_into(&mut other).is_err());
        let mut wrong = ParamStore::new();
        wrong.add("a.weight", Tensor::zeros(&[3, 2])).unwrap();
        assert!(sample().restore_into(&mut wrong).is_err());
    }
}
