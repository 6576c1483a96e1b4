//! Binary parameter snapshots.
//!
//! Layout: the magic line `DCHA-CKPT-1\n`, a little-endian `u64` entry count,
//! then per entry a `u64` path length, the UTF-8 path, a `u64` rank, the
//! dimensions as `u64`s and the values as `f64`s. Entries appear in sorted
//! path order, so equal stores always serialise to equal bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"DCHA-CKPT-1\n";

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (path, t) in store.iter() {
        out.extend_from_slice(&(path.len() as u64).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format!("length {v} out of range"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    if !bytes.starts_with(MAGIC) {
        return Err("missing DCHA-CKPT-1 header".into());
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let n = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = r.u64()?;
        let path = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u64()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("shape overflows")?;
        let raw = r.take(numel.checked_mul(8).ok_or("shape overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        store.insert(path, t);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|d| Error::format(path, d))
}
