//! Binary parameter files.
//!
//! Layout, all integers little-endian: the magic `LSTX1`, a `u32` record
//! count, then per record a `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` `u64` dimensions and the row-major `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 5] = b"LSTX1";

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + store.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::format("dimension overflows"))
    }
}

/// Parses checkpoint bytes into named tensors.
pub fn load_records(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("tensor size overflows"))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format("tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after last record"));
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_records(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Copies every record into the store parameter of the same name. The two
/// name sets must match exactly.
pub fn restore(store: &mut ParamStore, mut records: BTreeMap<String, Tensor>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let t = records
            .remove(&name)
            .ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))?;
        store
            .set_value(id, t)
            .map_err(|e| Error::format(format!("{name}: {e}")))?;
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::format(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap());
        store.add("b.c", Tensor::scalar(7.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&store, &path).unwrap();
        let recs = read_checkpoint(&path).unwrap();
        assert_eq!(recs["a"], *store.value(store.find("a").unwrap()));
        assert_eq!(recs["b.c"].shape(), &[] as &[usize]);

        let mut copy = ParamStore::new();
        copy.add("a", Tensor::zeros(&[2, 3]));
        copy.add("b.c", Tensor::scalar(0.0));
        restore(&mut copy, recs.clone()).unwrap();
        assert_eq!(copy.value(copy.find("b.c").unwrap()).item().unwrap(), 7.0);

        let mut wrong = ParamStore::new();
        wrong.add("a", Tensor::zeros(&[3, 2]));
        wrong.add("b.c", Tensor::scalar(0.0));
        assert!(matches!(restore(&mut wrong, recs), Err(Error::Format(_))));

        let mut bytes = fs::read(&path).unwrap();
        assert!(matches!(load_records(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(load_records(&bytes), Err(Error::Format(_))));
    }
}
