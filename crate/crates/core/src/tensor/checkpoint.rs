//! Binary parameter snapshots.
//!
//! Layout: the 8-byte magic, then for every parameter in store order the name
//! length, name bytes, rank, and dims as little-endian `u64`, followed by the
//! values as little-endian `f32`. The file ends after the last parameter.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLOCKPT1";

/// One decoded checkpoint entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut c = Cursor { bytes, pos: 8 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u64("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u64("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64("dimension")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let values = c
            .take(n, "values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(Entry {
            name,
            shape,
            values,
        });
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Overwrites the values of `store` from a checkpoint file. Names, order and
/// shapes must match exactly.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Missing {
            what: "checkpoint",
            path: path.to_path_buf(),
        });
    }
    restore_checkpoint(store, &fs::read(path)?)
}

/// As [`load_checkpoint`], from checkpoint bytes.
pub fn restore_checkpoint<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let entries = read_checkpoint(bytes)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            store.len(),
            entries.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, e) in ids.into_iter().zip(entries) {
        if store.name(id) != e.name || store.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: model has {} {:?}, file has {} {:?}",
                store.name(id),
                store.get(id).shape(),
                e.name,
                e.shape
            )));
        }
        let values: Vec<T> = e.values.iter().map(|&v| T::lit(v as f64)).collect();
        store.set_values(id, &values)?;
    }
    Ok(())
}
