//! Binary parameter checkpoints: `RAMCKPT1`, a u32 tensor count, then per
//! tensor a u32-length-prefixed UTF-8 name, a u32 rank, u64 dims and f32
//! values. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RAMCKPT1";

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&2u32.to_le_bytes()).map_err(io)?;
        for d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint into a fresh store, in file order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    let count = u32::from_le_bytes(b4);
    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        r.read_exact(&mut b4).map_err(io)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(io)?;
            dims.push(u64::from_le_bytes(b8) as usize);
        }
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [m, n] => (m, n),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b4).map_err(io)?;
            data.push(f32::from_le_bytes(b4));
        }
        store.add(name, Tensor::new(rows, cols, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = ParamStore::new();
        p.add("emb", Tensor::new(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-9, -0.25]).unwrap());
        p.add("bias", Tensor::new(1, 2, vec![0.5, 0.25]).unwrap());
        save_checkpoint(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"RAMCKPT1");
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"NOTACKPT\0\0\0\0").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
