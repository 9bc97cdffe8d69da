//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CRNCKPT1"
//! meta    u32 length + UTF-8 bytes (caller-owned header, typically JSON)
//! params  u32 count, then per parameter:
//!         u32 name length + bytes, u32 rows, u32 cols, rows*cols f64 bits
//! adam    u8 flag; if 1: u64 step, f64 lr/beta1/beta2/eps,
//!         then per parameter the first and second moment arrays
//! ```
//!
//! Values are written as raw `f64` bit patterns, so save → load → save
//! produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::array::Array;
use crate::optim::Adam;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"CRNCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save(
    path: &Path,
    meta: &str,
    store: &ParamStore,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_bytes(&mut w, meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        write_bytes(&mut w, store.name(id).as_bytes())?;
        write_array(&mut w, store.value(id))?;
    }
    match adam {
        Some(adam) => {
            w.write_all(&[1u8])?;
            let (step, m, v) = adam.snapshot();
            w.write_all(&step.to_le_bytes())?;
            for x in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                w.write_all(&x.to_bits().to_le_bytes())?;
            }
            for arr in m.iter().chain(v.iter()) {
                for x in arr.data() {
                    w.write_all(&x.to_bits().to_le_bytes())?;
                }
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamStore, Option<Adam>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|e| CheckpointError::Corrupt(format!("meta not utf-8: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|e| CheckpointError::Corrupt(format!("name not utf-8: {e}")))?;
        let value = read_array(&mut r)?;
        store.add(&name, value);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let adam = if flag[0] == 1 {
        let mut step_bytes = [0u8; 8];
        r.read_exact(&mut step_bytes)?;
        let step = u64::from_le_bytes(step_bytes);
        let lr = read_f64(&mut r)?;
        let beta1 = read_f64(&mut r)?;
        let beta2 = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let shapes: Vec<[usize; 2]> = store.ids().map(|id| store.value(id).shape()).collect();
        let read_moments = |r: &mut BufReader<File>| -> Result<Vec<Array>, CheckpointError> {
            shapes
                .iter()
                .map(|s| {
                    let mut a = Array::zeros(s[0], s[1]);
                    for x in a.data_mut() {
                        *x = read_f64(r)?;
                    }
                    Ok(a)
                })
                .collect()
        };
        let m = read_moments(&mut r)?;
        let v = read_moments(&mut r)?;
        Some(Adam::restore(lr, beta1, beta2, eps, step, m, v))
    } else {
        None
    };
    Ok((meta, store, adam))
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn write_array<W: Write>(w: &mut W, a: &Array) -> std::io::Result<()> {
    w.write_all(&(a.rows() as u32).to_le_bytes())?;
    w.write_all(&(a.cols() as u32).to_le_bytes())?;
    for x in a.data() {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_array<R: Read>(r: &mut R) -> Result<Array, CheckpointError> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut a = Array::zeros(rows, cols);
    for x in a.data_mut() {
        *x = read_f64(r)?;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut rng = StdRng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        ps.add("w1", Array::uniform(3, 4, -1.0, 1.0, &mut rng));
        ps.add("b", Array::uniform(1, 4, -1.0, 1.0, &mut rng));
        let mut adam = Adam::new(0.01, &ps);
        // Populate non-trivial optimizer state.
        for id in ps.ids().collect::<Vec<_>>() {
            for g in ps.grad_mut(id).data_mut() {
                *g = 0.123;
            }
        }
        adam.step(&mut ps);

        save(&path, "{\"kind\":\"test\"}", &ps, Some(&adam)).unwrap();
        let (meta, ps2, adam2) = load(&path).unwrap();
        assert_eq!(meta, "{\"kind\":\"test\"}");
        assert_eq!(ps2.len(), 2);
        for id in ps.ids() {
            let id2 = ps2.by_name(ps.name(id)).unwrap();
            assert_eq!(ps.value(id).data(), ps2.value(id2).data());
        }
        let adam2 = adam2.unwrap();
        assert_eq!(adam2.step_count(), 1);

        // Save again: byte-identical file.
        let path2 = dir.path().join("m2.bin");
        save(&path2, &meta, &ps2, Some(&adam2)).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn checkpoint_without_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut ps = ParamStore::new();
        ps.add("w", Array::scalar(2.5));
        save(&path, "", &ps, None).unwrap();
        let (_, ps2, adam) = load(&path).unwrap();
        assert!(adam.is_none());
        assert_eq!(ps2.value(ps2.by_name("w").unwrap()).scalar_value(), 2.5);
    }
}
