//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "MEMDLM01"
//!   u32 tensor count
//!   per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims,
//!               f32 row-major data
//!
//! Fast weights are stored under a "fast/" name prefix and are optional.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::NamedTensor;

pub const MAGIC: &[u8; 8] = b"MEMDLM01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Malformed(format!("bad tensor name: {e}")))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        let mut f32buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf);
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn load_map(path: &Path) -> Result<HashMap<String, NamedTensor>, CheckpointError> {
    Ok(load(path)?.into_iter().map(|t| (t.name.clone(), t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let tensors = vec![
            NamedTensor { name: "a".into(), shape: vec![2, 3], data: vec![1.5, -0.25, 0.0, 3.25e-8, 1e9, -7.0] },
            NamedTensor { name: "fast/b".into(), shape: vec![1], data: vec![0.1] },
        ];
        save(&path, &tensors).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (orig, got) in tensors.iter().zip(&back) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.shape, got.shape);
            for (a, b) in orig.data.iter().zip(&got.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_bytes_are_pinned() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save(&path, &[NamedTensor { name: "x".into(), shape: vec![1], data: vec![2.0] }]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], b"MEMDLM01");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes()); // name length
        assert_eq!(bytes[16], b'x');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes()); // rank
        assert_eq!(&bytes[21..29], &1u64.to_le_bytes()); // dim
        assert_eq!(&bytes[29..33], &2.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC____").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
