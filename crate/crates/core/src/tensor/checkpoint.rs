//! `GCK1` checkpoint container.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "GCK1" version=1 count
//! repeated count times:
//!     name_len name(utf-8) rank dims[rank] data(f32 LE, product(dims) values)
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{numel, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"GCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic {0:?}, expected \"GCK1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("duplicate tensor name `{0}`")]
    Duplicate(String),
    #[error("tensor `{0}` not found in checkpoint")]
    Missing(String),
    #[error("incompatible tensors: {0}")]
    Incompatible(String),
}

/// Ordered collection of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Float>(&mut self, name: &str, t: &Tensor<T>) -> Result<(), CheckpointError> {
        if self.get(name).is_some() {
            return Err(CheckpointError::Duplicate(name.to_string()));
        }
        self.entries.push((
            name.to_string(),
            t.shape().to_vec(),
            t.data().iter().map(|x| x.as_f32()).collect(),
        ));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let (shape, data) = self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        Ok(Tensor::new(shape.to_vec(), data.iter().map(|&x| T::of_f32(x)).collect()).expect("validated on read"))
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, s, _)| numel(s)).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.entries.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(data.len() * 4);
            for x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            if len > r.len() {
                return Err(CheckpointError::Truncated("name"));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(read_u32(&mut r, "dims")? as usize);
            }
            let n = numel(&shape);
            if n.checked_mul(4).is_none_or(|b| b > r.len()) {
                return Err(CheckpointError::Truncated("tensor data"));
            }
            let (payload, rest) = r.split_at(n * 4);
            r = rest;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if ck.get(&name).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
            ck.entries.push((name, shape, data));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = std::fs::File::create(path).map_err(io)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CheckpointError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    if r.len() < buf.len() {
        return Err(CheckpointError::Truncated(what));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push("w", &Tensor::<f32>::new(vec![2], vec![1.0, -0.5]).unwrap()).unwrap();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"GCK1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(&b[16..17], b"w");
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[21..25].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[25..29].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 33);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.push("a", &Tensor::<f32>::zeros(&[3, 2])).unwrap();
        let b = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version(2))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u32>()), 0..5)
        ) {
            let mut ck = Checkpoint::new();
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n = numel(shape);
                // Arbitrary bit patterns, including NaN payloads and subnormals.
                let data = (0..n).map(|k| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(k as u32 * 40503))).collect();
                ck.push(&format!("t{i}.w"), &Tensor::new(shape.clone(), data).unwrap()).unwrap();
            }
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
