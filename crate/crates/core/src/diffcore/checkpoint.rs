//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "DATCKPT\0"
//! version      u32       1
//! config_hash  32 bytes  SHA-256 of the model configuration the params belong to
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON (free-form run metadata)
//! count        u32       number of parameters
//! per parameter:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim × u32
//!   values     product(dims) × f32, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::DiffError;

pub const MAGIC: &[u8; 8] = b"DATCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub metadata: String,
    pub params: ParamStore,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffError> {
        let mut r = bytes;
        let io = |e: io::Error| bad(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(io)?;
        let meta_len = read_u32(&mut r).map_err(io)? as usize;
        if meta_len > r.len() {
            return Err(bad("metadata length exceeds file"));
        }
        let (meta, rest) = r.split_at(meta_len);
        let metadata = String::from_utf8(meta.to_vec()).map_err(|_| bad("metadata is not UTF-8"))?;
        r = rest;
        let count = read_u32(&mut r).map_err(io)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r).map_err(io)? as usize;
            if name_len > r.len() {
                return Err(bad("name length exceeds file"));
            }
            let (name, rest) = r.split_at(name_len);
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            r = rest;
            let ndim = read_u32(&mut r).map_err(io)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(&mut r).map_err(io)? as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [m, n] => (*m, *n),
                _ => return Err(bad(format!("{name}: unsupported rank {ndim}"))),
            };
            let n = rows * cols;
            if n * 4 > r.len() {
                return Err(bad(format!("{name}: values truncated")));
            }
            let (vals, rest) = r.split_at(n * 4);
            r = rest;
            let data = vals
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.add(name, Tensor::new(rows, cols, data)?)?;
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after parameter table"));
        }
        Ok(Self {
            config_hash,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DiffError> {
        let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .add(
                "enc.w",
                Tensor::new(2, 3, vec![1.0, -2.0, 0.5, 3.25, 0.0, 1e-3]).unwrap(),
            )
            .unwrap();
        params.add("bias", Tensor::row_vector(vec![0.125])).unwrap();
        Checkpoint {
            config_hash: [7u8; 32],
            metadata: r#"{"variant":"adaptation"}"#.into(),
            params,
        }
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config_hash, ck.config_hash);
        assert_eq!(back.metadata, ck.metadata);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(&bytes[12..44], &[7u8; 32]);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
