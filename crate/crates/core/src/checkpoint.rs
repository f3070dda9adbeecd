//! Versioned binary container of named tensors, string metadata, and the
//! vocabulary. Encoder and personalization parameters share one container
//! under distinct name prefixes. Serialization is little-endian and
//! bit-exact on round trip.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

const MAGIC: &[u8; 8] = b"UIACKP01";
const VERSION: u32 = 1;

/// One tensor with its registered name and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-contained model snapshot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub vocab_terms: Vec<String>,
    /// User key per user-embedding row (fallback row excluded).
    pub user_keys: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }

        out.extend_from_slice(&(self.vocab_terms.len() as u64).to_le_bytes());
        for term in &self.vocab_terms {
            write_str(&mut out, term);
        }

        out.extend_from_slice(&(self.user_keys.len() as u64).to_le_bytes());
        for key in &self.user_keys {
            write_str(&mut out, key);
        }

        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            write_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            debug_assert_eq!(t.data.len(), t.shape.iter().product::<usize>());
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }

        let meta_len = r.u64()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..meta_len {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }

        let vocab_len = r.u64()? as usize;
        let mut vocab_terms = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            vocab_terms.push(r.string()?);
        }

        let user_len = r.u64()? as usize;
        let mut user_keys = Vec::with_capacity(user_len);
        for _ in 0..user_len {
            user_keys.push(r.string()?);
        }

        let tensor_len = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(tensor_len);
        for _ in 0..tensor_len {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Checkpoint {
            meta,
            vocab_terms,
            user_keys,
            tensors,
        })
    }

    /// FNV-1a hash of the serialized bytes, as a 16-hex-digit provenance tag.
    pub fn hash_tag(&self) -> String {
        let bytes = self.to_bytes();
        let mut hash: u64 = 0xcbf29ce484222325;
        for &b in &bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::BadMagic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    MissingTensor(String),
    MissingMeta(String),
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    DimMismatch {
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad header)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Truncated => write!(f, "checkpoint data is truncated"),
            CheckpointError::MissingTensor(name) => {
                write!(f, "checkpoint is missing tensor {name:?}")
            }
            CheckpointError::MissingMeta(key) => {
                write!(f, "checkpoint is missing metadata key {key:?}")
            }
            CheckpointError::ShapeMismatch {
                name,
                expected,
                found,
            } => write!(
                f,
                "tensor {name:?} has shape {found:?}, expected {expected:?}"
            ),
            CheckpointError::DimMismatch { expected, found } => write!(
                f,
                "output dimensionality mismatch: expected d={expected}, found d={found}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CheckpointError {}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn sample() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "pretrain1".to_string());
        meta.insert("d".to_string(), "4".to_string());
        Checkpoint {
            meta,
            vocab_terms: vec!["alpha".to_string(), "beta".to_string()],
            user_keys: vec!["u1".to_string()],
            tensors: vec![NamedTensor {
                name: "request.w1".to_string(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX],
            }],
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert_eq!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::BadMagic
        );
    }

    #[test]
    fn truncated_data_is_rejected() {
        let bytes = sample().to_bytes();
        assert_eq!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err(),
            CheckpointError::Truncated
        );
    }

    #[test]
    fn hash_tag_tracks_content() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.hash_tag(), b.hash_tag());
        b.tensors[0].data[0] += 1.0;
        assert_ne!(a.hash_tag(), b.hash_tag());
        assert_eq!(a.hash_tag().len(), 16);
    }
}
