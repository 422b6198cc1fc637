//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MIXSEGCK" | u32 format_version | u32 header_len | header JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims... | f64 data...
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Loading verifies magic, version and digest before decoding anything, so
//! a corrupted file is rejected without partial loads.

use std::collections::BTreeMap;
use std::path::Path;

use mixseg_core::{hash, Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MIXSEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub architecture_id: String,
    pub arch: ArchSpec,
    pub taxonomy_hash: String,
    pub seed: u64,
    pub config_hash: String,
    pub iteration: u64,
    /// Free-form provenance (init source, p_expert, teacher hash, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl CheckpointMeta {
    pub fn new(arch: ArchSpec, taxonomy_hash: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture_id: arch.id().to_string(),
            arch,
            taxonomy_hash: taxonomy_hash.into(),
            seed,
            config_hash: config_hash.into(),
            iteration: 0,
            extra: BTreeMap::new(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::validation(format!("checkpoint: {}", msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| invalid("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamStore) -> Self {
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.format_version.to_le_bytes());
        let header = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(invalid("bad magic string"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(invalid(format!("unsupported format version {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(invalid("digest mismatch (file corrupted)"));
        }
        let header_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| invalid(format!("header: {e}")))?;
        if meta.format_version != version || meta.architecture_id != meta.arch.id() {
            return Err(invalid("inconsistent header"));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| invalid("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| invalid("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| invalid(e.to_string()))?;
            params.insert(name, arr);
        }
        if r.pos != body.len() {
            return Err(invalid("trailing bytes"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::validation(format!("checkpoint {} not found", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form.
    pub fn hash(&self) -> String {
        hash::sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ClassifierSpec;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let spec = ClassifierSpec::new(3);
        let params = spec.init(5);
        Checkpoint::new(CheckpointMeta::new(ArchSpec::Classifier(spec), "tax", 5, "cfg"), params)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().is_validation());
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_single_byte_corruption_is_rejected(pos in 0usize..100_000, xor in 1u8..=255) {
            let mut bytes = sample().to_bytes();
            let pos = pos % bytes.len();
            bytes[pos] ^= xor;
            prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
        }
    }
}
