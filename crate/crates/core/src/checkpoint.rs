//! Binary checkpoint format: magic, version, training-stage tag, a digest of
//! the config that produced the weights, then ordered (name, shape, f32 LE
//! payload) entries. Round trips are bit-exact at 32-bit precision.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{GlamError, Result};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GLAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub config_digest: [u8; 32],
    pub entries: Vec<CheckpointEntry>,
}

/// SHA-256 of a config's canonical JSON rendering.
pub fn config_digest<T: serde::Serialize>(config: &T) -> Result<[u8; 32]> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_registry(reg: &ParamRegistry, stage: u8, config_digest: [u8; 32]) -> Self {
        let entries = reg
            .iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Checkpoint {
            stage,
            config_digest,
            entries,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(GlamError::checkpoint("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(GlamError::checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let stage = r.take(1)?[0];
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let n = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| GlamError::checkpoint("parameter name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(GlamError::checkpoint(format!("{name}: {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| GlamError::checkpoint(format!("{name}: shape overflow")))?;
                shape.push(d);
            }
            if r.remaining() < numel * 4 {
                return Err(GlamError::checkpoint(format!(
                    "{name}: payload truncated at byte {}",
                    r.pos
                )));
            }
            let values = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CheckpointEntry { name, shape, values });
        }
        if r.remaining() != 0 {
            return Err(GlamError::checkpoint(format!(
                "trailing data at byte {}",
                r.pos
            )));
        }
        Ok(Checkpoint {
            stage,
            config_digest,
            entries,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(GlamError::checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(
    path: &Path,
    reg: &ParamRegistry,
    stage: u8,
    config_digest: [u8; 32],
) -> Result<()> {
    let ckpt = Checkpoint::from_registry(reg, stage, config_digest);
    Ok(std::fs::write(path, ckpt.encode())?)
}

#[derive(Debug)]
pub struct LoadReport {
    pub stage: u8,
    /// Set when the stored config digest differs from the expected one; the
    /// load still succeeds.
    pub digest_mismatch: bool,
    pub loaded: usize,
}

/// Loads checkpoint values into a registry. Every stored entry must match a
/// registered parameter by name and shape; registry parameters missing from
/// the file keep their current values (later stages add fresh heads).
pub fn load_checkpoint(
    path: &Path,
    reg: &mut ParamRegistry,
    expected_digest: Option<[u8; 32]>,
) -> Result<LoadReport> {
    let bytes = std::fs::read(path)?;
    let ckpt = Checkpoint::decode(&bytes)
        .map_err(|e| GlamError::checkpoint(format!("{}: {e}", path.display())))?;
    apply_checkpoint(&ckpt, reg)?;
    let digest_mismatch = expected_digest.is_some_and(|d| d != ckpt.config_digest);
    Ok(LoadReport {
        stage: ckpt.stage,
        digest_mismatch,
        loaded: ckpt.entries.len(),
    })
}

pub fn apply_checkpoint(ckpt: &Checkpoint, reg: &mut ParamRegistry) -> Result<()> {
    // Validate everything before mutating so a bad file leaves the registry intact.
    for e in &ckpt.entries {
        let id = reg
            .id(&e.name)
            .ok_or_else(|| GlamError::checkpoint(format!("unknown parameter {}", e.name)))?;
        let have = reg.value(id).shape();
        if have != e.shape.as_slice() {
            return Err(GlamError::checkpoint(format!(
                "{}: shape {:?} in file, {:?} in registry",
                e.name, e.shape, have
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.values.len() != numel {
            return Err(GlamError::checkpoint(format!(
                "{}: {} values for shape {:?}",
                e.name,
                e.values.len(),
                e.shape
            )));
        }
    }
    for e in &ckpt.entries {
        let id = reg.id(&e.name).expect("validated above");
        let data: Vec<f64> = e.values.iter().map(|&v| v as f64).collect();
        reg.get_mut(id).value = Tensor::new(e.shape.clone(), data)?;
    }
    Ok(())
}
