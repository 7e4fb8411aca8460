//! Binary checkpoint: magic, little-endian u64 header length, JSON header,
//! then every parameter value as little-endian f64 in name order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::{Param, ParamSet};
use crate::NnError;

const MAGIC: &[u8; 8] = b"RLAMRCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Architecture tag chosen by the caller, e.g. `"graphnet"`.
    pub arch: String,
    pub config_hash: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(arch: &str, config_hash: &str, meta: serde_json::Value, params: ParamSet) -> Self {
        let entries = params.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() }).collect();
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                arch: arch.to_string(),
                config_hash: config_hash.to_string(),
                meta,
                params: entries,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| NnError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.numel());
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for p in self.params.iter() {
            for v in &p.value {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| NnError::Format("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        bytes.read_exact(&mut len).map_err(|_| NnError::Format("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > bytes.len() {
            return Err(NnError::Format("header length exceeds file".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..len]).map_err(|e| NnError::Format(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported version {}", header.version)));
        }
        bytes = &bytes[len..];
        let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if bytes.len() != 8 * total {
            return Err(NnError::Format(format!("expected {} value bytes, found {}", 8 * total, bytes.len())));
        }
        let mut ps = ParamSet::new();
        let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for (i, e) in header.params.iter().enumerate() {
            if i > 0 && header.params[i - 1].name >= e.name {
                return Err(NnError::Format("parameters not in name order".into()));
            }
            let n: usize = e.shape.iter().product();
            let value: Vec<f64> = vals.by_ref().take(n).collect();
            ps.push_sorted_unchecked(Param { name: e.name.clone(), shape: e.shape.clone(), value });
        }
        Ok(Self { header, params: ps })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy the stored values into `target`, which must have the same layout.
    pub fn restore_into(&self, target: &mut ParamSet) -> Result<(), NnError> {
        if !target.same_layout(&self.params) {
            return Err(NnError::LayoutMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        for (dst, src) in target.iter_mut().zip(self.params.iter()) {
            dst.value.copy_from_slice(&src.value);
        }
        Ok(())
    }
}
