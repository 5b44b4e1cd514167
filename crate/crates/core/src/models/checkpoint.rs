//! Binary checkpoint: a 28-byte header followed by the parameters as
//! little-endian f64.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "EVFLCKPT"
//! 8       4     format version (u32 LE)
//! 12      8     layout hash (u64 LE)
//! 20      8     parameter count (u64 LE)
//! 28      8·n   values (f64 LE)
//! ```

use std::path::Path;

use super::params::{Layout, ModelParameters};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EVFLCKPT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub layout_hash: u64,
    pub n_params: u64,
}

pub fn encode(params: &ModelParameters) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.layout.hash().to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let h = CheckpointHeader {
        version: u32_at(8),
        layout_hash: u64_at(12),
        n_params: u64_at(20),
    };
    if h.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", h.version)));
    }
    Ok(h)
}

/// Decodes `bytes` against an expected layout.
pub fn decode(bytes: &[u8], layout: std::sync::Arc<Layout>) -> Result<ModelParameters> {
    let h = read_header(bytes)?;
    if h.layout_hash != layout.hash() {
        return Err(Error::LayoutMismatch(format!(
            "checkpoint was written for a different architecture than {}",
            layout.arch
        )));
    }
    if h.n_params as usize != layout.len() || bytes.len() != HEADER_LEN + 8 * layout.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, header says {}, payload holds {}",
            layout.len(),
            h.n_params,
            (bytes.len() - HEADER_LEN) / 8
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParameters::new(layout, values)
}

pub fn save(path: &Path, params: &ModelParameters) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, layout: std::sync::Arc<Layout>) -> Result<ModelParameters> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, layout)
}
