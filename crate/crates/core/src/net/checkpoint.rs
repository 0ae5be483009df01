//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PETC"            4 bytes magic
//! version           u8   (= 1)
//! model kind        u8   (0 baseline, 1 siamese)
//! modality          u8   (0 polarization, 1 intensity3, 2 intensity1)
//! channels D        u8
//! image size        u32
//! parameter count   u32
//! parameters        f64 × count, slots in declared order, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, ModelKind, ParamSet};
use crate::error::{Error, Result};
use crate::polarization::Modality;

const MAGIC: &[u8; 4] = b"PETC";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

pub fn write_checkpoint(params: &ParamSet) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match arch.kind {
        ModelKind::Baseline => 0,
        ModelKind::Siamese => 1,
    });
    out.push(arch.modality.code());
    out.push(arch.channels() as u8);
    out.extend_from_slice(&(arch.image_size as u32).to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", bytes[4])));
    }
    let kind = match bytes[5] {
        0 => ModelKind::Baseline,
        1 => ModelKind::Siamese,
        k => return Err(Error::format(path, format!("unknown model kind {k}"))),
    };
    let modality = Modality::from_code(bytes[6])
        .ok_or_else(|| Error::format(path, format!("unknown modality {}", bytes[6])))?;
    if bytes[7] as usize != modality.channels() {
        return Err(Error::format(path, "channel count disagrees with modality"));
    }
    let image_size = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let arch = Architecture::new(kind, modality, image_size)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if count != arch.param_count() {
        return Err(Error::format(path, "parameter count disagrees with architecture"));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 8 * count {
        return Err(Error::format(path, "checkpoint payload length mismatch"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamSet::from_values(arch, values)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
