//! Named-tensor container used for checkpoints and weight-sync payloads.
//!
//! File layout: magic `"SPLN"`, version u16 LE, then one record per tensor:
//! name length u16 LE, name bytes, rank u8, extents u32 LE each, payload
//! f32 LE. Round-trips are bit-exact.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::crc::crc32;
use crate::model::{ParamEntry, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPLN";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor name {0:?} is not a layer parameter name")]
    BadName(String),
    #[error("record for {name:?} declares {extents:?} but carries {bytes} payload bytes")]
    BadExtents {
        name: String,
        extents: Vec<usize>,
        bytes: usize,
    },
}

/// Serialize parameter entries as records (no file header).
pub fn encode_records(params: &Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    for entry in &params.entries {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(entry.tensor.shape().len() as u8);
        for &extent in entry.tensor.shape() {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if buf.len() < n {
        return Err(CheckpointError::Truncated);
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

/// Parse records until the buffer is exhausted.
pub fn decode_records(mut buf: &[u8]) -> Result<Parameters, CheckpointError> {
    let mut entries = Vec::new();
    while !buf.is_empty() {
        let name_len = u16::from_le_bytes(take(&mut buf, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut buf, name_len)?.to_vec())
            .map_err(|e| CheckpointError::BadName(format!("{e}")))?;
        let rank = take(&mut buf, 1)?[0] as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = extents.iter().product();
        let payload = take(&mut buf, numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(extents.clone(), data).map_err(|_| CheckpointError::BadExtents {
            name: name.clone(),
            extents,
            bytes: payload.len(),
        })?;
        let layer = parse_layer_index(&name).ok_or_else(|| CheckpointError::BadName(name.clone()))?;
        entries.push(ParamEntry {
            layer,
            name,
            tensor,
        });
    }
    Ok(Parameters { entries })
}

fn parse_layer_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// CRC-32 over the record encoding; equal checksums mean bit-identical
/// parameters.
pub fn params_checksum(params: &Parameters) -> u32 {
    crc32(&encode_records(params))
}

pub fn save(path: &Path, params: &Parameters) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&encode_records(params));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Parameters, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut buf, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    decode_records(buf)
}
