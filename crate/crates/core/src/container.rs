//! Shared binary framing: 4-byte magic, u64 LE header length, JSON header,
//! raw payload. Offsets in the header are relative to the payload start.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("corrupt header: {0}")]
    Header(String),
}

pub fn write<P: AsRef<Path>>(
    path: P,
    magic: &[u8; 4],
    header: &serde_json::Value,
    payload: &[u8],
) -> Result<(), ContainerError> {
    let header = serde_json::to_vec(header).map_err(|e| ContainerError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Returns the parsed header and the payload bytes.
pub fn read<P: AsRef<Path>>(
    path: P,
    magic: &[u8; 4],
) -> Result<(serde_json::Value, Vec<u8>), ContainerError> {
    let bytes = fs::read(path)?;
    parse(&bytes, magic)
}

pub fn parse(bytes: &[u8], magic: &[u8; 4]) -> Result<(serde_json::Value, Vec<u8>), ContainerError> {
    if bytes.len() < 12 {
        return Err(ContainerError::Truncated(format!(
            "{} bytes is shorter than the fixed preamble",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let end = 12u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| ContainerError::Truncated(format!("header length {hlen} exceeds file")))?
        as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| ContainerError::Header(e.to_string()))?;
    Ok((header, bytes[end..].to_vec()))
}

/// Locates `[offset, offset + len * elem)` in the payload.
pub fn slice<'a>(
    payload: &'a [u8],
    offset: u64,
    len: u64,
    elem: usize,
    what: &str,
) -> Result<&'a [u8], ContainerError> {
    let start = usize::try_from(offset).map_err(|_| ContainerError::Truncated(what.into()))?;
    let bytes = len
        .checked_mul(elem as u64)
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| ContainerError::Header(format!("{what}: length overflow")))?;
    let end = start
        .checked_add(bytes)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| ContainerError::Truncated(format!("{what}: data runs past end of file")))?;
    Ok(&payload[start..end])
}

pub fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn f64s_to_le(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn le_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}
