//! Shared file plumbing: atomic writes and the header-plus-blob container
//! used by feature stores, embedding dumps, and checkpoints.
//!
//! The container is a single file holding one JSON header line (terminated by
//! `\n`) followed by a raw little-endian `f32` payload. The header carries
//! enough shape information for the reader to validate the payload length.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so a crash mid-write never leaves a partial file at the destination.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Serializes the header followed by the values quantized to `f32`.
pub(crate) fn encode_blob(header: &serde_json::Value, values: &[f64]) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(header).expect("header serialization cannot fail");
    bytes.push(b'\n');
    bytes.reserve(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    bytes
}

pub(crate) fn write_blob(
    path: &Path,
    header: &serde_json::Value,
    values: &[f64],
) -> io::Result<()> {
    atomic_write(path, &encode_blob(header, values))
}

/// Reads a header-plus-blob file back into the header and the `f32` payload
/// widened to `f64`.
pub(crate) fn read_blob(path: &Path) -> io::Result<(serde_json::Value, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_blob(&bytes)
}

pub(crate) fn decode_blob(bytes: &[u8]) -> io::Result<(serde_json::Value, Vec<f64>)> {
    let newline = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "missing header line"))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad header: {e}")))?;
    let payload = &bytes[newline + 1..];
    if payload.len() % 4 != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("payload length {} is not a multiple of 4", payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, values))
}
