//! Shared layout of the binary files: 4-byte magic, little-endian `u32`
//! format version, little-endian `u32` header length, UTF-8 header text,
//! then a raw little-endian `f32` payload.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("header is not valid UTF-8")]
    HeaderEncoding,
}

pub(crate) fn encode(magic: &[u8; 4], version: u32, header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

#[derive(Debug)]
pub(crate) struct Decoded<'a> {
    pub header: &'a str,
    pub payload: &'a [u8],
    /// Byte offset of the payload within the file.
    pub payload_start: usize,
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, ContainerError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ContainerError::Truncated(format!("missing {what}")))
}

pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Decoded<'a>, ContainerError> {
    let found = bytes.get(..4).unwrap_or(bytes);
    if found != magic {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let v = read_u32(bytes, 4, "format version")?;
    if v != version {
        return Err(ContainerError::Version {
            expected: version,
            found: v,
        });
    }
    let header_len = read_u32(bytes, 8, "header length")? as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| {
        ContainerError::Truncated(format!(
            "header declares {header_len} bytes, only {} present",
            bytes.len().saturating_sub(12)
        ))
    })?;
    let header = std::str::from_utf8(header_bytes).map_err(|_| ContainerError::HeaderEncoding)?;
    Ok(Decoded {
        header,
        payload: &bytes[12 + header_len..],
        payload_start: 12 + header_len,
    })
}

pub(crate) fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
