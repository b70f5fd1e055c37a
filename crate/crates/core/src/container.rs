//! Shared binary layout for checkpoints, embeddings and posterior files:
//! 4 magic bytes, a little-endian `u64` header length, a UTF-8 JSON header,
//! then raw little-endian `f64` values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

const PREFIX_LEN: usize = 12;

pub fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decoded container; `payload_offset` is the absolute byte offset of the
/// first float, for error reporting.
pub struct Decoded<H> {
    pub header: H,
    pub payload: Vec<f64>,
    pub payload_offset: u64,
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8], path: &Path) -> Result<Decoded<H>> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            "file too short for header prefix",
        ));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            path,
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let end = (PREFIX_LEN as u64)
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated header: declares {len} bytes"),
        ));
    };
    let end = end as usize;
    let header: H = serde_json::from_slice(&bytes[PREFIX_LEN..end])
        .map_err(|e| Error::format(path, PREFIX_LEN as u64, format!("header: {e}")))?;
    let rest = &bytes[end..];
    if !rest.len().is_multiple_of(8) {
        let whole = rest.len() / 8 * 8;
        return Err(Error::format(
            path,
            (end + whole) as u64,
            "payload is not a whole number of f64 values",
        ));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Decoded {
        header,
        payload,
        payload_offset: end as u64,
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode(b"TEST", &vec![1, 2, 3], &[1.0, 2.0]).unwrap();
        let p = Path::new("x.bin");
        let d: Decoded<Vec<u32>> = decode(b"TEST", &bytes, p).unwrap();
        assert_eq!(d.payload, vec![1.0, 2.0]);

        let err = decode::<Vec<u32>>(b"NOPE", &bytes, p).err().unwrap().to_string();
        assert!(err.contains("byte 0"), "{err}");
        let err = decode::<Vec<u32>>(b"TEST", &bytes[..bytes.len() - 3], p)
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("payload"), "{err}");
        let err = decode::<Vec<u32>>(b"TEST", &bytes[..14], p).err().unwrap().to_string();
        assert!(err.contains("truncated header"), "{err}");
    }
}
