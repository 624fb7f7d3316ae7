//! On-disk artifact framing and atomic writes.
//!
//! Binary artifacts start with one text line `MAGIC/VERSION {json header}`
//! followed by a little-endian payload. Text artifacts are plain JSON or
//! JSON lines. Every write goes through a temp file in the target
//! directory and is renamed into place.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Write `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Frame a header and payload as `MAGIC/1 {json}\n<payload>`.
pub fn encode_framed<H: Serialize>(magic: &str, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_string(header)?;
    let mut out = Vec::with_capacity(magic.len() + json.len() + payload.len() + 8);
    out.extend_from_slice(format!("{magic}/{FORMAT_VERSION} ").as_bytes());
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

/// Inverse of [`encode_framed`]; checks magic and version.
pub fn decode_framed<'a, H: DeserializeOwned>(magic: &str, bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let (tag, json) = line
        .split_once(' ')
        .ok_or_else(|| Error::Format("header has no JSON part".into()))?;
    let expected = format!("{magic}/{FORMAT_VERSION}");
    if tag != expected {
        return Err(Error::Format(format!("expected `{expected}`, found `{tag}`")));
    }
    let header = serde_json::from_str(json)?;
    Ok((header, &bytes[nl + 1..]))
}

pub fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64s_from_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format(format!(
            "payload length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn f32s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn f32s_from_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "payload length {} not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect())
}

/// Refuse artifacts produced under a different configuration.
pub fn check_config_hash(artifact: Option<&str>, current: &str) -> Result<()> {
    match artifact {
        Some(h) if h != current => Err(Error::ConfigMismatch {
            artifact: h.to_string(),
            current: current.to_string(),
        }),
        _ => Ok(()),
    }
}
