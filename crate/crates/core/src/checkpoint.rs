//! The `RDCK` checkpoint file format.
//!
//! ```text
//! "RDCK" | u32 version (LE) | u64 header length (LE) | JSON header | payload
//! ```
//!
//! The header maps each tensor name to `{"dtype":"f32","shape":[..],"byte_offset":n}`
//! and may carry a `"__metadata__"` string map. `byte_offset` is relative to the
//! payload start and 8-byte aligned; the header is space-padded so the payload
//! itself starts on an 8-byte boundary. Payload values are little-endian `f32`,
//! tensors in lexicographic name order. The encoding of a given map is canonical,
//! so equal maps produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorMap};

pub const MAGIC: &[u8; 4] = b"RDCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;
const METADATA_KEY: &str = "__metadata__";
const ALIGN: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(map: &TensorMap) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !map.metadata().is_empty() {
        header.insert(METADATA_KEY.into(), serde_json::to_value(map.metadata())?);
    }
    let mut offset = 0usize;
    for (name, t) in map.iter() {
        if name == METADATA_KEY {
            return Err(Error::InvalidTensor(format!("`{METADATA_KEY}` is a reserved name")));
        }
        let entry = HeaderEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: offset as u64,
        };
        header.insert(name.to_string(), serde_json::to_value(entry)?);
        offset = align_up(offset + t.numel() * 4);
    }
    let mut header_bytes = serde_json::to_vec(&header)?;
    let padded = align_up(PREAMBLE_LEN + header_bytes.len()) - PREAMBLE_LEN;
    header_bytes.resize(padded, b' ');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + padded + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(padded as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in map.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(align_up(out.len()), 0);
    }
    Ok(out)
}

/// Splits a file into `(header json, payload)` after validating the preamble.
fn split(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an RDCK checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size")))?;
    Ok((&bytes[PREAMBLE_LEN..header_end], &bytes[header_end..]))
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let (header, payload) = split(bytes)?;
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("corrupt header: {e}")))?;

    let mut map = TensorMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("corrupt metadata: {e}")))?;
            *map.metadata_mut() = meta;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("corrupt header entry `{name}`: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor `{name}` has dtype {}, only f32 is supported",
                entry.dtype
            )));
        }
        if !entry.byte_offset.is_multiple_of(ALIGN as u64) {
            return Err(Error::Format(format!(
                "tensor `{name}` offset {} is not {ALIGN}-byte aligned",
                entry.byte_offset
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` shape overflows")))?;
        let start = usize::try_from(entry.byte_offset)
            .map_err(|_| Error::Format(format!("tensor `{name}` offset out of range")))?;
        let end = numel
            .checked_mul(4)
            .and_then(|n| n.checked_add(start))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Format(format!("tensor `{name}` extends past end of file")))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape, data)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        map.insert(name, tensor)?;
    }
    Ok(map)
}

pub fn read(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode(&fs::read(path)?)
}

/// Writes via a temporary sibling file and a rename.
pub fn write(path: impl AsRef<Path>, map: &TensorMap) -> Result<u64> {
    let bytes = encode(map)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(bytes.len() as u64)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical encoding of `map`.
pub fn map_sha256(map: &TensorMap) -> Result<String> {
    Ok(sha256_hex(&encode(map)?))
}

/// SHA-256 of the payload section only (ignores header and metadata).
pub fn payload_sha256(bytes: &[u8]) -> Result<String> {
    let (_, payload) = split(bytes)?;
    Ok(sha256_hex(payload))
}
