//! File helpers shared by the scene, checkpoint and report writers.
//!
//! Binary artifacts use one framing: a single-line JSON header terminated by
//! `\n`, followed by a flat little-endian `f64` payload whose length the
//! header records in `payload_len`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `header` (which must be a JSON object) with an added
/// `payload_len` field, then appends the payload.
pub fn encode_framed<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(header).map_err(|e| Error::invalid(e.to_string()))?;
    let obj = value.as_object_mut().ok_or_else(|| Error::invalid("framed header must be a JSON object"))?;
    obj.insert("payload_len".into(), payload.len().into());
    let mut out = serde_json::to_vec(&value).map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    out.reserve(payload.len() * 8);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_framed<H: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<(H, Vec<f64>)> {
    let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
    let split = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let mut value: serde_json::Value =
        serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("header: {e}")))?;
    let len = value
        .as_object_mut()
        .and_then(|o| o.remove("payload_len"))
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("header lacks payload_len".into()))? as usize;
    let body = &bytes[split + 1..];
    if body.len() != len * 8 {
        return Err(bad(format!("payload has {} bytes, header says {} values", body.len(), len)));
    }
    let header = serde_path_to_error::deserialize(value).map_err(|e| bad(format!("header field {e}")))?;
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok((header, payload))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push(b'\n');
    write_bytes(path, &text)
}

/// Reads JSON, reporting the failing field path plus line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    parse_json(&bytes).map_err(|message| Error::Format { path: path.to_path_buf(), message })
}

pub(crate) fn parse_json<T: DeserializeOwned>(bytes: &[u8]) -> std::result::Result<T, String> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        format!("field `{}`: {} (line {}, column {})", e.path(), inner, inner.line(), inner.column())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Header {
        name: String,
        dims: [usize; 2],
    }

    #[test]
    fn framed_round_trip() {
        let h = Header { name: "w".into(), dims: [2, 3] };
        let payload = [1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        let bytes = encode_framed(&h, &payload).unwrap();
        let (back, data): (Header, Vec<f64>) = decode_framed(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, h);
        assert_eq!(data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), payload.map(f64::to_bits));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_framed(&Header { name: "w".into(), dims: [1, 1] }, &[1.0, 2.0]).unwrap();
        let err = decode_framed::<Header>(&bytes[..bytes.len() - 3], Path::new("x"));
        assert!(matches!(err, Err(Error::Format { .. })));
    }

    #[test]
    fn parse_errors_name_field_and_line() {
        let text = b"{\n  \"name\": \"a\",\n  \"dims\": [1, \"two\"]\n}";
        let msg = parse_json::<Header>(text).unwrap_err();
        assert!(msg.contains("dims[1]"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }
}
