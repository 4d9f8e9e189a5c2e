//! Binary container shared by reference and checkpoint files.
//!
//! Layout: magic line, `u64` LE header length, UTF-8 JSON header, then blocks of
//! `u64` LE value count followed by that many LE `f64`. The header carries the block
//! count and a CRC32 of everything after the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

pub fn encode(magic: &str, mut header: Value, blocks: &[&[f64]]) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(blocks.iter().map(|b| 8 + 8 * b.len()).sum());
    for b in blocks {
        payload.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in *b {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let obj = header.as_object_mut().ok_or_else(|| Error::Format("header must be a JSON object".into()))?;
    obj.insert("magic".into(), json!(magic));
    obj.insert("endianness".into(), json!("little"));
    obj.insert("blocks".into(), json!(blocks.len()));
    obj.insert("crc32".into(), json!(crc32fast::hash(&payload)));
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(magic.len() + 9 + head.len() + payload.len());
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(magic: &str, bytes: &[u8]) -> Result<(Value, Vec<Vec<f64>>)> {
    let m = magic.len() + 1;
    if bytes.len() < m + 8 || &bytes[..magic.len()] != magic.as_bytes() || bytes[magic.len()] != b'\n' {
        return Err(Error::Format(format!("missing magic `{magic}`")));
    }
    let hlen = u64::from_le_bytes(bytes[m..m + 8].try_into().unwrap()) as usize;
    let start = m + 8;
    let end = start.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Value = serde_json::from_slice(&bytes[start..end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.get("magic").and_then(Value::as_str) != Some(magic) {
        return Err(Error::Format("header magic mismatch".into()));
    }
    if header.get("endianness").and_then(Value::as_str) != Some("little") {
        return Err(Error::Format("unsupported endianness".into()));
    }
    let payload = &bytes[end..];
    let crc = header.get("crc32").and_then(Value::as_u64).ok_or_else(|| Error::Format("missing crc32".into()))?;
    if crc32fast::hash(payload) as u64 != crc {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    let count = header.get("blocks").and_then(Value::as_u64).ok_or_else(|| Error::Format("missing block count".into()))? as usize;
    let mut blocks = Vec::with_capacity(count);
    let mut at = 0;
    for i in 0..count {
        let n = payload
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Format(format!("truncated block {i}")))?;
        at += 8;
        let body = n
            .checked_mul(8)
            .and_then(|len| payload.get(at..at + len))
            .ok_or_else(|| Error::Format(format!("truncated block {i}")))?;
        blocks.push(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        at += 8 * n;
    }
    if at != payload.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((header, blocks))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
