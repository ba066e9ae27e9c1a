//! Shared binary container used by the checkpoint and update files.
//!
//! Layout: 4-byte magic, `u32` version, `u32` header length, JSON header,
//! `u32` record count, then per record a `u32` name length, the UTF-8 name
//! and one `GTTN` tensor. All integers little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

pub const CONTAINER_VERSION: u32 = 1;

pub type Records = Vec<(String, Tensor)>;

/// Writes `bytes` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_container<H: Serialize>(magic: &[u8; 4], header: &H, records: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf)?;
    }
    Ok(buf)
}

pub fn write_container<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    records: &[(&str, &Tensor)],
) -> Result<()> {
    write_atomic(path, &encode_container(magic, header, records)?)
}

/// Reads magic, version and the raw JSON header without touching records.
pub fn read_header_value<R: Read>(r: &mut R) -> Result<([u8; 4], serde_json::Value)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let version = read_u32(r)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "{} container version {version} unsupported (expected {CONTAINER_VERSION})",
            String::from_utf8_lossy(&magic)
        )));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    Ok((magic, serde_json::from_slice(&json)?))
}

pub fn decode_container<H: DeserializeOwned, R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(H, Records)> {
    let (found, header) = read_header_value(r)?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let header: H = serde_json::from_value(header)?;
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        records.push((name, Tensor::read_from(r)?));
    }
    Ok((header, records))
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Records)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(fs::File::open(path)?);
    decode_container(&mut r, magic)
}

/// Removes the record called `name`, failing with a format error if absent.
pub fn take_record(records: &mut Records, name: &str) -> Result<Tensor> {
    let pos = records
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor record `{name}`")))?;
    Ok(records.swap_remove(pos).1)
}

/// Hex SHA-256 over shapes and payloads, in order.
pub fn hash_tensors<'t>(tensors: impl IntoIterator<Item = &'t Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
