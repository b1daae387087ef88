//! The FEMB embedding container and its JSONL label manifest.
//!
//! ```text
//! "FEMB" | u32 version (1) | u32 count | u32 dim
//!        | count x dim f32, row-major | u32 CRC32 of the f32 block
//! ```
//!
//! All integers and floats little-endian. The manifest `<stem>.jsonl` holds
//! one `{"id": .., "label": "bonafide"|"deepfake", "row": ..}` object per row.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::label::Label;

pub const FEMB_MAGIC: &[u8; 4] = b"FEMB";
pub const FEMB_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: Label,
    row: u32,
}

pub fn manifest_path(femb: &Path) -> PathBuf {
    femb.with_extension("jsonl")
}

/// Encodes the binary part of a dataset.
pub fn encode_femb(dataset: &EmbeddingDataset) -> Vec<u8> {
    let count = u32::try_from(dataset.count()).expect("count fits in u32");
    let dim = u32::try_from(dataset.dim()).expect("dim fits in u32");
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.vectors().len() * 4 + 4);
    out.extend_from_slice(FEMB_MAGIC);
    out.extend_from_slice(&FEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in dataset.vectors() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes the binary part into `(count, dim, values)`; `path` only labels
/// errors.
pub fn decode_femb(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::format(path, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEMB_MAGIC {
        return Err(Error::format(path, "bad magic, expected FEMB"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEMB_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (count, dim) = (word(8) as usize, word(12) as usize);
    let payload_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "count x dim overflows"))?;
    let expected = HEADER_LEN + payload_len + 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "length {} does not match header ({count} x {dim} needs {expected}); CRC cannot be verified",
                bytes.len()
            ),
        ));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = word(HEADER_LEN + payload_len);
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::format(
            path,
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((count, dim, values))
}

fn encode_manifest(dataset: &EmbeddingDataset) -> String {
    let mut out = String::new();
    for (row, (id, &label)) in dataset.ids().iter().zip(dataset.labels()).enumerate() {
        let entry = ManifestEntry {
            id: id.clone(),
            label,
            row: row as u32,
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(out, "{line}").expect("writing to a String");
    }
    out
}

fn decode_manifest(text: &str, count: usize, path: &Path) -> Result<(Vec<String>, Vec<Label>)> {
    let mut slots: Vec<Option<(String, Label)>> = vec![None; count];
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        let row = entry.row as usize;
        if row >= count {
            return Err(Error::Data(format!(
                "{}: line {}: row {row} out of range for {count} rows",
                path.display(),
                lineno + 1
            )));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Data(format!(
                "{}: line {}: duplicate id {:?}",
                path.display(),
                lineno + 1,
                entry.id
            )));
        }
        if slots[row].is_some() {
            return Err(Error::Data(format!(
                "{}: line {}: row {row} listed twice",
                path.display(),
                lineno + 1
            )));
        }
        slots[row] = Some((entry.id, entry.label));
    }
    let mut ids = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (row, slot) in slots.into_iter().enumerate() {
        let (id, label) =
            slot.ok_or_else(|| Error::Data(format!("{}: row {row} has no manifest entry", path.display())))?;
        ids.push(id);
        labels.push(label);
    }
    Ok((ids, labels))
}

/// Writes `path` and its manifest next to it.
pub fn write_femb(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_femb(dataset)).map_err(|e| Error::io(path, e))?;
    let manifest = manifest_path(path);
    std::fs::write(&manifest, encode_manifest(dataset)).map_err(|e| Error::io(&manifest, e))
}

/// Reads `path` and its manifest. The source tag is the file stem.
pub fn read_femb(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (count, dim, values) = decode_femb(&bytes, path)?;
    let manifest = manifest_path(path);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let (ids, labels) = decode_manifest(&text, count, &manifest)?;
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    EmbeddingDataset::new(dim, values, ids, labels, tag)
        .map_err(|e| Error::format(path, e.to_string()))
}
