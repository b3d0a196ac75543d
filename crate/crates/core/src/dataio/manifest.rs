//! JSONL dataset manifests: one object per line with fields
//! `id`, `image`, `caption`, `category`, `mask` (optional) and `split`.
//! Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One manifest line as written on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub caption: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
}

/// A validated manifest entry with resolved paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub caption: String,
    pub category: String,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::ManifestLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(Error::ManifestLine { line: line_no, message: "empty id".into() });
        }
        if rec.caption.trim().is_empty() {
            return Err(Error::ManifestLine { line: line_no, message: "empty caption".into() });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let image_path = base.join(&rec.image);
        if !image_path.is_file() {
            return Err(Error::MissingFile(image_path));
        }
        let mask_path = match rec.mask {
            Some(m) => {
                let p = base.join(m);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: rec.id,
            image_path,
            caption: rec.caption,
            category: rec.category,
            mask_path,
            split: rec.split,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
