//! Manifest parsing and writing.
//!
//! Canonical format: UTF-8 text, one record per line, tab-separated fields
//! `image_path  identity  camera  clothes_id  mask_path`. Lines starting with
//! `#` are comments. Paths are relative to the manifest's directory. Loading
//! relabels identities to a dense `[0, I)` range by order of first appearance
//! while retaining original labels, so writing a loaded manifest reproduces
//! the canonical input byte for byte.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Query => write!(f, "query"),
            Split::Gallery => write!(f, "gallery"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path string exactly as written in the manifest (relative).
    pub image_path: String,
    /// Dense label in `[0, identity_count)`, assigned by first appearance.
    pub identity: u32,
    /// Label as given in the file.
    pub original_identity: u32,
    pub camera: u32,
    pub clothes_id: u32,
    pub mask_path: String,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub split: Split,
    /// Directory the manifest was loaded from; path fields resolve against it.
    pub base_dir: PathBuf,
    pub identity_count: usize,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Record indices grouped by dense identity, in identity order.
    pub fn groups_by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.identity_count];
        for (i, rec) in self.records.iter().enumerate() {
            groups[rec.identity as usize].push(i);
        }
        groups
    }
}

pub fn load_manifest(path: &Path, split: Split) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    let mut dense: HashMap<u32, u32> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_number = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::ManifestRow {
                path: path.to_path_buf(),
                line: line_number,
                msg: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let parse_u32 = |s: &str, what: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::ManifestRow {
                path: path.to_path_buf(),
                line: line_number,
                msg: format!("{what} `{s}` is not a non-negative integer"),
            })
        };
        let original_identity = parse_u32(fields[1], "identity")?;
        let camera = parse_u32(fields[2], "camera")?;
        let clothes_id = parse_u32(fields[3], "clothes_id")?;
        let next = dense.len() as u32;
        let identity = *dense.entry(original_identity).or_insert(next);
        for rel in [fields[0], fields[4]] {
            let target = base_dir.join(rel);
            if !target.is_file() {
                return Err(Error::MissingReference {
                    path: target,
                    manifest: path.to_path_buf(),
                    line: line_number,
                });
            }
        }
        records.push(ManifestRecord {
            image_path: fields[0].to_string(),
            identity,
            original_identity,
            camera,
            clothes_id,
            mask_path: fields[4].to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest {
            path: path.to_path_buf(),
        });
    }
    let identity_count = dense.len();
    Ok(DatasetManifest {
        records,
        split,
        base_dir,
        identity_count,
    })
}

/// Writes the canonical representation (original identity labels).
pub fn write_manifest(m: &DatasetManifest, w: &mut impl Write) -> std::io::Result<()> {
    for rec in &m.records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            rec.image_path, rec.original_identity, rec.camera, rec.clothes_id, rec.mask_path
        )?;
    }
    Ok(())
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(m, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
