//! N-MNIST (ATIS) binary codec. Each event is 5 bytes:
//!
//! ```text
//! byte 0      x
//! byte 1      y
//! byte 2      bit 7 polarity (1 = positive), bits 6..0 timestamp bits 22..16
//! byte 3..4   timestamp bits 15..0, big-endian
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Event, EventStream, LabeledSample, Polarity};
use crate::error::{Error, Result};

/// N-MNIST sensor extent (height, width).
pub const NMNIST_SIZE: (u16, u16) = (34, 34);

const RECORD: usize = 5;
const MAX_T: u64 = (1 << 23) - 1;

pub fn load_nmnist_bin(bytes: &[u8]) -> Result<EventStream> {
    if bytes.is_empty() {
        return Err(Error::EmptyStream);
    }
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {RECORD}-byte records",
            bytes.len()
        )));
    }
    let events = bytes
        .chunks_exact(RECORD)
        .map(|r| Event {
            x: r[0] as u16,
            y: r[1] as u16,
            p: if r[2] & 0x80 != 0 { Polarity::Pos } else { Polarity::Neg },
            t: ((r[2] as u64 & 0x7F) << 16) | ((r[3] as u64) << 8) | r[4] as u64,
        })
        .collect();
    EventStream::new(events, NMNIST_SIZE.0, NMNIST_SIZE.1)
}

pub fn encode_nmnist_bin(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stream.len() * RECORD);
    for e in stream.events() {
        if e.x > 255 || e.y > 255 || e.t > MAX_T {
            return Err(Error::Format(format!("event {e:?} does not fit the 5-byte layout")));
        }
        let pol = if e.p == Polarity::Pos { 0x80 } else { 0 };
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            pol | ((e.t >> 16) as u8 & 0x7F),
            (e.t >> 8) as u8,
            e.t as u8,
        ]);
    }
    Ok(out)
}

pub fn read_nmnist_file(path: &Path) -> Result<EventStream> {
    load_nmnist_bin(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Parses `path<TAB>label` lines. Blank lines are skipped; relative paths
/// are resolved against `base`.
pub fn read_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, label) = line.rsplit_once('\t').ok_or_else(|| {
            Error::Format(format!("manifest line {}: expected path<TAB>label", lineno + 1))
        })?;
        let label = label.trim().parse().map_err(|_| {
            Error::Format(format!("manifest line {}: bad label `{label}`", lineno + 1))
        })?;
        let path = Path::new(path);
        let path = if path.is_relative() { base.join(path) } else { path.to_path_buf() };
        out.push(ManifestEntry { path, label });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{}\t{}\n", e.path.display(), e.label)).collect()
}

/// Builds a manifest from `root/<class>/<sample>.bin`. Class directories
/// named by integers keep those integers as labels; otherwise labels follow
/// the sorted directory names.
pub fn scan_class_dirs(root: &Path) -> Result<Vec<ManifestEntry>> {
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Format(format!("no class directories under {}", root.display())));
    }
    let numeric: Option<Vec<usize>> = classes.iter().map(|(n, _)| n.parse().ok()).collect();
    let mut out = Vec::new();
    for (i, (_, dir)) in classes.iter().enumerate() {
        let label = numeric.as_ref().map_or(i, |n| n[i]);
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        out.extend(files.into_iter().map(|path| ManifestEntry { path, label }));
    }
    Ok(out)
}

/// Loads `root/<class>/<sample>.bin`, keeping at most `limit` files per
/// class (the first in sorted order).
pub fn load_class_dirs(root: &Path, limit: Option<usize>) -> Result<Vec<LabeledSample>> {
    let mut taken = std::collections::BTreeMap::<usize, usize>::new();
    let mut out = Vec::new();
    for entry in scan_class_dirs(root)? {
        let n = taken.entry(entry.label).or_default();
        if limit.is_some_and(|l| *n >= l) {
            continue;
        }
        *n += 1;
        let stream = read_nmnist_file(&entry.path)
            .map_err(|e| Error::Format(format!("{}: {e}", entry.path.display())))?;
        out.push(LabeledSample { stream, label: entry.label });
    }
    Ok(out)
}
