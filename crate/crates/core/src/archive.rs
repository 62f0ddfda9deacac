//! Corpus files: the audio manifest and the feature archive (`SVFA`).
//!
//! A manifest is tab-separated text, one utterance per line:
//! `utt_id<TAB>speaker_id<TAB>path.wav`. Blank lines and `#` lines are skipped.
//!
//! The feature archive holds extracted feature matrices with utterance metadata:
//!
//! ```text
//! "SVFA" | version u32 | count u32
//! per record: u16 id_len | id | u16 spk_len | spk | f32 duration_s
//!             | u32 frames | u32 dims | frames x dims f32 (row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::backend::io::{check_magic, read_f32, read_string, read_u32, write_string};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub path: PathBuf,
}

/// Parses manifest text. Relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Format(format!("manifest line {}: expected `utt_id<TAB>speaker_id<TAB>path`", n + 1)));
        }
        let path = Path::new(fields[2]);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        out.push(ManifestEntry { id: fields[0].into(), speaker: fields[1].into(), path });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{}\t{}\t{}\n", e.id, e.speaker, e.path.display())).collect()
}

/// Reads a manifest file; relative paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&fs::read_to_string(path)?, base)
}

pub const ARCHIVE_MAGIC: &[u8; 4] = b"SVFA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub speaker: Option<String>,
    pub duration_s: f64,
    /// `[T, n_mels]`.
    pub features: Tensor,
}

pub fn write_archive<W: Write>(mut w: W, records: &[FeatureRecord]) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let (t, d) = match *r.features.shape() {
            [t, d] => (t, d),
            _ => return Err(Error::Shape(format!("record `{}`: features must be [T, n_mels]", r.id))),
        };
        write_string(&mut w, &r.id)?;
        write_string(&mut w, r.speaker.as_deref().unwrap_or(""))?;
        w.write_all(&(r.duration_s as f32).to_le_bytes())?;
        w.write_all(&(t as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        for &v in r.features.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<FeatureRecord>> {
    let version = check_magic(&mut r, ARCHIVE_MAGIC, "feature archive")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("feature archive: unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let trunc = |e: Error| match e {
            Error::Io(_) => Error::Format(format!("feature archive truncated in record {i}")),
            other => other,
        };
        let id = read_string(&mut r).map_err(trunc)?;
        let spk = read_string(&mut r).map_err(trunc)?;
        let duration_s = read_f32(&mut r).map_err(trunc)? as f64;
        let t = read_u32(&mut r).map_err(trunc)? as usize;
        let d = read_u32(&mut r).map_err(trunc)? as usize;
        let data = (0..t * d).map(|_| read_f32(&mut r).map(f64::from)).collect::<Result<Vec<_>>>().map_err(trunc)?;
        let features = Tensor::new(vec![t, d], data).map_err(|e| Error::Format(format!("record `{id}`: {e}")))?;
        out.push(FeatureRecord { id, speaker: (!spk.is_empty()).then_some(spk), duration_s, features });
    }
    Ok(out)
}

pub fn save_archive(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_archive(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    read_archive(fs::read(path)?.as_slice())
}
