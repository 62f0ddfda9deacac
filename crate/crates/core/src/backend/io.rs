//! Embedding store, trial list and score file formats.
//!
//! Embedding file (`SVEB`), all integers little-endian:
//!
//! ```text
//! "SVEB" | version u32 | dim u32 | count u32
//! per record: u16 id_len | id | u16 spk_len | spk | f32 duration_s
//!             | f32 raw_magnitude | dim x f32
//! ```
//!
//! An empty speaker string means "no speaker".

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::EmbeddingRecord;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SVEB";
pub const EMBEDDING_VERSION: u32 = 1;

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("identifier is not valid UTF-8".into()))
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("identifier `{s}` longer than 65535 bytes")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<u32> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| Error::Format(format!("{what}: file too short")))?;
    if &m != magic {
        return Err(Error::Format(format!("{what}: bad magic {:?}", String::from_utf8_lossy(&m))));
    }
    read_u32(r)
}

pub fn write_embeddings<W: Write>(mut w: W, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, EmbeddingRecord::dim);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        if r.dim() != dim {
            return Err(Error::Shape(format!("record `{}` has dim {} but the file has {dim}", r.id, r.dim())));
        }
        write_string(&mut w, &r.id)?;
        write_string(&mut w, r.speaker.as_deref().unwrap_or(""))?;
        w.write_all(&(r.duration_s as f32).to_le_bytes())?;
        w.write_all(&(r.raw_magnitude as f32).to_le_bytes())?;
        for v in &r.vector {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<Vec<EmbeddingRecord>> {
    let version = check_magic(&mut r, EMBEDDING_MAGIC, "embedding file")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("embedding file: unsupported version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let trunc = |e: Error| match e {
            Error::Io(_) => Error::Format(format!("embedding file truncated in record {i}")),
            other => other,
        };
        let id = read_string(&mut r).map_err(trunc)?;
        let spk = read_string(&mut r).map_err(trunc)?;
        let duration_s = read_f32(&mut r).map_err(trunc)? as f64;
        let raw_magnitude = read_f32(&mut r).map_err(trunc)? as f64;
        let vector = (0..dim).map(|_| read_f32(&mut r).map(f64::from)).collect::<Result<Vec<_>>>().map_err(trunc)?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding `{id}`")));
        }
        out.push(EmbeddingRecord { id, speaker: (!spk.is_empty()).then_some(spk), vector, raw_magnitude, duration_s });
    }
    Ok(out)
}

pub fn save_embeddings(path: impl AsRef<Path>, records: &[EmbeddingRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    read_embeddings(fs::read(path)?.as_slice())
}

/// Id-indexed view over loaded records.
pub struct EmbeddingStore<'a> {
    index: HashMap<&'a str, &'a EmbeddingRecord>,
}

impl<'a> EmbeddingStore<'a> {
    pub fn new(records: &'a [EmbeddingRecord]) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for r in records {
            if index.insert(r.id.as_str(), r).is_some() {
                return Err(Error::Format(format!("duplicate embedding id `{}`", r.id)));
            }
        }
        Ok(Self { index })
    }

    pub fn get(&self, id: &str) -> Result<&'a EmbeddingRecord> {
        self.index.get(id).copied().ok_or_else(|| Error::MissingField(format!("embedding for `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Option<bool>,
}

/// `enroll test [target|nontarget]` per line; blank lines and `#` comments skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let label = match f.get(2).copied() {
            None => None,
            Some("target") => Some(true),
            Some("nontarget") => Some(false),
            Some(other) => return Err(Error::Format(format!("trial line {}: unknown label `{other}`", n + 1))),
        };
        if f.len() < 2 || f.len() > 3 {
            return Err(Error::Format(format!("trial line {}: expected `enroll test [label]`", n + 1)));
        }
        out.push(Trial { enroll: f[0].into(), test: f[1].into(), label });
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| match t.label {
            Some(l) => format!("{} {} {}\n", t.enroll, t.test, if l { "target" } else { "nontarget" }),
            None => format!("{} {}\n", t.enroll, t.test),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

/// `enroll test score` per line.
pub fn parse_scores(text: &str) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("score line {}: expected `enroll test score`", n + 1)));
        }
        let score: f64 = f[2].parse().map_err(|_| Error::Format(format!("score line {}: bad score `{}`", n + 1, f[2])))?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score line {}", n + 1)));
        }
        out.push(ScoredTrial { enroll: f[0].into(), test: f[1].into(), score });
    }
    Ok(out)
}

/// Scores with six decimal places.
pub fn format_scores(scores: &[ScoredTrial]) -> String {
    scores.iter().map(|s| format!("{} {} {:.6}\n", s.enroll, s.test, s.score)).collect()
}

/// Labels for each scored trial, looked up by `(enroll, test)` in `trials`.
pub fn label_scores(scores: &[ScoredTrial], trials: &[Trial]) -> Result<Vec<bool>> {
    let mut keys = HashMap::with_capacity(trials.len());
    for t in trials {
        if let Some(l) = t.label {
            keys.insert((t.enroll.as_str(), t.test.as_str()), l);
        }
    }
    scores
        .iter()
        .map(|s| {
            keys.get(&(s.enroll.as_str(), s.test.as_str()))
                .copied()
                .ok_or_else(|| Error::MissingField(format!("label for trial `{} {}`", s.enroll, s.test)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip() {
        let recs = vec![
            EmbeddingRecord::from_raw("u1", Some("spk".into()), &[3.0, 4.0], 2.5).unwrap(),
            EmbeddingRecord::from_raw("u2", None, &[0.0, -1.0], 1.0).unwrap(),
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..4], b"SVEB");
        let back = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(back[0].speaker.as_deref(), Some("spk"));
        assert_eq!(back[1].speaker, None);
        assert!((back[0].raw_magnitude - 5.0).abs() < 1e-6);
        assert!((back[0].vector[1] - 0.8).abs() < 1e-7);
        assert!(read_embeddings(&buf[..buf.len() - 2]).is_err());
        assert!(read_embeddings(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn trial_and_score_text() {
        let t = parse_trials("a b target\nc d nontarget\n\ne f\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[2].label, None);
        assert_eq!(parse_trials(&format_trials(&t)).unwrap(), t);
        assert!(parse_trials("a b maybe").is_err());
        let s = vec![ScoredTrial { enroll: "a".into(), test: "b".into(), score: 0.1234567 }];
        assert_eq!(format_scores(&s), "a b 0.123457\n");
        assert_eq!(label_scores(&s, &t).unwrap(), vec![true]);
        let missing = vec![ScoredTrial { enroll: "x".into(), test: "y".into(), score: 0.0 }];
        assert!(label_scores(&missing, &t).is_err());
    }
}
