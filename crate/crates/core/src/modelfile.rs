//! Named-tensor parameter file (`SVRM`).
//!
//! ```text
//! "SVRM" | version u32 | records until end of file
//! record: u16 name_len | name | u32 rank | rank x u32 extents | f32 values
//! ```
//!
//! All integers and floats are little-endian. Values are stored in single
//! precision; loading widens them back to `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::backend::io::{check_magic, read_f32, read_string, read_u32, write_string};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"SVRM";
pub const MODEL_VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamFile {
    records: Vec<(String, Tensor)>,
}

impl ParamFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, Tensor::new(vec![1], vec![v]).expect("finite scalar"));
    }

    pub fn push_vec(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(name, Tensor::new(vec![v.len()], v.to_vec())?);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.numel() != 1 {
            return Err(Error::Format(format!("record `{name}` should hold one value, has {}", t.numel())));
        }
        Ok(t.data()[0])
    }

    /// A scalar record holding a non-negative integer.
    pub fn count(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!("record `{name}` should be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    /// Every value rounded to `f32`, which is what [`ParamFile::write`] stores.
    pub fn to_single_precision(&self) -> Self {
        Self { records: self.records.iter().map(|(n, t)| (n.clone(), t.to_single_precision())).collect() }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        for (name, t) in &self.records {
            write_string(&mut w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let version = check_magic(&mut r, MODEL_MAGIC, "model file")?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("model file: unsupported version {version}")));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut cur = rest.as_slice();
        let mut out = Self::new();
        while !cur.is_empty() {
            let idx = out.records.len();
            let trunc = |e: Error| match e {
                Error::Io(_) => Error::Format(format!("model file truncated in record {idx}")),
                other => other,
            };
            let name = read_string(&mut cur).map_err(trunc)?;
            let rank = read_u32(&mut cur).map_err(trunc)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("record `{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u32(&mut cur).map(|v| v as usize)).collect::<Result<Vec<_>>>().map_err(trunc)?;
            let n: usize = shape.iter().product();
            if n * 4 > cur.len() {
                return Err(Error::Format(format!("model file truncated in record `{name}`")));
            }
            let data = (0..n).map(|_| read_f32(&mut cur).map(f64::from)).collect::<Result<Vec<_>>>().map_err(trunc)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
            out.records.push((name, t));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(fs::read(path)?.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_single_precision() {
        let mut f = ParamFile::new();
        f.push_scalar("mode", 1.0);
        f.push("w", Tensor::new(vec![2, 1, 2], vec![0.1, -2.0, 3.5, 1e-3]).unwrap());
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SVRM");
        let back = ParamFile::read(buf.as_slice()).unwrap();
        assert_eq!(back.count("mode").unwrap(), 1);
        assert_eq!(back.get("w").unwrap().shape(), &[2, 1, 2]);
        assert_eq!(back.get("w").unwrap().data()[0], 0.1f32 as f64);
        assert!(matches!(back.get("nope"), Err(Error::MissingField(_))));
        assert!(ParamFile::read(&buf[..buf.len() - 1]).is_err());
    }
}
