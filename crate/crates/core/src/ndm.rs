//! `NDM1` dense matrix container.
//!
//! Layout (little-endian):
//! - magic: `NDM1`
//! - rows: u32
//! - cols: u32
//! - payload: rows * cols f32, row-major
//! - id block: one UTF-8 row identifier per line, `\n` terminated
//!
//! Files written by this crate may carry an optional trailer after the id
//! block: a single NUL byte followed by a UTF-8 JSON object. Plain readers
//! that stop at the id block never see it, and ids cannot contain NUL.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDM1";

/// Raw contents of an `NDM1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct NdmMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major payload.
    pub data: Vec<f32>,
    /// Either empty (anonymous rows) or exactly `rows` entries.
    pub row_ids: Vec<String>,
    pub meta: Option<Value>,
}

impl NdmMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, row_ids: Vec<String>) -> Result<Self> {
        let m = NdmMatrix {
            rows,
            cols,
            data,
            row_ids,
            meta: None,
        };
        m.check()?;
        Ok(m)
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    fn check(&self) -> Result<()> {
        if self.rows > u32::MAX as usize || self.cols > u32::MAX as usize {
            return Err(Error::Format("dimensions exceed u32".into()));
        }
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "payload has {} values, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if !self.row_ids.is_empty() && self.row_ids.len() != self.rows {
            return Err(Error::Format(format!(
                "{} row ids for {} rows",
                self.row_ids.len(),
                self.rows
            )));
        }
        for id in &self.row_ids {
            if id.contains('\n') || id.contains('\0') {
                return Err(Error::Format(format!("row id {id:?} contains a separator")));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.check()?;
        let io = |e| Error::io("<stream>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(self.rows as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.cols as u32).to_le_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        for id in &self.row_ids {
            w.write_all(id.as_bytes()).map_err(io)?;
            w.write_all(b"\n").map_err(io)?;
        }
        if let Some(meta) = &self.meta {
            w.write_all(&[0u8]).map_err(io)?;
            serde_json::to_writer(&mut w, meta)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<stream>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format("file shorter than header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let payload_end = 12usize
            .checked_add(n)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let data: Vec<f32> = bytes[12..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let rest = &bytes[payload_end..];
        let (id_bytes, meta_bytes) = match rest.iter().position(|&b| b == 0) {
            Some(p) => (&rest[..p], Some(&rest[p + 1..])),
            None => (rest, None),
        };
        let id_text = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::Format("id block is not UTF-8".into()))?;
        let mut row_ids: Vec<String> = id_text.split('\n').map(str::to_owned).collect();
        // a terminated block leaves one empty tail element
        if row_ids.last().is_some_and(|s| s.is_empty()) {
            row_ids.pop();
        }
        if !row_ids.is_empty() && row_ids.len() != rows {
            return Err(Error::Format(format!(
                "id block has {} entries for {rows} rows",
                row_ids.len()
            )));
        }
        let meta = match meta_bytes {
            Some(b) if !b.is_empty() => Some(serde_json::from_slice(b)?),
            _ => None,
        };
        Ok(NdmMatrix {
            rows,
            cols,
            data,
            row_ids,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| relabel_io(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| relabel_io(e, path))
    }
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NdmMatrix {
        NdmMatrix::new(
            2,
            3,
            vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30],
            vec!["img-1".into(), "cap-1".into()],
        )
        .unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut buf = Vec::new();
        NdmMatrix::new(1, 2, vec![1.0, 2.0], vec!["a".into()])
            .unwrap()
            .write_to(&mut buf)
            .unwrap();
        let mut expected = b"NDM1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&2.0f32.to_le_bytes());
        expected.extend_from_slice(b"a\n");
        assert_eq!(buf, expected);
    }

    #[test]
    fn reads_back_with_trailer() {
        let m = sample().with_meta(serde_json::json!({"model_name": "x"}));
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(NdmMatrix::from_bytes(&buf).unwrap(), m);
    }

    #[test]
    fn accepts_unterminated_id_block() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.pop();
        assert_eq!(NdmMatrix::from_bytes(&buf).unwrap().row_ids, sample().row_ids);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(matches!(
            NdmMatrix::from_bytes(&buf[..20]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_bad_magic_and_id_count() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[3] = b'2';
        assert!(NdmMatrix::from_bytes(&bad).is_err());
        buf.extend_from_slice(b"extra\n");
        assert!(NdmMatrix::from_bytes(&buf).is_err());
    }

    #[test]
    fn anonymous_rows_allowed() {
        let m = NdmMatrix::new(2, 1, vec![1.0, 2.0], vec![]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(NdmMatrix::from_bytes(&buf).unwrap(), m);
    }
}
