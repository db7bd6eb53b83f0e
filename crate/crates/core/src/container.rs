//! The `UTTS` binary container used for checkpoints and corpus arrays.
//!
//! Layout (little endian): `b"UTTS"`, `u32` version, `u64` header length, JSON
//! header (metadata plus an array directory), raw array bytes, then a CRC32 of
//! everything before it.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UTTS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

/// JSON metadata plus named arrays, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    arrays: Vec<(String, Array)>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new(serde_json::Value::Null)
    }
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: &str, array: Array) {
        match self.arrays.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = array,
            None => self.arrays.push((name.to_string(), array)),
        }
    }

    pub fn insert_mat(&mut self, name: &str, m: &Array2<f64>) {
        self.insert(
            name,
            Array {
                shape: vec![m.nrows(), m.ncols()],
                data: ArrayData::F64(m.iter().copied().collect()),
            },
        );
    }

    pub fn insert_usizes(&mut self, name: &str, v: &[usize]) {
        self.insert(
            name,
            Array {
                shape: vec![v.len()],
                data: ArrayData::U64(v.iter().map(|&x| x as u64).collect()),
            },
        );
    }

    pub fn mat(&self, name: &str) -> Result<Array2<f64>> {
        match self.get(name) {
            Some(Array {
                shape,
                data: ArrayData::F64(v),
            }) if shape.len() == 2 => Array2::from_shape_vec((shape[0], shape[1]), v.clone())
                .map_err(|e| Error::Load(format!("array {name}: {e}"))),
            Some(_) => Err(Error::Load(format!("array {name} is not a 2-D f64 matrix"))),
            None => Err(Error::Load(format!("missing array {name}"))),
        }
    }

    pub fn usizes(&self, name: &str) -> Result<Vec<usize>> {
        match self.get(name) {
            Some(Array {
                data: ArrayData::U64(v),
                ..
            }) => Ok(v.iter().map(|&x| x as usize).collect()),
            Some(_) => Err(Error::Load(format!("array {name} is not a u64 vector"))),
            None => Err(Error::Load(format!("missing array {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut body = Vec::new();
        for (name, a) in &self.arrays {
            let expected: usize = a.shape.iter().product();
            let (dtype, len) = match &a.data {
                ArrayData::F64(v) => (Dtype::F64, v.len()),
                ArrayData::U64(v) => (Dtype::U64, v.len()),
            };
            if len != expected {
                return Err(Error::Shape(format!(
                    "array {name}: shape {:?} but {len} values",
                    a.shape
                )));
            }
            entries.push(Entry {
                name: name.clone(),
                dtype,
                shape: a.shape.clone(),
                offset: body.len() as u64,
            });
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let load = |msg: String| Error::Load(msg);
        if bytes.len() < 20 {
            return Err(load(format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(load("not a UTTS container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(load(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end + 4 <= bytes.len())
            .ok_or_else(|| load("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| load(format!("bad header: {e}")))?;
        let mut need = 0usize;
        for e in &header.arrays {
            let n: usize = e.shape.iter().product();
            need = need.max(e.offset as usize + 8 * n);
        }
        let crc_at = bytes.len() - 4;
        if body_start + need > crc_at {
            return Err(load("truncated array data".into()));
        }
        let stored = u32::from_le_bytes(bytes[crc_at..].try_into().unwrap());
        if crc32fast::hash(&bytes[..crc_at]) != stored {
            return Err(load("checksum mismatch".into()));
        }
        let body = &bytes[body_start..crc_at];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let raw = &body[e.offset as usize..e.offset as usize + 8 * n];
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let data = match e.dtype {
                Dtype::F64 => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
                Dtype::U64 => ArrayData::U64(words.map(u64::from_le_bytes).collect()),
            };
            arrays.push((
                e.name,
                Array {
                    shape: e.shape,
                    data,
                },
            ));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"step": 12, "name": "x"}));
        c.insert_mat("w", &Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - 0.5 * j as f64));
        c.insert_usizes("d", &[1, 5, 9]);
        c.insert_mat("empty", &Array2::zeros((0, 4)));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.mat("w").unwrap(), c.mat("w").unwrap());
        assert_eq!(back.usizes("d").unwrap(), vec![1, 5, 9]);
        assert_eq!(back.mat("empty").unwrap().dim(), (0, 4));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.utts");
        sample().save(&path).unwrap();
        assert_eq!(Container::load(&path).unwrap(), sample());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Load(_))), "cut {cut}");
        }
    }

    #[test]
    fn corruption_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        let last_data = bytes.len() - 5;
        bytes[last_data] ^= 1;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn typed_accessors_check_kind() {
        let c = sample();
        assert!(matches!(c.mat("d"), Err(Error::Load(_))));
        assert!(matches!(c.usizes("w"), Err(Error::Load(_))));
        assert!(matches!(c.mat("nope"), Err(Error::Load(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_matrices_round_trip(
            rows in 0usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-1e6f64..1e6, 36),
        ) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| seed[i * 6 + j]);
            let mut c = Container::default();
            c.insert_mat("m", &m);
            let bytes = c.to_bytes().unwrap();
            prop_assert_eq!(Container::from_bytes(&bytes).unwrap().mat("m").unwrap(), m);
        }
    }
}
