//! Binary array container shared by checkpoints and observation stores.
//!
//! Layout: the 8-byte magic `GTSPACE1`, a little-endian `u64` header length,
//! a JSON header, then the concatenated little-endian array payloads. The
//! header lists every array's name, shape, dtype and byte offset into the
//! payload section, plus a free-form `meta` object.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"GTSPACE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: DType,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub arrays: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, m) in &self.arrays {
            entries.push(ArrayEntry { name: name.clone(), rows: m.rows(), cols: m.cols(), dtype, offset: payload.len() as u64 });
            match dtype {
                DType::F64 => m.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => m.data().iter().for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        let header = Header { format: "gtspace-container".into(), version: 1, meta: self.meta.clone(), arrays: entries };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let payload = &bytes[body..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n = e.rows * e.cols;
            let width = match e.dtype {
                DType::F64 => 8,
                DType::F32 => 4,
            };
            let start = e.offset as usize;
            let end = start + n * width;
            if end > payload.len() {
                return Err(Error::Format(format!("array {} exceeds payload", e.name)));
            }
            let raw = &payload[start..end];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            };
            arrays.push((e.name, Matrix::from_vec(e.rows, e.cols, data)));
        }
        Ok(Self { meta: header.meta, arrays })
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes(dtype))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Container holding several named parameter sets; array names are
/// `<set>/<param>`.
pub fn params_container(meta: Value, sets: &[(&str, &ParamSet)]) -> Container {
    let mut c = Container::new(meta);
    let mut shapes = serde_json::Map::new();
    for (prefix, ps) in sets {
        for (n, m) in ps.iter() {
            let name = format!("{prefix}/{n}");
            shapes.insert(name.clone(), Value::from(vec![m.rows(), m.cols()]));
            c.arrays.push((name, m.clone()));
        }
    }
    if let Value::Object(obj) = &mut c.meta {
        obj.insert("shapes".into(), Value::Object(shapes));
    }
    c
}

/// Restores the values of `ps` from the `<set>/…` arrays of a container.
pub fn restore_params(c: &Container, prefix: &str, ps: &mut ParamSet) -> Result<()> {
    let names: Vec<String> = ps.names().to_vec();
    for (i, n) in names.iter().enumerate() {
        let key = format!("{prefix}/{n}");
        let m = c.get(&key).ok_or_else(|| Error::Format(format!("missing array {key}")))?;
        if m.shape() != ps.get(i).shape() {
            return Err(Error::Format(format!("shape mismatch for {key}")));
        }
        *ps.get_mut(i) = m.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f64_bits() {
        let mut c = Container::new(serde_json::json!({"kind": "test", "d": 3}));
        c.arrays.push(("a".into(), Matrix::from_vec(2, 2, vec![1.0, -0.1, 1e-300, f64::MAX])));
        c.arrays.push(("empty".into(), Matrix::zeros(0, 4)));
        let back = Container::from_bytes(&c.to_bytes(DType::F64)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_storage_rounds() {
        let mut c = Container::new(Value::Null);
        c.arrays.push(("a".into(), Matrix::from_vec(1, 2, vec![0.1, 0.5])));
        let back = Container::from_bytes(&c.to_bytes(DType::F32)).unwrap();
        assert_eq!(back.get("a").unwrap().data(), &[0.1f32 as f64, 0.5]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"nonsense-bytes-here").is_err());
    }
}
