//! Versioned parameter container with named tensors and a free-form metadata
//! block. Two encodings share one logical schema:
//!
//! * binary (`DNCK` magic): little-endian, bit-exact round trips;
//! * JSON: human-readable, value-exact round trips (serde_json emits the
//!   shortest representation that parses back to the same f64).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DNCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { version: VERSION, meta: BTreeMap::new(), tensors: BTreeMap::new() }
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) {
        self.tensors.insert(
            name.to_string(),
            TensorEntry { shape: t.shape().to_vec(), values: t.values().to_vec() },
        );
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Contract(format!("checkpoint missing metadata key '{key}'")))
    }

    /// Copies stored values into the given named tensors. Every requested
    /// tensor must be present with a matching shape.
    pub fn load_into(&self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let entry = self
                .tensors
                .get(name.as_str())
                .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor '{name}'")))?;
            if entry.shape != t.shape() {
                return Err(Error::dimension(
                    "checkpoint_load",
                    format!("tensor '{name}': stored {:?} vs expected {:?}", entry.shape, t.shape()),
                ));
            }
            t.values_mut().copy_from_slice(&entry.values);
        }
        Ok(())
    }

    // ── binary encoding ─────────────────────────────────────────────

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
            for d in &entry.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            w.write_all(&(entry.values.len() as u64).to_le_bytes())?;
            for v in &entry.values {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse { line: 0, detail: "bad checkpoint magic".into() });
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse { line: 0, detail: format!("unsupported version {version}") });
        }
        let mut ck = Checkpoint::new();
        let meta_n = read_u32(&mut r)? as usize;
        if meta_n > 1 << 20 {
            return Err(Error::Parse { line: 0, detail: "implausible metadata count".into() });
        }
        for _ in 0..meta_n {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            ck.meta.insert(k, v);
        }
        let tensor_n = read_u32(&mut r)? as usize;
        if tensor_n > 1 << 20 {
            return Err(Error::Parse { line: 0, detail: "implausible tensor count".into() });
        }
        for _ in 0..tensor_n {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(Error::Parse { line: 0, detail: "implausible rank".into() });
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel = read_u64(&mut r)? as usize;
            if numel != shape.iter().product::<usize>() || numel > 1 << 28 {
                return Err(Error::Parse {
                    line: 0,
                    detail: format!("tensor '{name}': bad element count"),
                });
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_bits(read_u64(&mut r)?));
            }
            ck.tensors.insert(name, TensorEntry { shape, values });
        }
        Ok(ck)
    }

    // ── JSON encoding ───────────────────────────────────────────────

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != VERSION {
            return Err(Error::Parse {
                line: 0,
                detail: format!("unsupported version {}", ck.version),
            });
        }
        for (name, entry) in &ck.tensors {
            if entry.values.len() != entry.shape.iter().product::<usize>() {
                return Err(Error::Parse {
                    line: 0,
                    detail: format!("tensor '{name}': values do not match shape"),
                });
            }
        }
        Ok(ck)
    }

    // ── file helpers (format chosen by extension, sniffed on load) ──

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().map(|e| e == "json").unwrap_or(false) {
            std::fs::write(path, self.to_json()?)?;
        } else {
            let mut buf = Vec::new();
            self.write_binary(&mut buf)?;
            std::fs::write(path, buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Parses either encoding, sniffing the binary magic first.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(MAGIC) {
            Checkpoint::read_binary(bytes)
        } else {
            let s = std::str::from_utf8(bytes)
                .map_err(|_| Error::Parse { line: 0, detail: "neither DNCK nor UTF-8 JSON".into() })?;
            Checkpoint::from_json(s)
        }
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Parse { line: 0, detail: "implausible string length".into() });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Parse { line: 0, detail: "non-UTF-8 string".into() })
}
