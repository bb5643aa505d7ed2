//! Named parameter collections and their on-disk format.
//!
//! # File format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    : 4 bytes  "CTFP"
//! version  : u32      (currently 1)
//! count    : u32      number of entries
//! entry*   :
//!   name_len : u32
//!   name     : name_len bytes of UTF-8
//!   ndim     : u32
//!   dims     : ndim × u64
//!   values   : prod(dims) × f64 (IEEE-754 binary64, row-major)
//! ```
//!
//! A zero-dimensional entry holds a single value. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTFP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Shape as a matrix: `[]` is 1×1, `[n]` is a 1×n row, `[r, c]` is r×c.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    pub fn spec(&self) -> ParamSpec {
        ParamSpec { name: self.name.clone(), shape: self.shape.clone() }
    }

    pub fn as_mat(&self) -> Mat {
        let (r, c) = self.spec().matrix_shape();
        Mat::from_vec(r, c, self.values.clone())
    }
}

/// Ordered, uniquely named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    entries: Vec<ParamEntry>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero parameters for a signature.
    pub fn zeros(signature: &[ParamSpec]) -> Self {
        Self::from_fn(signature, |_, _| 0.0)
    }

    /// Fills each entry with `f(spec, flat_index)`.
    pub fn from_fn(signature: &[ParamSpec], mut f: impl FnMut(&ParamSpec, usize) -> f64) -> Self {
        let entries = signature
            .iter()
            .map(|s| ParamEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                values: (0..s.numel()).map(|i| f(s, i)).collect(),
            })
            .collect();
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Signature(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Signature(format!(
                "parameter `{name}` declares {numel} values but has {}",
                values.len()
            )));
        }
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), values });
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        self.insert(name, shape, values)?;
        Ok(self)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn signature(&self) -> Vec<ParamSpec> {
        self.entries.iter().map(ParamEntry::spec).collect()
    }

    /// Errors unless names, order and shapes equal `signature`.
    pub fn check_signature(&self, signature: &[ParamSpec]) -> Result<()> {
        if self.entries.len() != signature.len() {
            return Err(Error::Signature(format!(
                "expected {} parameter arrays, got {}",
                signature.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter().zip(signature) {
            if e.name != s.name || e.shape != s.shape {
                return Err(Error::Signature(format!(
                    "expected `{}` {:?}, got `{}` {:?}",
                    s.name, s.shape, e.name, e.shape
                )));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.entries.iter().flat_map(|e| e.values.iter())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.entries.iter_mut().flat_map(|e| e.values.iter_mut())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_values().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Clamps every value into `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        self.iter_values_mut().for_each(|x| *x = x.clamp(-c, c));
    }

    /// `self += k · other` for maps with the same layout.
    pub fn axpy(&mut self, k: f64, other: &ParamMap) {
        debug_assert_eq!(self.signature(), other.signature());
        for (a, b) in self.iter_values_mut().zip(other.iter_values()) {
            *a += k * b;
        }
    }

    pub fn scaled(&self, k: f64) -> ParamMap {
        let mut out = self.clone();
        out.iter_values_mut().for_each(|x| *x *= k);
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut map = ParamMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            map.insert(name, &shape, values).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(map)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
