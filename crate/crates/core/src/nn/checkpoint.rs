//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "BGPOCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name utf-8, ndim u32, dims u64 * ndim, values f64 * prod(dims)
//! ```
//!
//! Entries are written in name order. Values are raw IEEE-754 bits, so a
//! save/load round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::Parameters;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BGPOCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(&self) -> Result<f64> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Consistency(format!("expected a scalar, got shape {:?}", self.shape))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Consistency(format!("checkpoint has no entry `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn store_params<P: Parameters + ?Sized>(&mut self, prefix: &str, model: &P) {
        model.visit(prefix, &mut |name, shape, values| {
            self.entries.insert(
                name.to_string(),
                Tensor {
                    shape: shape.to_vec(),
                    data: values.to_vec(),
                },
            );
        });
    }

    /// Overwrites `model`'s parameters from entries under `prefix`; every
    /// shape must match the model exactly.
    pub fn load_params<P: Parameters + ?Sized>(&self, prefix: &str, model: &mut P) -> Result<()> {
        let mut expected = Vec::new();
        model.visit(prefix, &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
        let mut sources = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = self.require(name)?;
            if &t.shape != shape {
                return Err(Error::Shape(format!("`{name}`: checkpoint {:?}, model {:?}", t.shape, shape)));
            }
            sources.push(&t.data);
        }
        let mut k = 0;
        model.visit_mut(&mut |v| {
            v.copy_from_slice(sources[k]);
            k += 1;
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(origin, "entry name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>>>()?;
            entries.insert(name, Tensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.origin, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
