//! Named parameter storage and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    b"CMCK"
//! version  u32
//! header   u32 length + UTF-8 JSON (config echo)
//! count    u32
//! count ×  { u32 name length, name bytes, u32 ndim, ndim × u32 dims,
//!            prod(dims) × f32 row-major values }
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a tensor. Panics on a duplicate name; names are fixed by the
    /// model constructors.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Mat::from_vec(fan_in, fan_out, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids of every tensor whose name starts with one of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| prefixes.iter().any(|p| self.names[id.0].starts_with(p)))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Copies every tensor of `other` whose name starts with one of
    /// `prefixes` into `self`. Names and shapes must agree.
    pub fn copy_from(&mut self, other: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for id in other.ids() {
            let name = other.name(id);
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let src = other.get(id);
            let dst_id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let dst = self.get_mut(dst_id);
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Serializes tensors whose names start with one of `prefixes` (all when
    /// empty) together with a JSON header.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, header: &str, prefixes: &[&str]) -> Result<()> {
        let selected: Vec<ParamId> = if prefixes.is_empty() {
            self.ids().collect()
        } else {
            self.ids_with_prefix(prefixes)
        };
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, header.as_bytes())?;
        w.write_all(&(selected.len() as u32).to_le_bytes())?;
        for id in selected {
            let m = self.get(id);
            write_bytes(&mut w, self.name(id).as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.len() * 4);
            for &v in m.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, header: &str, prefixes: &[&str]) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, header, prefixes)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

/// A decoded checkpoint: header text plus the tensors it carried.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}"))),
            };
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw).map_err(|_| Error::Checkpoint(format!("{name}: truncated data")))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.add(name, Mat::from_vec(rows, cols, data));
        }
        Ok(Self { header, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read(bytes.as_slice())
    }

    /// Every tensor in `target` starting with one of `prefixes` must be
    /// present here with the same shape; those tensors are copied over.
    pub fn restore_into(&self, target: &mut ParamStore, prefixes: &[&str]) -> Result<()> {
        for id in target.ids_with_prefix(prefixes) {
            let name = target.name(id).to_string();
            let src = self
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let dst = target.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(buf)
}
