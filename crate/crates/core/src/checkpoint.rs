//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//! `"GFMR"`, `u32` format version, tag string, `u32` hidden, `u32` layers,
//! `u32` text_dim, `u32` tensor count, then per tensor: name string,
//! `u32` ndim, `u64` dims, `f64` data. Strings are `u32` length + UTF-8.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"GFMR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub tag: String,
    pub hidden: usize,
    pub layers: usize,
    pub text_dim: usize,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(header: &CheckpointHeader, params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, &header.tag);
    put_u32(&mut buf, header.hidden);
    put_u32(&mut buf, header.layers);
    put_u32(&mut buf, header.text_dim);
    put_u32(&mut buf, params.len());
    for (name, p) in params.iter() {
        put_str(&mut buf, name);
        let shape = p.value().shape();
        put_u32(&mut buf, shape.len());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value().data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

/// Decodes a checkpoint into its header and named tensors.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header = CheckpointHeader {
        tag: r.string()?,
        hidden: r.u32()?,
        layers: r.u32()?,
        text_dim: r.u32()?,
    };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((header, tensors))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode(header, params)).map_err(|e| Error::io(path, e))
}

/// Reads `path` into `params`, whose names and shapes act as the schema.
pub fn load_into(path: &Path, expected: &CheckpointHeader, params: &mut ParamSet) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let (header, tensors) = decode(&bytes)?;
    if header != *expected {
        return Err(Error::Checkpoint(format!("header {header:?} does not match expected {expected:?}")));
    }
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(tensors.len());
    for ((name, t), (want_name, p)) in tensors.into_iter().zip(params.iter()) {
        if name != want_name || t.shape() != p.value().shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} {:?} does not match expected {want_name:?} {:?}",
                t.shape(),
                p.value().shape()
            )));
        }
        values.push(t);
    }
    params.set_values(values)
}
