//! Named parameter storage and the binary model format.
//!
//! File layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "LUNK" | version | count
//! count x { name_len | name bytes (utf-8) | ndim | dims... }
//! values as little-endian f32, in manifest order
//! ```

use std::io::{Read, Write};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LUNK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape; `trainable` decides whether they
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients of bound parameters after a backward pass; zeros where the
    /// loss did not reach a parameter.
    pub fn collect_grads(&self, tape: &mut Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Prefixes every name, e.g. to merge two networks into one file.
    pub fn prefixed(&self, prefix: &str) -> ParamStore {
        ParamStore {
            names: self.names.iter().map(|n| format!("{prefix}{n}")).collect(),
            tensors: self.tensors.clone(),
        }
    }

    /// Parameters whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.add(rest, t.clone());
            }
        }
        out
    }

    pub fn extend(&mut self, other: ParamStore) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.add(n, t);
        }
    }

    /// Copies values from `other`, which must have the same manifest.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ModelFormat("parameter manifest differs".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::ModelFormat(format!(
                    "shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<ParamStore> {
        let fmt = |e: std::io::Error| Error::ModelFormat(e.to_string());
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(fmt)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(fmt)?;
            let name = String::from_utf8(name).map_err(|e| Error::ModelFormat(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r)? as usize);
            }
            manifest.push((name, shape));
        }
        let mut store = ParamStore::new();
        let mut f32_buf = [0u8; 4];
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut f32_buf).map_err(fmt)?;
                data.push(f32::from_le_bytes(f32_buf) as f64);
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout_is_exact() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, -0.5]).unwrap());
        let bytes = s.to_bytes();
        let mut expected = b"LUNK".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(ParamStore::read_from(&mut bytes.as_slice()).unwrap(), s);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(ParamStore::read_from(&mut &b"NOPE"[..]).is_err());
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[3, 2]));
        let bytes = s.to_bytes();
        assert!(ParamStore::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }
}
