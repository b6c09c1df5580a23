//! Little-endian binary containers.
//!
//! `TensorFile` layout (version 1):
//!
//! ```text
//! magic    8 bytes  "VONETNSR"
//! version  u32
//! count    u32
//! count x {
//!     name_len u32, name (utf-8)
//!     ndim     u32, dims u64 x ndim
//!     data     f32 x prod(dims), row-major
//! }
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 8] = b"VONETNSR";
const TENSOR_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format(None, format!("unexpected end of data (wanted {n} bytes)")));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

/// Ordered collection of named f32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(TENSOR_MAGIC);
        w.u32(TENSOR_VERSION);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.iter() {
                w.f32(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TensorFile> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != TENSOR_MAGIC {
            return Err(Error::format(None, "not a tensor container"));
        }
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(Error::format(None, format!("unsupported tensor version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::format(None, e.to_string()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(None, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::format(None, e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::format(None, "trailing bytes after last tensor"));
        }
        Ok(TensorFile { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TensorFile> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorFile::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(Some(path.to_path_buf()), reason),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..4), seed in 0u32..1000) {
            let mut file = TensorFile::default();
            for (i, shape) in shapes.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| (k as f32 + seed as f32) * 0.37 - i as f32).collect();
                file.push(format!("t{i}"), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
            }
            let back = TensorFile::from_bytes(&file.to_bytes()).unwrap();
            prop_assert_eq!(back, file);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorFile::from_bytes(b"VONETNS").is_err());
        let mut bytes = TensorFile::default().to_bytes();
        bytes.push(0);
        assert!(TensorFile::from_bytes(&bytes).is_err());
    }
}
