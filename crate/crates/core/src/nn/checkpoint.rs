//! Binary parameter container shared by every trained artifact.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      b"MSCK"
//! version    u32 = 1
//! byte order u32 = 0x01020304 (reads back as 0x04030201 on a byte-swapped file)
//! role       str
//! meta       u32 count, then (key str, value str) pairs
//! vectors    u32 count, then (name str, u64 len, len x f64)
//! nets       u32 count, then (name str, u32 layers, per layer:
//!            u32 in, u32 out, u8 activation, out*in x f64 weights (row-major), out x f64 bias)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Activation, Dense, DenseNet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCK";
pub const VERSION: u32 = 1;
const BYTE_ORDER: u32 = 0x0102_0304;

pub const ROLE_SURROGATE: &str = "channel_surrogate";
pub const ROLE_SEMANTIC: &str = "semantic_model";
pub const ROLE_CLASSIFIER: &str = "baseline_classifier";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub role: String,
    pub meta: BTreeMap<String, String>,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub nets: BTreeMap<String, DenseNet>,
}

impl Checkpoint {
    pub fn new(role: &str) -> Self {
        Checkpoint {
            role: role.to_string(),
            ..Default::default()
        }
    }

    pub fn expect_role(&self, role: &str) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::RoleMismatch {
                expected: role.to_string(),
                found: self.role.clone(),
            })
        }
    }

    pub fn net(&self, name: &str) -> Result<&DenseNet> {
        self.nets
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing network `{name}`")))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("missing vector `{name}`")))
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("missing or malformed meta `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(BYTE_ORDER);
        w.str(&self.role);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.vectors.len() as u32);
        for (k, v) in &self.vectors {
            w.str(k);
            w.0.extend_from_slice(&(v.len() as u64).to_le_bytes());
            v.iter().for_each(|&x| w.f64(x));
        }
        w.u32(self.nets.len() as u32);
        for (k, net) in &self.nets {
            w.str(k);
            w.u32(net.layers().len() as u32);
            for l in net.layers() {
                w.u32(l.input_dim() as u32);
                w.u32(l.output_dim() as u32);
                w.0.push(l.activation.tag());
                l.weights.values.iter().for_each(|&x| w.f64(x));
                l.bias.values.iter().for_each(|&x| w.f64(x));
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        if r.u32()? != BYTE_ORDER {
            return Err(Error::Format("byte-order marker mismatch".into()));
        }
        let mut ck = Checkpoint::new(&r.str()?);
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let n = r.u64()? as usize;
            let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ck.vectors.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let n_layers = r.u32()?;
            let mut layers = Vec::with_capacity(n_layers as usize);
            for _ in 0..n_layers {
                let n_in = r.u32()? as usize;
                let n_out = r.u32()? as usize;
                let act = Activation::from_tag(r.take(1)?[0])
                    .ok_or_else(|| Error::Format("unknown activation tag".into()))?;
                let w = (0..n_in * n_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let b = (0..n_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                layers.push(Dense::from_parts(
                    Tensor::from_vec(&[n_out, n_in], w)?,
                    Tensor::from_vec(&[n_out], b)?,
                    act,
                )?);
            }
            ck.nets.insert(k, DenseNet::new(layers)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}
