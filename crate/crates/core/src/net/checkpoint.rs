//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FMCKPT\r\n"
//! u32     format version (1)
//! u8      bytes per real (4 or 8)
//! u32     entry count
//! entry:  u32 name length, name (utf-8), u8 kind
//!         kind 0 (tensor): u32 rank, u64 dims[rank], reals (little-endian)
//!         kind 1 (bytes):  u64 length, raw bytes
//! ```
//!
//! Model parameters are stored as `param/<name>`, momentum buffers as
//! `velocity/<name>` and pending accumulated gradients as `grad/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{DetectorModel, Real, Tensor};

const MAGIC: &[u8; 8] = b"FMCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob<T> {
    Tensor { shape: Vec<usize>, values: Vec<T> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint<T> {
    entries: Vec<(String, Blob<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Blob<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn insert(&mut self, name: impl Into<String>, blob: Blob<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = blob,
            None => self.entries.push((name, blob)),
        }
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, shape: &[usize], values: &[T]) {
        self.insert(
            name,
            Blob::Tensor {
                shape: shape.to_vec(),
                values: values.to_vec(),
            },
        );
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.insert(name, Blob::Bytes(bytes.into()));
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Blob::Bytes(b)) => Ok(b),
            _ => Err(Error::Format(format!("checkpoint has no byte entry `{name}`"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[T])> {
        match self.get(name) {
            Some(Blob::Tensor { shape, values }) => Ok((shape, values)),
            _ => Err(Error::Format(format!("checkpoint has no tensor `{name}`"))),
        }
    }

    /// `key=value` lines stored under `meta`.
    pub fn set_meta(&mut self, meta: &BTreeMap<String, String>) {
        let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        self.insert_bytes("meta", text.into_bytes());
    }

    pub fn meta(&self) -> Result<BTreeMap<String, String>> {
        let text = std::str::from_utf8(self.bytes("meta")?).map_err(|_| Error::Format("meta is not utf-8".into()))?;
        Ok(text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect())
    }

    pub fn store_model(&mut self, model: &DetectorModel<T>) {
        for p in model.params() {
            let shape = p.value.shape();
            self.insert_tensor(format!("param/{}", p.name), &shape, p.value.data());
            self.insert_tensor(format!("velocity/{}", p.name), &shape, &p.velocity);
            self.insert_tensor(format!("grad/{}", p.name), &shape, &p.grad);
        }
    }

    /// Copies parameters, velocities and pending gradients into a model
    /// built with the same architecture.
    pub fn restore_model(&self, model: &mut DetectorModel<T>) -> Result<()> {
        for p in model.params_mut() {
            let shape = p.value.shape();
            let fetch = |prefix: &str| -> Result<Vec<T>> {
                let (s, v) = self.tensor(&format!("{prefix}/{}", p.name))?;
                if s != shape {
                    return Err(Error::Shape(format!(
                        "{prefix}/{}: stored {s:?}, model {shape:?}",
                        p.name
                    )));
                }
                Ok(v.to_vec())
            };
            p.value = Tensor::from_vec(shape, fetch("param")?)?;
            p.velocity = fetch("velocity")?;
            p.grad = fetch("grad")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, blob) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match blob {
                Blob::Tensor { shape, values } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &v in values {
                        v.write_le(&mut out);
                    }
                }
                Blob::Bytes(bytes) => {
                    out.push(1);
                    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "checkpoint stores {width}-byte reals, expected {}",
                T::BYTES
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?;
            let blob = match r.take(1)?[0] {
                0 => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank)
                        .map(|_| r.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    let raw = r.take(
                        n.checked_mul(T::BYTES)
                            .ok_or_else(|| Error::Format("tensor too large".into()))?,
                    )?;
                    Blob::Tensor {
                        shape,
                        values: raw.chunks_exact(T::BYTES).map(T::read_le).collect(),
                    }
                }
                1 => {
                    let len = r.u64()? as usize;
                    Blob::Bytes(r.take(len)?.to_vec())
                }
                k => return Err(Error::Format(format!("unknown entry kind {k} for `{name}`"))),
            };
            entries.push((name, blob));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
