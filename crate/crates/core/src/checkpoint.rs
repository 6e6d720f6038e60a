//! Binary checkpoint container.
//!
//! Layout: magic `AUXT`, format version (`u16` LE), header length (`u32` LE),
//! UTF-8 header, then raw little-endian `f32` payloads in header order. The
//! header holds `key=value` lines followed by one `name f32 d0,d1,...` line
//! per tensor.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

pub const MAGIC: &[u8; 4] = b"AUXT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets (or replaces) a header key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        assert!(
            !key.contains(['=', '\n', ' ']) && !value.contains('\n'),
            "invalid header entry {key:?}"
        );
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key}")))
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn push_tensor(&mut self, name: &str, tensor: Tensor<f32>) {
        assert!(
            !name.contains(['=', '\n', ' ']),
            "invalid tensor name {name:?}"
        );
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{name} f32 {}\n", dims.join(",")));
        }
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(10 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let truncated = || Error::Checkpoint("truncated file".into());
        let version =
            u16::from_le_bytes(bytes.get(4..6).ok_or_else(truncated)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = u32::from_le_bytes(bytes.get(6..10).ok_or_else(truncated)?.try_into().unwrap())
            as usize;
        let header = bytes.get(10..10 + hlen).ok_or_else(truncated)?;
        let header = std::str::from_utf8(header)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut ckpt = Checkpoint::new();
        let mut specs = Vec::new();
        for line in header.lines() {
            if let Some((k, v)) = line.split_once('=') {
                ckpt.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, dtype, dims] = parts[..] else {
                return Err(Error::Checkpoint(format!("bad tensor line {line:?}")));
            };
            if dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
            }
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}")))?;
            specs.push((name.to_string(), shape));
        }
        let mut offset = 10 + hlen;
        for (name, shape) in specs {
            let numel: usize = shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * numel)
                .ok_or_else(truncated)?;
            offset += 4 * numel;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, values)
                .map_err(|_| Error::Checkpoint(format!("bad shape for {name}")))?;
            ckpt.tensors.push((name, t));
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - offset
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
