// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint container shared by the LM, SAEs and baseline decomposers.
//!
//! Layout: one line of UTF-8 JSON (the header) terminated by `\n`, followed
//! by the raw little-endian payloads of every tensor, concatenated in the
//! order the header lists them. No padding, no trailer.
//!
//! ```text
//! {"format_version":1,"kind":"toylm","meta":{...},"tensors":[{"name":"tok_emb","shape":[V,D],"dtype":"f32"},...]}\n
//! <f32 LE x V*D> ...
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// An in-memory checkpoint: header metadata plus named tensors in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(TensorEntry, TensorData)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.push(name.into(), shape, TensorData::F32(data));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.push(name.into(), shape, TensorData::F64(data));
    }

    fn push(&mut self, name: String, shape: &[usize], data: TensorData) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape does not match payload"
        );
        let entry = TensorEntry {
            name,
            shape: shape.to_vec(),
            dtype: data.dtype(),
        };
        self.tensors.push((entry, data));
    }

    pub fn entries(&self) -> impl Iterator<Item = &TensorEntry> {
        self.tensors.iter().map(|(e, _)| e)
    }

    fn find(&self, name: &str) -> Result<&(TensorEntry, TensorData)> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    /// Returns the shape and data of an f32 tensor.
    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.find(name)? {
            (e, TensorData::F32(v)) => Ok((&e.shape, v)),
            _ => Err(Error::Format(format!("tensor `{name}` is not f32"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.find(name)? {
            (e, TensorData::F64(v)) => Ok((&e.shape, v)),
            _ => Err(Error::Format(format!("tensor `{name}` is not f64"))),
        }
    }

    pub fn header(&self) -> Header {
        Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_string(&self.header())?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, data) in &self.tensors {
            match data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header terminator".into()));
        }
        line.pop();
        let header: Header = serde_json::from_slice(&line)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let mut buf = vec![0u8; entry.numel() * entry.dtype.width()];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated payload for `{}`", entry.name)))?;
            let data = match entry.dtype {
                DType::F32 => TensorData::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push((entry, data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Checks the kind tag, returning a format error on mismatch.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_first_line_and_payload_is_little_endian() {
        let mut ck = Checkpoint::new("test", serde_json::json!({"seed": 3}));
        ck.push_f32("a", &[2], vec![1.0, -2.5]);
        let bytes = ck.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: Header = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header.tensors[0].shape, vec![2]);
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), nl + 1 + 8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new("test", serde_json::json!({}));
        ck.push_f32("w", &[2, 2], vec![f32::MIN_POSITIVE, 1e-40, -0.0, 3.25]);
        ck.push_f64("v", &[3], vec![1.0 / 3.0, f64::EPSILON, -7.0]);
        let back = Checkpoint::read_from(&ck.to_bytes()[..]).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let (_, w) = back.f32("w").unwrap();
        assert_eq!(w[1].to_bits(), 1e-40f32.to_bits());
        assert_eq!(w[2].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut ck = Checkpoint::new("test", serde_json::json!({}));
        ck.push_f32("w", &[4], vec![0.0; 4]);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
    }
}
