//! Binary tensor and weights containers.
//!
//! TensorFile layout (little-endian throughout):
//!
//! ```text
//! "AGT1" | version: u16 = 1 | ndim: u16 | dims: ndim × u32 | payload: Π dims × f64
//! ```
//!
//! WeightsFile layout:
//!
//! ```text
//! "AGW1" | version: u16 = 1 | count: u32
//! count × { name_len: u16 | name: UTF-8 | offset: u64 | ndim: u16 | dims: ndim × u32 }
//! blobs: count × TensorFile, concatenated
//! ```
//!
//! `offset` is measured from the first byte after the manifest. Names are
//! strictly increasing in byte order and blobs are stored in manifest order
//! with no gaps.

use std::collections::BTreeMap;
use std::path::Path;

use crate::aggregation::{PipelineConfig, PipelineParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"AGT1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"AGW1";
pub const VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.what,
                format!("truncated {field} at byte {}: need {n}, have {}", self.pos, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::format(
                self.what,
                format!("magic: expected {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(m)),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16("version")?;
        if v != VERSION {
            return Err(Error::format(self.what, format!("version: unsupported {v}")));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u16("ndim")? as usize;
        if ndim == 0 {
            return Err(Error::format(self.what, "ndim: must be at least 1"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let d = self.u32(&format!("dims[{i}]"))? as usize;
            if d == 0 {
                return Err(Error::format(self.what, format!("dims[{i}]: zero extent")));
            }
            dims.push(d);
        }
        Ok(dims)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.what,
                format!("trailing bytes: {} after offset {}", self.buf.len() - self.pos, self.pos),
            ));
        }
        Ok(())
    }
}

fn push_dims(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    let ndim = u16::try_from(shape.len()).map_err(|_| Error::format("tensor", "ndim exceeds u16"))?;
    out.extend_from_slice(&ndim.to_le_bytes());
    for &d in shape {
        if d == 0 {
            return Err(Error::format("tensor", "zero extent"));
        }
        let d = u32::try_from(d).map_err(|_| Error::format("tensor", "dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_dims(&mut out, t.shape())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_tensor_body(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let dims = r.dims()?;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(r.what, "dims: element count overflows"))?;
    let payload = r.take(n, "payload")?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(dims, data)
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf, "tensor file");
    let t = read_tensor_body(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

/// Named tensors, kept in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    entries: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named(named: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut w = Self::new();
        for (n, t) in named {
            w.insert(n, t)?;
        }
        Ok(w)
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::format("weights file", format!("name: invalid length {}", name.len())));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::format("weights file", format!("name: duplicate entry {name:?}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let blobs: Vec<Vec<u8>> = self.entries.values().map(encode_tensor).collect::<Result<_>>()?;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::format("weights file", "count exceeds u32"))?;
        out.extend_from_slice(&count.to_le_bytes());
        let mut offset = 0u64;
        for ((name, t), blob) in self.entries.iter().zip(&blobs) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            push_dims(&mut out, t.shape())?;
            offset += blob.len() as u64;
        }
        for b in blobs {
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "weights file");
        r.magic(WEIGHTS_MAGIC)?;
        r.version()?;
        let count = r.u32("count")? as usize;
        let mut manifest: Vec<(String, u64, Vec<usize>)> = Vec::new();
        for i in 0..count {
            let len = r.u16(&format!("manifest[{i}].name_len"))? as usize;
            let raw = r.take(len, &format!("manifest[{i}].name"))?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::format("weights file", format!("manifest[{i}].name: not UTF-8")))?
                .to_string();
            if name.is_empty() {
                return Err(Error::format("weights file", format!("manifest[{i}].name: empty")));
            }
            if let Some((prev, _, _)) = manifest.last() {
                if prev.as_str() >= name.as_str() {
                    return Err(Error::format(
                        "weights file",
                        format!("manifest[{i}].name: {name:?} not after {prev:?}"),
                    ));
                }
            }
            let offset = r.u64(&format!("manifest[{i}].offset"))?;
            let dims = r.dims()?;
            manifest.push((name, offset, dims));
        }
        let base = r.pos;
        let mut entries = BTreeMap::new();
        for (name, offset, dims) in manifest {
            if (r.pos - base) as u64 != offset {
                return Err(Error::format(
                    "weights file",
                    format!("offset of {name:?}: manifest says {offset}, blob starts at {}", r.pos - base),
                ));
            }
            let t = read_tensor_body(&mut r)
                .map_err(|e| Error::format("weights file", format!("blob {name:?}: {e}")))?;
            if t.shape() != dims.as_slice() {
                return Err(Error::format(
                    "weights file",
                    format!("shape of {name:?}: manifest {dims:?}, blob {:?}", t.shape()),
                ));
            }
            entries.insert(name, t);
        }
        r.finish()?;
        Ok(Self { entries })
    }

    /// All pipeline parameters plus the batch-norm running statistics.
    pub fn from_pipeline(p: &PipelineParams) -> Result<Self> {
        Self::from_named(p.named_tensors_with_buffers())
    }

    /// Rebuilds pipeline parameters for `cfg`. Every parameter must be present
    /// with the configured shape and no other entries are accepted.
    pub fn to_pipeline(&self, cfg: &PipelineConfig) -> Result<PipelineParams> {
        let known: Vec<String> = PipelineParams::zeros(cfg)
            .named_tensors_with_buffers()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        if let Some(extra) = self.names().find(|n| known.binary_search_by(|k| k.as_str().cmp(n)).is_err()) {
            return Err(Error::format(
                "weights file",
                format!("entry {extra:?}: not a parameter of this configuration"),
            ));
        }
        PipelineParams::from_lookup(cfg, |n| self.get(n).cloned())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
