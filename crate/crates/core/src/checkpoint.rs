//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "IMNT"
//! format version   u32
//! config length    u32, then that many UTF-8 bytes (flat key-value text)
//! tensor count     u32
//! per tensor:
//!   name length    u32, then UTF-8 name ("backbone.block0.weight", ...)
//!   shape          4 x u32 (batch, height, width, channels)
//!   values         shape-product f32 values, raw bits
//! ```
//!
//! Values round-trip bit-exactly. Loading validates magic, version, the
//! embedded config, and every tensor name and shape against the layout the
//! config implies, so a checkpoint can never silently wire mismatched
//! weights into a model.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{param_layout, Model};
use crate::params::ParamSet;
use crate::tensor::{Shape4, Tensor4};

pub const MAGIC: [u8; 4] = *b"IMNT";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let config = model.config().to_text();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = tensor.shape();
        for dim in [s.batch, s.height, s.width, s.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
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
            None => Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, want {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (this build reads {})",
            version, FORMAT_VERSION
        )));
    }
    let config = RunConfig::from_text(&r.string()?)?;
    let specs = param_layout(&config)?;

    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, config layout has {}",
            count,
            specs.len()
        )));
    }
    let mut params = ParamSet::new();
    for spec in &specs {
        let name = r.string()?;
        if name != spec.name {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' where layout expects '{}'",
                name, spec.name
            )));
        }
        let shape = Shape4::new(
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        if shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' stored as {}, layout expects {}",
                name, shape, spec.shape
            )));
        }
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..shape.len() {
            let b = r.take(4)?;
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        params.push(name, Tensor4::from_vec(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Model::from_params(config, params)
}

pub fn save(path: &Path, model: &Model<f32>) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}
