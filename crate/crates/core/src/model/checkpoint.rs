//! Native checkpoint format.
//!
//! ```text
//! "TSEG"                  magic
//! u32 version             currently 1
//! u32 config_len
//! config_len bytes        ModelConfig as canonical `key=value\n` text
//! f32 * N                 every parameter in declared order, little-endian
//! u32 crc32               of all preceding bytes
//! ```
//!
//! The checksum is validated before anything else is parsed.

use std::path::Path;

use super::{ModelConfig, TemporalSegmenter};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model into checkpoint bytes.
pub fn write_checkpoint(model: &TemporalSegmenter<f32>) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let cfg = model.config().to_canonical_text();
    w.u32(cfg.len() as u32);
    w.bytes(cfg.as_bytes());
    for p in model.params() {
        w.f32s(p.tensor.data());
    }
    w.finish()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<TemporalSegmenter<f32>> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.bytes(cfg_len)?)
        .map_err(|e| Error::Format(format!("config block: {e}")))?;
    let config = ModelConfig::from_canonical_text(text)?;
    let shapes = super::param_shapes(&config);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (_, shape) in shapes {
        let n = shape.iter().product();
        tensors.push(Tensor::new(shape, r.f32s(n)?)?);
    }
    r.expect_end()?;
    TemporalSegmenter::from_tensors(config, tensors)
}

pub fn save_checkpoint(model: &TemporalSegmenter<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TemporalSegmenter<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
