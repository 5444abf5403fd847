//! Embedding sequences and the `ICSQ` file format.
//!
//! ```text
//! "ICSQ"            magic
//! u32 version       currently 1
//! u32 + bytes       id, UTF-8
//! u32 + bytes       series_id, UTF-8
//! f32 fps
//! u32 T             frame count
//! u32 D             embedding dimension
//! u8 has_labels     0 or 1
//! f32 * T * D       frames, row-major, little-endian
//! u8 * T            labels (only when has_labels == 1)
//! u32 crc32         of all preceding bytes
//! ```

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"ICSQ";
pub const SEQUENCE_VERSION: u32 = 1;

/// A video as `T` frame embeddings of dimension `D`, optionally labeled per
/// frame (1 = intro/credits, 0 = main content).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub id: String,
    pub series_id: String,
    pub fps: f32,
    num_frames: usize,
    dim: usize,
    frames: Vec<f32>,
    labels: Option<Vec<u8>>,
}

impl EmbeddingSequence {
    pub fn new(
        id: impl Into<String>,
        series_id: impl Into<String>,
        fps: f32,
        dim: usize,
        frames: Vec<f32>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be positive".into()));
        }
        if frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not form whole frames of dimension {dim}",
                frames.len()
            )));
        }
        let num_frames = frames.len() / dim;
        if let Some(l) = &labels {
            if l.len() != num_frames {
                return Err(Error::Dimension(format!(
                    "{} labels for {num_frames} frames",
                    l.len()
                )));
            }
            if let Some(bad) = l.iter().find(|v| **v > 1) {
                return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
            }
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Contract(format!("fps must be positive, got {fps}")));
        }
        Ok(EmbeddingSequence {
            id: id.into(),
            series_id: series_id.into(),
            fps,
            num_frames,
            dim,
            frames,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.num_frames
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    /// Frames `[start, end)` as one flat slice.
    pub fn frame_range(&self, start: usize, end: usize) -> &[f32] {
        &self.frames[start * self.dim..end * self.dim]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Count of label-1 frames, if labeled.
    pub fn positive_frames(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|v| **v == 1).count())
    }

    /// Encodes into `ICSQ` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(SEQUENCE_MAGIC);
        w.u32(SEQUENCE_VERSION);
        w.string(&self.id);
        w.string(&self.series_id);
        w.f32(self.fps);
        w.u32(self.num_frames as u32);
        w.u32(self.dim as u32);
        w.u8(self.labels.is_some() as u8);
        w.f32s(&self.frames);
        if let Some(l) = &self.labels {
            w.bytes(l);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, SEQUENCE_MAGIC, "sequence")?;
        let version = r.u32()?;
        if version != SEQUENCE_VERSION {
            return Err(Error::Format(format!(
                "unsupported sequence version {version}"
            )));
        }
        let id = r.string()?;
        let series_id = r.string()?;
        let fps = r.f32()?;
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let has_labels = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("has_labels byte {v}"))),
        };
        let n = t
            .checked_mul(d)
            .ok_or_else(|| Error::Format("frame count overflow".into()))?;
        let frames = r.f32s(n)?;
        let labels = if has_labels {
            Some(r.bytes(t)?.to_vec())
        } else {
            None
        };
        r.expect_end()?;
        EmbeddingSequence::new(id, series_id, fps, d, frames, labels)
            .map_err(|e| Error::Format(format!("invalid sequence contents: {e}")))
    }
}

/// Size in bytes of an encoded sequence.
pub fn encoded_len(id: &str, series_id: &str, t: usize, d: usize, has_labels: bool) -> usize {
    4 + 4 // magic, version
        + 4 + id.len()
        + 4 + series_id.len()
        + 4 + 4 + 4 // fps, T, D
        + 1
        + 4 * t * d
        + if has_labels { t } else { 0 }
        + 4 // crc
}

pub fn write_sequence(seq: &EmbeddingSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSequence::from_bytes(&bytes)
}
