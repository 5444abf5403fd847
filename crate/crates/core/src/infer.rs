//! Sliding-window inference over sequences of any length.
//!
//! A sequence is cut into overlapping model-sized windows, each window is
//! scored, and every frame's probability is the combination (by default the
//! mean) of the windows covering it. Padded positions of a short final window
//! are dropped before combining.

use serde::{Deserialize, Serialize};

use crate::data::{make_windows, EmbeddingSequence, Window, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::model::TemporalSegmenter;
use crate::tensor::Tensor;

/// How overlapping window outputs are combined per frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    /// Fraction of covering windows voting 1 at threshold 0.5.
    Majority,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "majority" => Ok(Aggregation::Majority),
            _ => Err(Error::Config(format!("unknown aggregation {s:?} (mean, max, majority)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub stride: usize,
    /// Frames with probability strictly above this are labeled 1.
    pub threshold: f32,
    /// Segments shorter than this many seconds are absorbed by their
    /// neighbours. 0 disables smoothing.
    pub min_segment_s: f32,
    pub aggregation: Aggregation,
    /// Windows scored per forward pass.
    pub batch_size: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            stride: DEFAULT_STRIDE,
            threshold: 0.5,
            min_segment_s: 0.0,
            aggregation: Aggregation::Mean,
            batch_size: 16,
        }
    }
}

impl InferOptions {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.batch_size == 0 {
            return Err(Error::Config("stride and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.min_segment_s >= 0.0 && self.min_segment_s.is_finite()) {
            return Err(Error::Config(format!("min_segment_s {} must be >= 0", self.min_segment_s)));
        }
        Ok(())
    }
}

/// Half-open run `[start, end)` of frames sharing `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: u8,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub probs: Vec<f32>,
    pub labels: Vec<u8>,
    pub segments: Vec<Segment>,
}

/// Maximal constant runs of `labels`, in order. They tile the input exactly.
pub fn extract_segments(labels: &[u8]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == *l => s.end = i + 1,
            _ => out.push(Segment {
                start: i,
                end: i + 1,
                class: *l,
            }),
        }
    }
    out
}

/// Expands segments back to per-frame labels.
pub fn flatten_segments(segments: &[Segment]) -> Vec<u8> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class, s.len()))
        .collect()
}

/// `prob > threshold` is 1; ties go to 0.
pub fn threshold_probs(probs: &[f32], threshold: f32) -> Vec<u8> {
    probs.iter().map(|p| (*p > threshold) as u8).collect()
}

/// Relabels segments shorter than `min_len` frames to the class around them,
/// shortest first (earliest on ties), until none remain or one segment is
/// left.
pub fn smooth_labels(labels: &mut [u8], min_len: usize) {
    loop {
        let segs = extract_segments(labels);
        if segs.len() <= 1 {
            return;
        }
        let Some(short) = segs.iter().filter(|s| s.len() < min_len).min_by_key(|s| s.len()) else {
            return;
        };
        labels[short.start..short.end].fill(1 - short.class);
    }
}

/// Combines per-window probabilities into per-frame probabilities for a
/// sequence of `len` frames. Each entry is `(offset, probs)`; only the first
/// `probs.len()` frames from `offset` are covered by it.
pub fn aggregate_overlaps(windows: &[(usize, &[f32])], len: usize, mode: Aggregation) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; len];
    let mut count = vec![0u32; len];
    for (offset, probs) in windows {
        if offset + probs.len() > len {
            return Err(Error::Contract(format!(
                "window at {offset} of {} frames overruns a {len}-frame sequence",
                probs.len()
            )));
        }
        for (i, p) in probs.iter().enumerate() {
            let t = offset + i;
            let p = *p as f64;
            acc[t] = match mode {
                Aggregation::Mean => acc[t] + p,
                Aggregation::Max if count[t] == 0 => p,
                Aggregation::Max => acc[t].max(p),
                Aggregation::Majority => acc[t] + (p > 0.5) as u8 as f64,
            };
            count[t] += 1;
        }
    }
    if let Some(t) = count.iter().position(|c| *c == 0) {
        return Err(Error::Contract(format!("frame {t} is not covered by any window")));
    }
    Ok(acc
        .iter()
        .zip(&count)
        .map(|(a, c)| match mode {
            Aggregation::Max => *a as f32,
            _ => (*a / *c as f64) as f32,
        })
        .collect())
}

/// Model outputs for each window, valid frames only.
pub fn score_windows(model: &TemporalSegmenter<f32>, windows: &[Window], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let cfg = model.config();
    let (t, d) = (cfg.window_len, cfg.embed_dim);
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * t * d);
        for w in chunk {
            data.extend_from_slice(&w.frames);
        }
        let probs = model.predict(&Tensor::new(vec![chunk.len(), t, d], data)?)?;
        for (w, row) in chunk.iter().zip(probs.data().chunks(t)) {
            out.push(row[..w.valid_len].to_vec());
        }
    }
    Ok(out)
}

pub fn predict_sequence(
    model: &TemporalSegmenter<f32>,
    seq: &EmbeddingSequence,
    opts: &InferOptions,
) -> Result<SegmentPrediction> {
    opts.validate()?;
    let cfg = model.config();
    if seq.dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "{}: embedding dimension {} does not match the model's {}",
            seq.id,
            seq.dim(),
            cfg.embed_dim
        )));
    }
    let windows = make_windows(seq, cfg.window_len, opts.stride);
    let scored = score_windows(model, &windows, opts.batch_size)?;
    let pairs: Vec<(usize, &[f32])> = windows.iter().zip(&scored).map(|(w, p)| (w.offset, p.as_slice())).collect();
    let probs = aggregate_overlaps(&pairs, seq.len(), opts.aggregation)?;
    let mut labels = threshold_probs(&probs, opts.threshold);
    let min_len = (opts.min_segment_s * seq.fps).round() as usize;
    if min_len > 1 {
        smooth_labels(&mut labels, min_len);
    }
    let segments = extract_segments(&labels);
    Ok(SegmentPrediction { probs, labels, segments })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub fps: f32,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f32>>,
}

impl PredictionRecord {
    pub fn new(seq: &EmbeddingSequence, pred: &SegmentPrediction, with_probs: bool) -> Self {
        PredictionRecord {
            id: seq.id.clone(),
            fps: seq.fps,
            segments: pred.segments.clone(),
            probs: with_probs.then(|| pred.probs.clone()),
        }
    }
}
