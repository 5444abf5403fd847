//! Fixed-length windows over sequences, and balanced intro/film pairing.

use log::warn;

use super::EmbeddingSequence;
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_LEN: usize = 60;
pub const DEFAULT_STRIDE: usize = 30;

/// A `window_len`-frame slice of a source sequence.
///
/// When the source is shorter than the window, the final frame (and label)
/// is repeated to fill it; `valid_len` counts the real frames and downstream
/// consumers discard the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub source_id: String,
    pub offset: usize,
    pub dim: usize,
    pub frames: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub valid_len: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.len() - self.valid_len
    }

    /// Copies `[offset, offset + window_len)` from `seq`, padding past its end.
    pub fn slice(seq: &EmbeddingSequence, offset: usize, window_len: usize) -> Window {
        let valid_len = window_len.min(seq.len() - offset);
        let mut frames = Vec::with_capacity(window_len * seq.dim());
        frames.extend_from_slice(seq.frame_range(offset, offset + valid_len));
        let last = seq.frame(offset + valid_len - 1);
        for _ in valid_len..window_len {
            frames.extend_from_slice(last);
        }
        let labels = seq.labels().map(|l| {
            let mut out = l[offset..offset + valid_len].to_vec();
            out.resize(window_len, l[offset + valid_len - 1]);
            out
        });
        Window {
            source_id: seq.id.clone(),
            offset,
            dim: seq.dim(),
            frames,
            labels,
            valid_len,
        }
    }
}

/// Start offsets of the windows covering `len` frames: every multiple of
/// `stride` that fits, plus `len - window_len` so the tail is always covered.
/// A sequence shorter than the window gets a single offset 0.
pub fn window_offsets(len: usize, window_len: usize, stride: usize) -> Vec<usize> {
    assert!(window_len >= 1 && stride >= 1, "window_len and stride must be positive");
    if len <= window_len {
        return vec![0];
    }
    let last = len - window_len;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    offsets
}

pub fn make_windows(seq: &EmbeddingSequence, window_len: usize, stride: usize) -> Vec<Window> {
    window_offsets(seq.len(), window_len, stride)
        .into_iter()
        .map(|o| Window::slice(seq, o, window_len))
        .collect()
}

/// Half-open frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// An intro/credits run and an equal-length stretch of adjacent film.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub positive: Span,
    pub negative: Span,
    /// Length of the full positive run when it had to be shortened to match
    /// the available film.
    pub truncated_from: Option<usize>,
}

impl SegmentPair {
    /// The two spans in temporal order as one contiguous interval.
    pub fn covering_span(&self) -> Span {
        Span {
            start: self.positive.start.min(self.negative.start),
            end: self.positive.end.max(self.negative.end),
        }
    }
}

/// Maximal runs of `value` in `labels`.
pub fn runs_of(labels: &[u8], value: u8) -> Vec<Span> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, l) in labels.iter().enumerate() {
        match (start, *l == value) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                runs.push(Span { start: s, end: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(Span {
            start: s,
            end: labels.len(),
        });
    }
    runs
}

/// Pairs each maximal label-1 run with the film frames directly before it,
/// or directly after it when nothing precedes. Runs longer than the film
/// available on that side are shortened (keeping the part adjacent to the
/// film) and reported with a warning. A run with no adjacent film at all
/// yields a pairing error in its slot.
pub fn balance_pairs(seq: &EmbeddingSequence) -> Result<Vec<Result<SegmentPair>>> {
    let labels = seq
        .labels()
        .ok_or_else(|| Error::Contract(format!("balance_pairs: {} is unlabeled", seq.id)))?;
    let n = labels.len();
    let zero_run_ending_at = |end: usize| labels[..end].iter().rev().take_while(|v| **v == 0).count();
    let zero_run_starting_at = |start: usize| labels[start..].iter().take_while(|v| **v == 0).count();

    Ok(runs_of(labels, 1)
        .into_iter()
        .map(|run| {
            let want = run.len();
            let before = zero_run_ending_at(run.start);
            let pair = if before > 0 {
                let m = want.min(before);
                SegmentPair {
                    positive: Span {
                        start: run.start,
                        end: run.start + m,
                    },
                    negative: Span {
                        start: run.start - m,
                        end: run.start,
                    },
                    truncated_from: (m < want).then_some(want),
                }
            } else {
                let after = if run.end < n { zero_run_starting_at(run.end) } else { 0 };
                if after == 0 {
                    return Err(Error::Pairing(format!(
                        "{}: no film frames adjacent to run [{}, {})",
                        seq.id, run.start, run.end
                    )));
                }
                let m = want.min(after);
                SegmentPair {
                    positive: Span {
                        start: run.end - m,
                        end: run.end,
                    },
                    negative: Span {
                        start: run.end,
                        end: run.end + m,
                    },
                    truncated_from: (m < want).then_some(want),
                }
            };
            if let Some(full) = pair.truncated_from {
                warn!(
                    "{}: run [{}, {}) of {full} frames truncated to {} to match available film",
                    seq.id,
                    run.start,
                    run.end,
                    pair.positive.len()
                );
            }
            Ok(pair)
        })
        .collect())
}
