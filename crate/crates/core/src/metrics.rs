//! Per-second evaluation protocol.
//!
//! Accuracy pools every frame of every video. Precision, recall and F1 pool
//! only the frames of videos whose ground truth contains both classes; a
//! video that is all intro or all film says nothing about boundary quality
//! and is counted in `n_videos_excluded_from_pr` instead.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one `(label, prediction)` frame.
    pub fn record(&mut self, label: u8, pred: u8) {
        match (label, pred) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, 0) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when there are no positive frames.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall; 0 when both are 0, undefined when
/// either is.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Counts over all videos.
    pub all: ConfusionCounts,
    /// Counts over mixed-label videos only.
    pub pr: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub n_videos_total: usize,
    pub n_videos_excluded_from_pr: usize,
}

impl MetricsReport {
    pub fn from_counts(all: ConfusionCounts, pr: ConfusionCounts, n_videos_total: usize, excluded: usize) -> Self {
        let (precision, recall) = (pr.precision(), pr.recall());
        MetricsReport {
            all,
            pr,
            accuracy: all.accuracy(),
            precision,
            recall,
            f1: f1_score(precision, recall),
            n_videos_total,
            n_videos_excluded_from_pr: excluded,
        }
    }

    /// F1 with undefined mapped to 0, for model selection.
    pub fn f1_or_zero(&self) -> f64 {
        self.f1.unwrap_or(0.0)
    }
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {} | precision {} | recall {} | F1 {} | videos {} ({} excluded from P/R)",
            show(self.accuracy),
            show(self.precision),
            show(self.recall),
            show(self.f1),
            self.n_videos_total,
            self.n_videos_excluded_from_pr
        )
    }
}

/// Scores `(labels, predictions)` pairs, one per video.
pub fn score<L: AsRef<[u8]>, P: AsRef<[u8]>>(per_video: &[(L, P)]) -> Result<MetricsReport> {
    let (mut all, mut pr) = (ConfusionCounts::default(), ConfusionCounts::default());
    let mut excluded = 0;
    for (i, (labels, preds)) in per_video.iter().enumerate() {
        let (labels, preds) = (labels.as_ref(), preds.as_ref());
        if labels.len() != preds.len() {
            return Err(Error::Contract(format!(
                "video {i}: {} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        if let Some(v) = labels.iter().chain(preds).find(|v| **v > 1) {
            return Err(Error::Contract(format!("video {i}: value {v} is not 0 or 1")));
        }
        let mut video = ConfusionCounts::default();
        for (l, p) in labels.iter().zip(preds) {
            video.record(*l, *p);
        }
        all.merge(&video);
        let positives = video.tp + video.fn_;
        if positives > 0 && positives < video.total() {
            pr.merge(&video);
        } else {
            excluded += 1;
        }
    }
    Ok(MetricsReport::from_counts(all, pr, per_video.len(), excluded))
}
