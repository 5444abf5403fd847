//! Embedding-level training augmentations.
//!
//! [`temporal_shift`] moves a window a few seconds along its source and takes
//! labels from the source at the new position. [`frame_substitution`]
//! replaces a fraction of frames with other frames of the same label from the
//! same source, so labels never change.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSequence, Window};
use crate::error::{Error, Result};
use crate::Rng;

/// How a replacement frame is drawn from the same-class pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionMode {
    #[default]
    Uniform,
    /// Weight pool frames by `exp(cos(original, candidate) / temperature)`.
    CosineWeighted { temperature: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub shift_enabled: bool,
    pub max_shift_s: usize,
    pub substitution_enabled: bool,
    pub substitution_rate_range: (f64, f64),
    pub substitution_mode: SubstitutionMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_enabled: true,
            max_shift_s: 5,
            substitution_enabled: true,
            substitution_rate_range: (0.10, 0.30),
            substitution_mode: SubstitutionMode::Uniform,
        }
    }
}

impl AugmentConfig {
    /// Both augmentations off.
    pub fn disabled() -> Self {
        AugmentConfig {
            shift_enabled: false,
            substitution_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.substitution_rate_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("substitution_rate_range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
        }
        if let SubstitutionMode::CosineWeighted { temperature } = self.substitution_mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("cosine temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }
}

/// Frame indices of a source sequence grouped by label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FramePool {
    pub by_class: [Vec<usize>; 2],
}

impl FramePool {
    pub fn new(source: &EmbeddingSequence) -> Result<Self> {
        let labels = source
            .labels()
            .ok_or_else(|| Error::Contract(format!("frame pool: {} is unlabeled", source.id)))?;
        let mut pool = FramePool::default();
        for (t, l) in labels.iter().enumerate() {
            pool.by_class[*l as usize].push(t);
        }
        Ok(pool)
    }
}

/// Re-slices `window` from `source` at `offset + delta`, with `delta` uniform
/// in `[-max_shift_s, max_shift_s]` and the offset clamped into range.
pub fn temporal_shift(window: &Window, source: &EmbeddingSequence, max_shift_s: usize, rng: &mut Rng) -> Window {
    if max_shift_s == 0 {
        return window.clone();
    }
    let max = max_shift_s as i64;
    let delta = rng.random_range(-max..=max);
    let last = source.len().saturating_sub(window.len()) as i64;
    let offset = (window.offset as i64 + delta).clamp(0, last) as usize;
    Window::slice(source, offset, window.len())
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut ab, mut aa, mut bb) = (0.0f32, 0.0f32, 0.0f32);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let den = (aa * bb).sqrt();
    if den > 0.0 {
        ab / den
    } else {
        0.0
    }
}

/// Replaces `floor(rate * len)` distinct positions, `rate` uniform in the
/// configured range, with same-label frames from `source`. Positions whose
/// class has no pool frames are left alone with a warning.
pub fn frame_substitution(
    window: &Window,
    source: &EmbeddingSequence,
    pool: &FramePool,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Window> {
    let labels = window
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("frame substitution on unlabeled window of {}", window.source_id)))?;
    let (lo, hi) = cfg.substitution_rate_range;
    let rate = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let n = window.len();
    let k = ((rate * n as f64).floor() as usize).min(n);
    let mut out = window.clone();
    if k == 0 {
        return Ok(out);
    }
    let d = window.dim;
    let mut skipped = 0;
    for pos in sample(rng, n, k).into_vec() {
        let candidates = &pool.by_class[labels[pos] as usize];
        if candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let pick = match cfg.substitution_mode {
            SubstitutionMode::Uniform => candidates[rng.random_range(0..candidates.len())],
            SubstitutionMode::CosineWeighted { temperature } => {
                let original = &window.frames[pos * d..(pos + 1) * d];
                let weights: Vec<f32> = candidates
                    .iter()
                    .map(|c| (cosine(original, source.frame(*c)) / temperature).exp())
                    .collect();
                let dist = WeightedIndex::new(&weights)
                    .map_err(|e| Error::Numeric(format!("cosine substitution weights: {e}")))?;
                candidates[dist.sample(rng)]
            }
        };
        out.frames[pos * d..(pos + 1) * d].copy_from_slice(source.frame(pick));
    }
    if skipped > 0 {
        warn!(
            "{}: {skipped} substitution positions skipped, no same-class frames in pool",
            window.source_id
        );
    }
    Ok(out)
}

/// Applies the enabled augmentations in order: shift, then substitution.
pub fn augment_window(
    window: &Window,
    source: &EmbeddingSequence,
    pool: &FramePool,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Window> {
    let w = if cfg.shift_enabled {
        temporal_shift(window, source, cfg.max_shift_s, rng)
    } else {
        window.clone()
    };
    if cfg.substitution_enabled {
        frame_substitution(&w, source, pool, cfg, rng)
    } else {
        Ok(w)
    }
}
