use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of a [`TemporalSegmenter`](super::TemporalSegmenter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per window; one classifier per position.
    pub window_len: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 60,
            embed_dim: 512,
            num_heads: 16,
            num_layers: 16,
            ff_dim: 4 * 512,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    /// Config with the given width and depth and `ff_dim = 4 * embed_dim`.
    pub fn sized(window_len: usize, embed_dim: usize, num_heads: usize, num_layers: usize) -> Self {
        ModelConfig {
            window_len,
            embed_dim,
            num_heads,
            num_layers,
            ff_dim: 4 * embed_dim,
            dropout_rate: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window_len == 0 {
            return bad("window_len must be at least 1".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return bad("embed_dim and num_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.ff_dim == 0 {
            return bad("num_layers and ff_dim must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Number of scalar parameters, in closed form.
    pub fn parameter_count(&self) -> usize {
        let (t, d, f) = (self.window_len, self.embed_dim, self.ff_dim);
        let block = 2 * d // pre-attention norm
            + 4 * (d * d + d) // q, k, v, output projections
            + 2 * d // pre-feed-forward norm
            + (d * f + f)
            + (f * d + d);
        t * d + self.num_layers * block + 2 * d + t * (d + 1)
    }

    /// Canonical `key=value` lines, one per field, fixed order.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "window_len={}", self.window_len);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "num_heads={}", self.num_heads);
        let _ = writeln!(s, "num_layers={}", self.num_layers);
        let _ = writeln!(s, "ff_dim={}", self.ff_dim);
        let _ = writeln!(s, "dropout_rate={}", self.dropout_rate);
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = 0u8;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("{key}: {e}")))
            };
            let bit = match key {
                "window_len" => {
                    cfg.window_len = int()?;
                    0
                }
                "embed_dim" => {
                    cfg.embed_dim = int()?;
                    1
                }
                "num_heads" => {
                    cfg.num_heads = int()?;
                    2
                }
                "num_layers" => {
                    cfg.num_layers = int()?;
                    3
                }
                "ff_dim" => {
                    cfg.ff_dim = int()?;
                    4
                }
                "dropout_rate" => {
                    cfg.dropout_rate = value
                        .parse()
                        .map_err(|e| Error::Format(format!("{key}: {e}")))?;
                    5
                }
                other => return Err(Error::Format(format!("unknown config key {other:?}"))),
            };
            seen |= 1 << bit;
        }
        if seen != 0b11_1111 {
            return Err(Error::Format("config block is missing keys".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
