//! Synthetic labeled embedding datasets.
//!
//! Two global unit anchors, one for intro/credits and one for film, sit
//! exactly `class_separation` radians apart. Every series applies its own
//! random rotation (a product of small Givens rotations) to both anchors,
//! which keeps the angle between its two centroids exact while making each
//! series look different. All episodes of a series share its centroids, the
//! way a show reuses the same opening. A frame is its class centroid plus
//! isotropic Gaussian noise.
//!
//! Episode layout: an optional cold open of film, the intro, film, and an
//! optional closing credits run.

use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_sequence, EmbeddingSequence, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_series: usize,
    pub episodes_per_series: usize,
    /// Inclusive episode length bounds, seconds (= frames at 1 FPS).
    pub len_range_s: (usize, usize),
    pub intro_len_range_s: (usize, usize),
    pub credits_len_range_s: (usize, usize),
    /// Probability an episode ends with credits.
    pub credits_prob: f64,
    /// Probability an episode opens with film before the intro.
    pub cold_open_prob: f64,
    pub cold_open_range_s: (usize, usize),
    pub dim: usize,
    /// Angle between intro and film centroids, in `(0, pi]`.
    pub class_separation: f64,
    /// Expected Euclidean norm of the per-frame noise vector.
    pub noise: f64,
    /// Std-dev of each Givens angle in a series' rotation, radians.
    pub series_jitter: f64,
    pub fps: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_series: 8,
            episodes_per_series: 6,
            len_range_s: (120, 300),
            intro_len_range_s: (10, 40),
            credits_len_range_s: (15, 40),
            credits_prob: 0.7,
            cold_open_prob: 0.3,
            cold_open_range_s: (5, 30),
            dim: 512,
            class_separation: std::f64::consts::FRAC_PI_3,
            noise: 0.5,
            series_jitter: 0.15,
            fps: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sep = self.class_separation;
        if !(sep > 0.0 && sep <= std::f64::consts::PI) {
            return bad(format!("class_separation {sep} outside (0, pi]"));
        }
        if self.n_series == 0 || self.episodes_per_series == 0 || self.dim < 2 {
            return bad("n_series, episodes_per_series must be positive and dim >= 2".into());
        }
        for (name, (lo, hi)) in [
            ("len_range_s", self.len_range_s),
            ("intro_len_range_s", self.intro_len_range_s),
            ("credits_len_range_s", self.credits_len_range_s),
            ("cold_open_range_s", self.cold_open_range_s),
        ] {
            if lo > hi {
                return bad(format!("{name}: lower bound {lo} above upper bound {hi}"));
            }
        }
        if self.intro_len_range_s.0 == 0 {
            return bad("intro runs must be at least 1 frame".into());
        }
        let longest_fixed = self.cold_open_range_s.1 + self.intro_len_range_s.1 + self.credits_len_range_s.1;
        if self.len_range_s.0 <= longest_fixed {
            return bad(format!(
                "episodes of {} s cannot hold cold open + intro + credits of up to {longest_fixed} s plus film",
                self.len_range_s.0
            ));
        }
        for (name, p) in [("credits_prob", self.credits_prob), ("cold_open_prob", self.cold_open_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.series_jitter >= 0.0) {
            return bad("noise and series_jitter must be non-negative".into());
        }
        Ok(())
    }
}

/// Global class anchors and the per-series centroids derived from them.
#[derive(Debug, Clone)]
pub struct SeriesCentroids {
    pub series_id: String,
    pub intro: Vec<f64>,
    pub film: Vec<f64>,
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angle between two vectors, radians.
pub fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

fn anchors(rng: &mut Rng, dim: usize, separation: f64) -> (Vec<f64>, Vec<f64>) {
    let intro = random_unit(rng, dim);
    let mut w = random_unit(rng, dim);
    // Gram-Schmidt against the intro anchor.
    let proj = dot(&w, &intro);
    for (x, u) in w.iter_mut().zip(&intro) {
        *x -= proj * u;
    }
    let n = norm(&w);
    w.iter_mut().for_each(|x| *x /= n);
    let film = intro
        .iter()
        .zip(&w)
        .map(|(u, v)| separation.cos() * u + separation.sin() * v)
        .collect();
    (intro, film)
}

fn rotate_pair(rng: &mut Rng, a: &mut [f64], b: &mut [f64], jitter: f64) {
    if jitter == 0.0 {
        return;
    }
    let dim = a.len();
    let angle = Normal::new(0.0, jitter).expect("positive std");
    for _ in 0..2 * dim {
        let i = rng.random_range(0..dim);
        let mut j = rng.random_range(0..dim - 1);
        if j >= i {
            j += 1;
        }
        let theta: f64 = angle.sample(rng);
        let (s, c) = theta.sin_cos();
        for v in [&mut *a, &mut *b] {
            let (x, y) = (v[i], v[j]);
            v[i] = c * x - s * y;
            v[j] = s * x + c * y;
        }
    }
}

fn draw(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Generates the dataset in memory, plus the centroids used.
pub fn synth_generate_with_centroids(cfg: &SynthConfig) -> Result<(Vec<EmbeddingSequence>, Vec<SeriesCentroids>)> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let (intro_anchor, film_anchor) = anchors(&mut rng, cfg.dim, cfg.class_separation);
    let noise = Normal::new(0.0, cfg.noise / (cfg.dim as f64).sqrt()).expect("finite std");

    let mut sequences = Vec::with_capacity(cfg.n_series * cfg.episodes_per_series);
    let mut centroids = Vec::with_capacity(cfg.n_series);
    for s in 0..cfg.n_series {
        let series_id = format!("series{s:02}");
        let (mut intro_c, mut film_c) = (intro_anchor.clone(), film_anchor.clone());
        rotate_pair(&mut rng, &mut intro_c, &mut film_c, cfg.series_jitter);

        for e in 0..cfg.episodes_per_series {
            let len = draw(&mut rng, cfg.len_range_s);
            let cold_open = if rng.random_bool(cfg.cold_open_prob) {
                draw(&mut rng, cfg.cold_open_range_s)
            } else {
                0
            };
            let intro = draw(&mut rng, cfg.intro_len_range_s);
            let credits = if rng.random_bool(cfg.credits_prob) {
                draw(&mut rng, cfg.credits_len_range_s)
            } else {
                0
            };
            let labels: Vec<u8> = (0..len)
                .map(|t| {
                    let in_intro = t >= cold_open && t < cold_open + intro;
                    let in_credits = t >= len - credits;
                    (in_intro || in_credits) as u8
                })
                .collect();
            let mut frames = Vec::with_capacity(len * cfg.dim);
            for l in &labels {
                let c = if *l == 1 { &intro_c } else { &film_c };
                frames.extend(c.iter().map(|x| (x + noise.sample(&mut rng)) as f32));
            }
            sequences.push(EmbeddingSequence::new(
                format!("s{s:02}e{e:02}"),
                series_id.clone(),
                cfg.fps,
                cfg.dim,
                frames,
                Some(labels),
            )?);
        }
        centroids.push(SeriesCentroids {
            series_id,
            intro: intro_c,
            film: film_c,
        });
    }
    Ok((sequences, centroids))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<EmbeddingSequence>> {
    synth_generate_with_centroids(cfg).map(|(s, _)| s)
}

/// Writes each sequence as `<id>.icsq` under `dir` plus `manifest.tsv`.
pub fn write_dataset(dir: impl AsRef<Path>, sequences: &[EmbeddingSequence]) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let file = format!("{}.icsq", seq.id);
        write_sequence(seq, dir.join(&file))?;
        entries.push(ManifestEntry {
            id: seq.id.clone(),
            series_id: seq.series_id.clone(),
            path: file.into(),
            has_labels: seq.has_labels(),
            frames: seq.len(),
            split: String::new(),
        });
    }
    let manifest = Manifest::new(dir, entries)?;
    manifest.write(dir.join("manifest.tsv"))?;
    Ok(manifest)
}
