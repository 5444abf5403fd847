//! Minibatch training and sequence-level evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_window, AugmentConfig, FramePool};
use crate::autodiff::{Graph, PROB_CLAMP};
use crate::data::{make_windows, EmbeddingSequence, Window, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::infer::{predict_sequence, threshold_probs, InferOptions};
use crate::metrics::{score, MetricsReport};
use crate::model::{save_checkpoint, TemporalSegmenter};
use crate::optim::{adam_step, AdamConfig};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Stride of the training windows cut from each sequence.
    pub window_stride: usize,
    pub augment: AugmentConfig,
    /// Weight of the transition penalty; 0 disables it.
    pub tv_lambda: f64,
    /// Validation interval in steps; `None` evaluates at the end of every epoch.
    pub eval_every: Option<usize>,
    /// Where `best.tseg` and `last.tseg` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many evaluations without an F1 improvement.
    pub patience: Option<usize>,
    pub infer: InferOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 8,
            epochs: 20,
            max_steps: None,
            seed: 0,
            window_stride: DEFAULT_STRIDE,
            augment: AugmentConfig::default(),
            tv_lambda: 0.0,
            eval_every: None,
            checkpoint_dir: None,
            patience: None,
            infer: InferOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("batch_size and window_stride must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.tv_lambda >= 0.0 && self.tv_lambda.is_finite()) {
            return Err(Error::Config(format!("tv_lambda {} must be >= 0", self.tv_lambda)));
        }
        self.augment.validate()?;
        self.infer.validate()
    }
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    pub best_step: Option<usize>,
    pub best_f1: Option<f64>,
    pub steps: usize,
}

impl TrainHistory {
    /// One JSON object per record, newline separated.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

/// Training windows plus the sequences they were cut from, which the
/// augmentations re-slice and draw substitutes from.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub sequences: Vec<EmbeddingSequence>,
    pools: Vec<FramePool>,
    /// `(sequence index, window)`.
    pub windows: Vec<(usize, Window)>,
}

impl TrainSet {
    pub fn new(sequences: Vec<EmbeddingSequence>, window_len: usize, stride: usize) -> Result<Self> {
        let pools = sequences.iter().map(FramePool::new).collect::<Result<Vec<_>>>()?;
        let windows = sequences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| make_windows(s, window_len, stride).into_iter().map(move |w| (i, w)))
            .collect();
        Ok(TrainSet { sequences, pools, windows })
    }

    /// Uses exactly the given windows; `sequences` must hold their sources.
    pub fn from_windows(sequences: Vec<EmbeddingSequence>, windows: Vec<(usize, Window)>) -> Result<Self> {
        if let Some((i, _)) = windows.iter().find(|(i, _)| *i >= sequences.len()) {
            return Err(Error::Contract(format!("window refers to missing sequence {i}")));
        }
        let pools = sequences.iter().map(FramePool::new).collect::<Result<Vec<_>>>()?;
        Ok(TrainSet { sequences, pools, windows })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Forward, loss and backward on one batch; gradients are left on the
/// parameters. Returns the loss.
pub fn batch_gradients(
    model: &mut TemporalSegmenter<f32>,
    windows: &[&Window],
    tv_lambda: f64,
    dropout_rng: Option<&mut Rng>,
) -> Result<f64> {
    let cfg = *model.config();
    let (t, d) = (cfg.window_len, cfg.embed_dim);
    let mut frames = Vec::with_capacity(windows.len() * t * d);
    let mut labels = Vec::with_capacity(windows.len() * t);
    for w in windows {
        if w.dim != d || w.len() != t {
            return Err(Error::Config(format!(
                "window of {} frames x {} from {} does not fit a model of {t} x {d}",
                w.len(),
                w.dim,
                w.source_id
            )));
        }
        frames.extend_from_slice(&w.frames);
        let l = w
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("training window from {} is unlabeled", w.source_id)))?;
        labels.extend(l.iter().map(|v| *v as f32));
    }
    let batch = Tensor::new(vec![windows.len(), t, d], frames)?;
    let (grads, value) = {
        let mut g = Graph::new();
        let x = g.input(batch);
        let probs = model.build_forward(&mut g, model.params(), x, dropout_rng)?;
        let mut loss = g.bce(probs, &labels)?;
        if tv_lambda > 0.0 {
            let pen = g.transition_penalty(probs, tv_lambda as f32)?;
            loss = g.add(loss, pen)?;
        }
        let value = g.value(loss)[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        (g.backward(loss)?, value)
    };
    grads.accumulate_into(model.params_mut())?;
    Ok(value)
}

/// Mean clamped BCE of `probs` against `labels`, in f64.
fn bce_f64(probs: &[f32], labels: &[u8]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = (*p as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if *y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Scores per-sequence probabilities against sequence labels.
pub fn evaluate_probs(sequences: &[EmbeddingSequence], probs: &[Vec<f32>], threshold: f32) -> Result<MetricsReport> {
    if sequences.len() != probs.len() {
        return Err(Error::Contract(format!(
            "{} sequences but {} probability vectors",
            sequences.len(),
            probs.len()
        )));
    }
    let pairs = sequences
        .iter()
        .zip(probs)
        .map(|(s, p)| {
            let labels = s
                .labels()
                .ok_or_else(|| Error::Contract(format!("evaluate: {} is unlabeled", s.id)))?;
            Ok((labels, threshold_probs(p, threshold)))
        })
        .collect::<Result<Vec<_>>>()?;
    score(&pairs)
}

/// Runs sliding-window inference on every sequence and scores the
/// thresholded output. Returns the report and the mean per-frame BCE.
pub fn evaluate_with_loss(
    model: &TemporalSegmenter<f32>,
    sequences: &[EmbeddingSequence],
    opts: &InferOptions,
) -> Result<(MetricsReport, f64)> {
    if let Some(s) = sequences.iter().find(|s| !s.has_labels()) {
        return Err(Error::Contract(format!("evaluate: {} is unlabeled", s.id)));
    }
    let mut probs = Vec::with_capacity(sequences.len());
    let (mut loss_sum, mut frames) = (0.0, 0usize);
    for s in sequences {
        let p = predict_sequence(model, s, opts)?.probs;
        loss_sum += bce_f64(&p, s.labels().expect("checked")) * s.len() as f64;
        frames += s.len();
        probs.push(p);
    }
    let report = evaluate_probs(sequences, &probs, opts.threshold)?;
    Ok((report, loss_sum / frames.max(1) as f64))
}

pub fn evaluate(
    model: &TemporalSegmenter<f32>,
    sequences: &[EmbeddingSequence],
    opts: &InferOptions,
) -> Result<MetricsReport> {
    evaluate_with_loss(model, sequences, opts).map(|(r, _)| r)
}

/// Trains `model` in place.
///
/// Windows are reshuffled every epoch and augmented on the fly from a
/// generator seeded by `cfg.seed`. Validation never touches that generator,
/// so the evaluation schedule cannot change the parameter trajectory.
pub fn train(
    model: &mut TemporalSegmenter<f32>,
    set: &TrainSet,
    val: &[EmbeddingSequence],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let d = model.config().embed_dim;
    if let Some(s) = set.sequences.iter().chain(val).find(|s| s.dim() != d) {
        return Err(Error::Config(format!(
            "{} has embedding dimension {} but the model expects {d}",
            s.id,
            s.dim()
        )));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let use_dropout = model.config().dropout_rate > 0.0;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = TrainHistory::default();
    let (mut loss_acc, mut loss_n) = (0.0f64, 0usize);
    let mut since_best = 0usize;
    let steps_per_epoch = set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg
        .max_steps
        .unwrap_or(usize::MAX)
        .min(steps_per_epoch * cfg.epochs);
    info!(
        "training on {} windows, {steps_per_epoch} steps/epoch, {total_steps} steps, {} validation sequences",
        set.len(),
        val.len()
    );

    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total_steps {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for i in chunk {
                let (src, w) = &set.windows[*i];
                batch.push(augment_window(w, &set.sequences[*src], &set.pools[*src], &cfg.augment, &mut rng)?);
            }
            let refs: Vec<&Window> = batch.iter().collect();
            let dropout_rng = use_dropout.then_some(&mut rng);
            let loss = batch_gradients(model, &refs, cfg.tv_lambda, dropout_rng)?;
            adam_step(model.params_mut(), &adam)?;
            step += 1;
            loss_acc += loss;
            loss_n += 1;
            debug!("step {step} loss {loss:.5}");

            let end_of_epoch = batch_idx + 1 == steps_per_epoch;
            let due = match cfg.eval_every {
                Some(n) => step.is_multiple_of(n),
                None => end_of_epoch,
            } || step == total_steps;
            if due {
                let record = record_eval(model, val, cfg, step, epoch, loss_acc / loss_n as f64)?;
                (loss_acc, loss_n) = (0.0, 0);
                let f1 = record.val.as_ref().map(|r| r.f1_or_zero());
                info!(
                    "step {step} epoch {epoch} train_loss {:.5}{}",
                    record.train_loss,
                    record.val.as_ref().map(|r| format!(" | {r}")).unwrap_or_default()
                );
                history.records.push(record);
                if let Some(f1) = f1 {
                    if history.best_f1.is_none_or(|b| f1 > b) {
                        history.best_f1 = Some(f1);
                        history.best_step = Some(step);
                        since_best = 0;
                        if let Some(dir) = &cfg.checkpoint_dir {
                            save_checkpoint(model, dir.join("best.tseg"))?;
                        }
                    } else {
                        since_best += 1;
                        if cfg.patience.is_some_and(|p| since_best >= p) {
                            info!("no F1 improvement in {since_best} evaluations, stopping");
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }
    history.steps = step;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(model, dir.join("last.tseg"))?;
    }
    Ok(history)
}

fn record_eval(
    model: &TemporalSegmenter<f32>,
    val: &[EmbeddingSequence],
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
    train_loss: f64,
) -> Result<TrainRecord> {
    let (val_metrics, val_loss) = if val.is_empty() {
        (None, None)
    } else {
        let (r, l) = evaluate_with_loss(model, val, &cfg.infer)?;
        (Some(r), Some(l))
    };
    Ok(TrainRecord {
        step,
        epoch,
        train_loss,
        val_loss,
        val: val_metrics,
    })
}
