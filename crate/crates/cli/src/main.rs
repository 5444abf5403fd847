//! `introseg`: synthesize data, train, evaluate, run inference, benchmark and
//! inspect artifacts.

mod config;
mod inspect;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use introseg::bench::benchmark;
use introseg::data::{split_by_series, synth_generate, write_dataset, EmbeddingSequence, Manifest};
use introseg::infer::{predict_sequence, PredictionRecord, SegmentPrediction};
use introseg::metrics::MetricsReport;
use introseg::model::{load_checkpoint, TemporalSegmenter};
use introseg::train::{evaluate_probs, train, TrainSet};
use log::info;
use rayon::prelude::*;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "introseg", version, about = "Intro and credits detection over frame-embedding sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sequence inference (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Args, Clone, Default)]
struct InferFlags {
    /// Window stride in frames.
    #[arg(long)]
    stride: Option<usize>,
    /// Probability above which a frame is intro/credits.
    #[arg(long)]
    threshold: Option<f32>,
    /// Absorb predicted segments shorter than this many seconds.
    #[arg(long = "min-segment")]
    min_segment: Option<f32>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also tag manifest entries train/val by series.
        #[arg(long)]
        split: bool,
    },
    /// Train a model on a manifest's sequences.
    Train {
        /// Manifest (`manifest.tsv`) of labeled sequences.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Transition-penalty weight.
        #[arg(long = "tv-lambda")]
        tv_lambda: Option<f64>,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Score a checkpoint on labeled sequences.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only entries with this split tag.
        #[arg(long)]
        split: Option<String>,
        /// Directory for `metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Predict segments for every sequence in a manifest.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Include per-second probabilities in each record.
        #[arg(long)]
        probs: bool,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Time inference over a fixed random sequence.
    Bench {
        /// Checkpoint to time; without it a model is initialized from `[model]`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Directory for `bench.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Describe a sequence, checkpoint, manifest or predictions file.
    Inspect { path: PathBuf },
}

impl InferFlags {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(s) = self.stride {
            run.infer.stride = s;
        }
        if let Some(t) = self.threshold {
            run.infer.threshold = t;
        }
        if let Some(m) = self.min_segment {
            run.infer.min_segment_s = m;
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 = bad configuration, 4 = corrupt or malformed file, 5 = I/O, 1 = other.
/// Usage errors exit with clap's 2.
fn exit_code(e: &anyhow::Error) -> u8 {
    use introseg::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Config(_)) => 3,
        Some(E::Format(_) | E::Checksum { .. }) => 4,
        Some(E::Io { .. }) => 5,
        _ if e.chain().any(|c| c.is::<toml::de::Error>()) => 3,
        _ if e.chain().any(|c| c.is::<std::io::Error>()) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let mut rc = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        rc.seed = common.seed;
    }
    rc.apply_seed();

    match cli.command {
        Command::Synth { out, split } => cmd_synth(rc, &out, split, common.json),
        Command::Train { data, out, epochs, lr, tv_lambda, infer } => {
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(l) = lr {
                rc.train.lr = l;
            }
            if let Some(t) = tv_lambda {
                rc.train.tv_lambda = t;
            }
            infer.apply(&mut rc);
            cmd_train(rc, &data, &out, common.json)
        }
        Command::Eval { model, data, split, out, infer } => {
            infer.apply(&mut rc);
            cmd_eval(rc, &model, &data, split.as_deref(), out.as_deref(), common.json)
        }
        Command::Infer { model, data, out, split, probs, infer } => {
            infer.apply(&mut rc);
            cmd_infer(rc, &model, &data, split.as_deref(), &out, probs, common.json)
        }
        Command::Bench { model, frames, reps, warmup, out, infer } => {
            if let Some(f) = frames {
                rc.bench.n_frames = f;
            }
            if let Some(r) = reps {
                rc.bench.reps = r;
            }
            if let Some(w) = warmup {
                rc.bench.warmup = w;
            }
            infer.apply(&mut rc);
            cmd_bench(rc, model.as_deref(), out.as_deref(), common.json)
        }
        Command::Inspect { path } => inspect::inspect(&path, common.json),
    }
}

/// Brings the per-module copies of the inference options in line with
/// `[infer]`, validates, and logs the effective configuration.
fn finalize(rc: &mut RunConfig) -> Result<()> {
    rc.train.infer = rc.infer.clone();
    rc.bench.infer = rc.infer.clone();
    rc.infer.validate()?;
    info!("effective configuration:\n{}", rc.to_toml());
    Ok(())
}

fn write_effective(rc: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join("effective_config.toml");
    std::fs::write(&path, rc.to_toml()).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn cmd_synth(mut rc: RunConfig, out: &Path, split: bool, json: bool) -> Result<()> {
    finalize(&mut rc)?;
    create_dir(out)?;
    let sequences = synth_generate(&rc.synth)?;
    let mut manifest = write_dataset(out, &sequences)?;
    if split {
        let (train_m, val_m) = split_by_series(&manifest, rc.val_fraction(), rc.seed())?;
        let mut entries = train_m.entries;
        entries.extend(val_m.entries);
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        manifest = Manifest::new(out, entries)?;
        manifest.write(out.join("manifest.tsv"))?;
    }
    write_effective(&rc, out)?;
    let summary = serde_json::json!({
        "sequences": manifest.len(),
        "frames": manifest.total_frames(),
        "manifest": out.join("manifest.tsv"),
    });
    if json {
        print_json(&summary)?;
    } else {
        println!(
            "wrote {} sequences ({} frames) to {}",
            manifest.len(),
            manifest.total_frames(),
            out.display()
        );
    }
    Ok(())
}

/// `(train, val)` sequences: from split tags when present, otherwise a fresh
/// series split.
fn load_train_val(rc: &RunConfig, data: &Path) -> Result<(Vec<EmbeddingSequence>, Vec<EmbeddingSequence>)> {
    let manifest = Manifest::read(data)?;
    let tagged = manifest.entries.iter().any(|e| !e.split.is_empty());
    let (train_m, val_m) = if tagged {
        (manifest.with_split("train"), manifest.with_split("val"))
    } else if rc.val_fraction() > 0.0 {
        split_by_series(&manifest, rc.val_fraction(), rc.seed())?
    } else {
        (manifest.clone(), Manifest::default())
    };
    if train_m.is_empty() {
        bail!("{} has no training entries", data.display());
    }
    info!("{} training and {} validation sequences", train_m.len(), val_m.len());
    Ok((train_m.load_sequences()?, val_m.load_sequences()?))
}

fn cmd_train(mut rc: RunConfig, data: &Path, out: &Path, json: bool) -> Result<()> {
    rc.train.checkpoint_dir = Some(out.to_path_buf());
    finalize(&mut rc)?;
    create_dir(out)?;
    write_effective(&rc, out)?;
    let (train_seqs, val_seqs) = load_train_val(&rc, data)?;
    let mut model = TemporalSegmenter::init(rc.model, rc.seed())?;
    let set = TrainSet::new(train_seqs, rc.model.window_len, rc.train.window_stride)?;
    let history = train(&mut model, &set, &val_seqs, &rc.train)?;
    history.write_jsonl(out.join("history.jsonl"))?;
    let last = history.records.last();
    if json {
        print_json(&serde_json::json!({
            "steps": history.steps,
            "best_step": history.best_step,
            "best_f1": history.best_f1,
            "last": last,
        }))?;
    } else {
        println!(
            "trained {} steps; final train loss {:.5}; best F1 {}; checkpoints in {}",
            history.steps,
            history.final_loss().unwrap_or(f64::NAN),
            history.best_f1.map_or("n/a".into(), |f| format!("{f:.4} at step {}", history.best_step.unwrap_or(0))),
            out.display()
        );
        if let Some(r) = last.and_then(|r| r.val.as_ref()) {
            println!("final validation: {r}");
        }
    }
    Ok(())
}

fn load_split(data: &Path, split: Option<&str>) -> Result<Vec<EmbeddingSequence>> {
    let mut manifest = Manifest::read(data)?;
    if let Some(tag) = split {
        manifest = manifest.with_split(tag);
        if manifest.is_empty() {
            bail!("no entries tagged {tag:?} in {}", data.display());
        }
    }
    Ok(manifest.load_sequences()?)
}

fn predict_all(model: &TemporalSegmenter, seqs: &[EmbeddingSequence], rc: &RunConfig) -> Result<Vec<SegmentPrediction>> {
    seqs.par_iter()
        .map(|s| predict_sequence(model, s, &rc.infer).with_context(|| format!("inference on {}", s.id)))
        .collect()
}

fn cmd_eval(
    mut rc: RunConfig,
    model_path: &Path,
    data: &Path,
    split: Option<&str>,
    out: Option<&Path>,
    json: bool,
) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    rc.model = *model.config();
    finalize(&mut rc)?;
    let seqs = load_split(data, split)?;
    let preds = predict_all(&model, &seqs, &rc)?;
    let probs: Vec<Vec<f32>> = preds.into_iter().map(|p| p.probs).collect();
    let report: MetricsReport = evaluate_probs(&seqs, &probs, rc.infer.threshold)?;
    if let Some(out) = out {
        create_dir(out)?;
        write_effective(&rc, out)?;
        let path = out.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if json {
        print_json(&report)?;
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_infer(
    mut rc: RunConfig,
    model_path: &Path,
    data: &Path,
    split: Option<&str>,
    out: &Path,
    with_probs: bool,
    json: bool,
) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    rc.model = *model.config();
    finalize(&mut rc)?;
    let seqs = load_split(data, split)?;
    let preds = predict_all(&model, &seqs, &rc)?;
    create_dir(out)?;
    write_effective(&rc, out)?;
    let path = out.join("predictions.jsonl");
    let mut text = String::new();
    for (s, p) in seqs.iter().zip(&preds) {
        text += &serde_json::to_string(&PredictionRecord::new(s, p, with_probs))?;
        text.push('\n');
    }
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    let positive: usize = preds.iter().map(|p| p.segments.iter().filter(|s| s.class == 1).count()).sum();
    if json {
        print_json(&serde_json::json!({ "sequences": seqs.len(), "positive_segments": positive, "predictions": path }))?;
    } else {
        println!(
            "{} sequences, {positive} intro/credits segments; predictions in {}",
            seqs.len(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_bench(mut rc: RunConfig, model_path: Option<&Path>, out: Option<&Path>, json: bool) -> Result<()> {
    let model = match model_path {
        Some(p) => load_checkpoint(p)?,
        None => TemporalSegmenter::init(rc.model, rc.seed())?,
    };
    rc.model = *model.config();
    finalize(&mut rc)?;
    let report = benchmark(&model, &rc.bench)?;
    if let Some(out) = out {
        create_dir(out)?;
        write_effective(&rc, out)?;
        let path = out.join("bench.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if json {
        print_json(&report)?;
    } else {
        println!("{report}");
    }
    Ok(())
}
