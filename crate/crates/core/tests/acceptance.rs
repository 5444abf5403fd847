//! Acceptance checks, one `PASS`/`FAIL` line per criterion. Runs as a plain
//! binary (no libtest harness) so the lines always reach the output; exits
//! nonzero if any criterion fails. Pass a substring to run matching checks.

use std::time::Instant;

use introseg::augment::{frame_substitution, temporal_shift, AugmentConfig, FramePool};
use introseg::bench::{benchmark, BenchConfig};
use introseg::data::{
    split_by_series, synth_generate, write_dataset, EmbeddingSequence, SynthConfig, Window,
};
use introseg::gradcheck::grad_check;
use introseg::infer::{predict_sequence, InferOptions};
use introseg::metrics::score;
use introseg::model::{read_checkpoint, write_checkpoint, ModelConfig, TemporalSegmenter};
use introseg::tensor::Tensor;
use introseg::train::{evaluate, train, TrainConfig, TrainSet};
use introseg::{Error, Rng};
use rand::{Rng as _, SeedableRng};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl std::fmt::Display) -> Verdict {
    Verdict { pass, detail: detail.to_string() }
}

type Check = (&'static str, fn() -> Verdict);

const CHECKS: &[Check] = &[
    ("gradient correctness", gradient_correctness),
    ("overfit sanity", overfit_sanity),
    ("end-to-end synthetic", end_to_end_synthetic),
    ("metric oracle equivalence", metric_oracle_equivalence),
    ("window consistency", window_consistency),
    ("format round-trips", format_round_trips),
    ("augmentation contracts", augmentation_contracts),
    ("determinism", determinism),
    ("bench harness", bench_harness),
];

fn main() -> std::process::ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in CHECKS {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::ExitCode::FAILURE
    } else {
        std::process::ExitCode::SUCCESS
    }
}

fn random_sequence(rng: &mut Rng, t: usize, d: usize, labeled: bool) -> EmbeddingSequence {
    let frames = (0..t * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let labels = labeled.then(|| (0..t).map(|_| rng.random_range(0..2u8)).collect());
    let id: String = (0..rng.random_range(1..12)).map(|_| rng.random_range('a'..='z')).collect();
    EmbeddingSequence::new(id, "series", 1.0, d, frames, labels).unwrap()
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig {
        window_len: 8,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 2,
        ff_dim: 32,
        dropout_rate: 0.0,
    };
    let model = TemporalSegmenter::<f32>::init(cfg, 11).unwrap().cast::<f64>();
    let mut rng = Rng::seed_from_u64(11);
    let x = Tensor::new(
        vec![2, 8, 16],
        (0..2 * 8 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels: Vec<f64> = (0..16).map(|i| ((i / 3) % 2) as f64).collect();
    let report = grad_check(
        model.params(),
        |g, p| {
            let xi = g.input(x.clone());
            let probs = model.build_forward(g, p, xi, None)?;
            let bce = g.bce(probs, &labels)?;
            let pen = g.transition_penalty(probs, 0.5)?;
            g.add(bce, pen)
        },
        1e-3,
        1e-5,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        report.passed() && secs < 60.0,
        format!("max relative error {:.3e} (< 1e-5) in {secs:.1} s", report.max_rel_err()),
    )
}

fn overfit_sanity() -> Verdict {
    let start = Instant::now();
    let data = synth_generate(&SynthConfig {
        n_series: 2,
        episodes_per_series: 1,
        dim: 16,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let windows: Vec<(usize, Window)> = vec![
        (0, Window::slice(&data[0], 0, 60)),
        (0, Window::slice(&data[0], data[0].len() - 60, 60)),
        (1, Window::slice(&data[1], 0, 60)),
        (1, Window::slice(&data[1], data[1].len() - 60, 60)),
    ];
    let set = TrainSet::from_windows(data, windows).unwrap();
    let mut model = TemporalSegmenter::init(ModelConfig::sized(60, 16, 2, 2), 5).unwrap();
    let cfg = TrainConfig {
        lr: 5e-5 * 10.0,
        batch_size: 4,
        epochs: 2000,
        max_steps: Some(2000),
        eval_every: Some(50),
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let history = train(&mut model, &set, &[], &cfg).unwrap();
    let loss = history.final_loss().unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        loss < 0.05 && history.steps <= 2000 && secs < 300.0,
        format!("training loss {loss:.4} (< 0.05) after {} steps in {secs:.1} s", history.steps),
    )
}

fn end_to_end_synthetic() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sequences = synth_generate(&SynthConfig {
        dim: 64,
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    let manifest = write_dataset(dir.path(), &sequences).unwrap();
    let (train_m, val_m) = split_by_series(&manifest, 0.25, 42).unwrap();
    let train_seqs = train_m.load_sequences().unwrap();
    let val_seqs = val_m.load_sequences().unwrap();

    let mut model = TemporalSegmenter::init(ModelConfig::sized(60, 64, 4, 4), 42).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        seed: 42,
        ..TrainConfig::default()
    };
    let set = TrainSet::new(train_seqs, 60, cfg.window_stride).unwrap();
    let history = train(&mut model, &set, &[], &cfg).unwrap();
    let report = evaluate(&model, &val_seqs, &InferOptions::default()).unwrap();
    let f1 = report.f1.unwrap_or(0.0);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        f1 >= 0.95 && secs < 1800.0,
        format!(
            "held-out F1 {f1:.4} (>= 0.95) on {} videos, {} steps, {secs:.0} s; {report}",
            val_seqs.len(),
            history.steps
        ),
    )
}

/// Counts computed the long way: filter, then count.
fn oracle(videos: &[(Vec<u8>, Vec<u8>)]) -> ([usize; 4], [usize; 4], usize) {
    let count = |vs: &[&(Vec<u8>, Vec<u8>)], l: u8, p: u8| -> usize {
        vs.iter()
            .map(|(ls, ps)| ls.iter().zip(ps).filter(|(a, b)| **a == l && **b == p).count())
            .sum()
    };
    let all: Vec<_> = videos.iter().collect();
    let mixed: Vec<_> = videos
        .iter()
        .filter(|(l, _)| l.contains(&0) && l.contains(&1))
        .collect();
    let q = |vs: &[&(Vec<u8>, Vec<u8>)]| [count(vs, 1, 1), count(vs, 0, 1), count(vs, 1, 0), count(vs, 0, 0)];
    (q(&all), q(&mixed), videos.len() - mixed.len())
}

fn metric_oracle_equivalence() -> Verdict {
    let mut rng = Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let videos: Vec<(Vec<u8>, Vec<u8>)> = (0..rng.random_range(1..8))
            .map(|_| {
                let t = rng.random_range(1..40);
                let p_one = rng.random_range(0.0..1.0);
                let l = (0..t).map(|_| rng.random_bool(p_one) as u8).collect();
                let p = (0..t).map(|_| rng.random_bool(0.5) as u8).collect();
                (l, p)
            })
            .collect();
        let r = score(&videos).unwrap();
        let (all, pr, excluded) = oracle(&videos);
        let counts_ok = [r.all.tp, r.all.fp, r.all.fn_, r.all.tn].map(|c| c as usize) == all
            && [r.pr.tp, r.pr.fp, r.pr.fn_, r.pr.tn].map(|c| c as usize) == pr
            && r.n_videos_excluded_from_pr == excluded;
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        let div = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        let acc = div(all[0] + all[3], all.iter().sum());
        let p = div(pr[0], pr[0] + pr[1]);
        let rc = div(pr[0], pr[0] + pr[2]);
        let f1 = match (p, rc) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let ratios_ok = close(r.accuracy, acc) && close(r.precision, p) && close(r.recall, rc) && close(r.f1, f1);
        if !(counts_ok && ratios_ok) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} mismatches in 1000 random video sets"),
    )
}

fn window_consistency() -> Verdict {
    let model = TemporalSegmenter::init(ModelConfig::sized(60, 32, 4, 2), 9).unwrap();
    let mut rng = Rng::seed_from_u64(9);

    let seq = random_sequence(&mut rng, 60, 32, false);
    let pred = predict_sequence(&model, &seq, &InferOptions::default()).unwrap();
    let single = model
        .predict(&Tensor::new(vec![1, 60, 32], seq.frames().to_vec()).unwrap())
        .unwrap();
    let exact = pred.probs.as_slice() == single.data();

    let seq = random_sequence(&mut rng, 150, 32, false);
    let pred = predict_sequence(&model, &seq, &InferOptions::default()).unwrap();
    let (mut sum, mut n) = (vec![0.0f64; 150], vec![0usize; 150]);
    for offset in [0, 30, 60, 90] {
        let w = Tensor::new(vec![1, 60, 32], seq.frame_range(offset, offset + 60).to_vec()).unwrap();
        for (i, p) in model.predict(&w).unwrap().data().iter().enumerate() {
            sum[offset + i] += *p as f64;
            n[offset + i] += 1;
        }
    }
    let max_dev = (0..150)
        .map(|t| (pred.probs[t] as f64 - sum[t] / n[t] as f64).abs())
        .fold(0.0, f64::max);
    verdict(
        exact && max_dev <= 1e-6,
        format!("T=60 bit-exact {exact}; T=150 max deviation from window means {max_dev:.2e} (<= 1e-6)"),
    )
}

fn format_round_trips() -> Verdict {
    let mut rng = Rng::seed_from_u64(77);
    let mut round_trip_failures = 0;
    let mut rejected = 0;
    for i in 0..100 {
        let t = rng.random_range(1..200);
        let d = rng.random_range(1..48);
        let seq = random_sequence(&mut rng, t, d, i % 2 == 0);
        let bytes = seq.to_bytes();
        let back = EmbeddingSequence::from_bytes(&bytes).unwrap();
        if back.to_bytes() != bytes || back != seq {
            round_trip_failures += 1;
        }

        let heads = [1, 2, 4][rng.random_range(0..3)];
        let cfg = ModelConfig::sized(rng.random_range(1..12), heads * rng.random_range(1..5), heads, rng.random_range(1..3));
        let model = TemporalSegmenter::init(cfg, rng.random()).unwrap();
        let ck = write_checkpoint(&model);
        let loaded = read_checkpoint(&ck).unwrap();
        let same_params = model
            .params()
            .iter()
            .zip(loaded.params())
            .all(|(a, b)| a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits())));
        if write_checkpoint(&loaded) != ck || !same_params || loaded.config() != model.config() {
            round_trip_failures += 1;
        }

        let (mut artifact, is_seq) = if i % 2 == 0 { (bytes, true) } else { (ck, false) };
        let pos = rng.random_range(0..artifact.len());
        artifact[pos] ^= 1 << rng.random_range(0..8);
        let err = if is_seq {
            EmbeddingSequence::from_bytes(&artifact).err()
        } else {
            read_checkpoint(&artifact).err()
        };
        if matches!(err, Some(Error::Checksum { .. })) {
            rejected += 1;
        }
    }
    verdict(
        round_trip_failures == 0 && rejected == 100,
        format!("{round_trip_failures} round-trip failures in 200 artifacts; {rejected}/100 corruptions rejected by checksum"),
    )
}

fn augmentation_contracts() -> Verdict {
    let mut rng = Rng::seed_from_u64(31);
    let mut violations = Vec::new();
    for draw in 0..1000 {
        let t = rng.random_range(60..160);
        let d = rng.random_range(1..6);
        let src = random_sequence(&mut rng, t, d, true);
        let pool = FramePool::new(&src).unwrap();
        let w = Window::slice(&src, rng.random_range(0..=t - 60), 60);

        if temporal_shift(&w, &src, 0, &mut rng) != w {
            violations.push(format!("draw {draw}: zero shift changed the window"));
        }
        let shifted = temporal_shift(&w, &src, rng.random_range(0..12), &mut rng);
        if shifted.frames.as_slice() != src.frame_range(shifted.offset, shifted.offset + 60)
            || shifted.labels.as_deref() != Some(&src.labels().unwrap()[shifted.offset..shifted.offset + 60])
        {
            violations.push(format!("draw {draw}: shift is not a source slice"));
        }

        let none = AugmentConfig { substitution_rate_range: (0.0, 0.0), ..AugmentConfig::default() };
        if frame_substitution(&w, &src, &pool, &none, &mut rng).unwrap() != w {
            violations.push(format!("draw {draw}: zero-rate substitution changed the window"));
        }
        let lo = rng.random_range(0.0..1.0);
        let cfg = AugmentConfig {
            substitution_rate_range: (lo, rng.random_range(lo..=1.0)),
            ..AugmentConfig::default()
        };
        let sub = frame_substitution(&w, &src, &pool, &cfg, &mut rng).unwrap();
        if sub.labels != w.labels || sub.len() != 60 {
            violations.push(format!("draw {draw}: substitution changed labels or length"));
        }
    }
    verdict(
        violations.is_empty(),
        format!(
            "{} violations in 1000 draws{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    )
}

fn determinism() -> Verdict {
    let synth = SynthConfig { n_series: 3, episodes_per_series: 2, dim: 16, seed: 8, ..SynthConfig::default() };
    let data_a = synth_generate(&synth).unwrap();
    let same_data = data_a == synth_generate(&synth).unwrap();

    let run = || {
        let set = TrainSet::new(data_a[..4].to_vec(), 60, 30).unwrap();
        let mut model = TemporalSegmenter::init(ModelConfig::sized(60, 16, 2, 1), 8).unwrap();
        let cfg = TrainConfig { lr: 1e-3, epochs: 2, seed: 8, ..TrainConfig::default() };
        let history = train(&mut model, &set, &data_a[4..], &cfg).unwrap();
        let preds: Vec<_> = data_a
            .iter()
            .map(|s| predict_sequence(&model, s, &InferOptions::default()).unwrap())
            .collect();
        (history, preds)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    let same_history = h1 == h2;
    let same_preds = p1 == p2;
    verdict(
        same_data && same_history && same_preds,
        format!("dataset {same_data}, training history {same_history}, predictions {same_preds}"),
    )
}

fn bench_harness() -> Verdict {
    let model = TemporalSegmenter::init(ModelConfig::sized(60, 32, 4, 2), 1).unwrap();
    let cfg = BenchConfig { reps: 5, warmup: 1, ..BenchConfig::default() };
    let r = benchmark(&model, &cfg).unwrap();
    let identity = r.fps == r.n_frames as f64 / r.median_s;
    let ok = identity && r.timed_reps == 5 && r.rep_seconds.len() == 5 && r.n_frames == 300 && r.stddev_s >= 0.0 && r.fps > 0.0;
    verdict(ok, format!("{r}; fps identity holds: {identity}"))
}
