use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use introseg::data::{runs_of, EmbeddingSequence, Manifest, SEQUENCE_MAGIC};
use introseg::infer::PredictionRecord;
use introseg::model::{read_checkpoint, CHECKPOINT_MAGIC};
use serde_json::json;

/// Prints a description of the artifact at `path`, chosen by its magic bytes
/// or, for text files, its extension.
pub fn inspect(path: &Path, as_json: bool) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value = if bytes.starts_with(SEQUENCE_MAGIC) {
        let s = EmbeddingSequence::from_bytes(&bytes).with_context(|| format!("{} is not a valid sequence", path.display()))?;
        sequence(&s)
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let m = read_checkpoint(&bytes).with_context(|| format!("{} is not a valid checkpoint", path.display()))?;
        let tensors: Vec<_> = m
            .param_names()
            .zip(m.params())
            .map(|(n, p)| json!({ "name": n, "shape": p.tensor.shape() }))
            .collect();
        json!({
            "kind": "checkpoint",
            "config": m.config(),
            "parameters": m.num_parameters(),
            "tensors": tensors,
        })
    } else {
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not a recognized artifact", path.display()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => predictions(&text)?,
            Some("tsv") => {
                let root = path.parent().unwrap_or(Path::new(""));
                let m = Manifest::parse(&text, root)?;
                let series: std::collections::BTreeSet<_> = m.entries.iter().map(|e| e.series_id.as_str()).collect();
                let splits: std::collections::BTreeMap<_, usize> = m.entries.iter().fold(Default::default(), |mut acc, e| {
                    *acc.entry(if e.split.is_empty() { "-" } else { e.split.as_str() }).or_default() += 1;
                    acc
                });
                json!({
                    "kind": "manifest",
                    "entries": m.len(),
                    "series": series.len(),
                    "frames": m.total_frames(),
                    "splits": splits,
                })
            }
            _ => bail!("{} is not a recognized artifact (sequence, checkpoint, manifest .tsv, predictions .jsonl)", path.display()),
        }
    };
    let text = if as_json {
        serde_json::to_string_pretty(&value)? + "\n"
    } else {
        let mut t = String::new();
        render_plain(&value, 0, &mut t);
        t
    };
    std::io::stdout().lock().write_all(text.as_bytes()).context("cannot write to stdout")
}

fn sequence(s: &EmbeddingSequence) -> serde_json::Value {
    let spans = |v: u8| -> Vec<[usize; 2]> {
        s.labels()
            .map(|l| runs_of(l, v).iter().map(|r| [r.start, r.end]).collect())
            .unwrap_or_default()
    };
    json!({
        "kind": "sequence",
        "id": s.id,
        "series_id": s.series_id,
        "fps": s.fps,
        "frames": s.len(),
        "dim": s.dim(),
        "labeled": s.has_labels(),
        "positive_frames": s.positive_frames(),
        "positive_runs": spans(1),
    })
}

fn predictions(text: &str) -> Result<serde_json::Value> {
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: PredictionRecord =
            serde_json::from_str(line).with_context(|| format!("predictions line {}", n + 1))?;
        let positive: Vec<[usize; 2]> = r.segments.iter().filter(|s| s.class == 1).map(|s| [s.start, s.end]).collect();
        let frames = r.segments.last().map_or(0, |s| s.end);
        records.push(json!({ "id": r.id, "frames": frames, "positive_segments": positive }));
    }
    Ok(json!({ "kind": "predictions", "records": records.len(), "videos": records }))
}

fn render_plain(v: &serde_json::Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                if v.is_object() || (v.is_array() && v.as_array().is_some_and(|a| a.iter().any(|x| x.is_object()))) {
                    let _ = writeln!(out, "{pad}{k}:");
                    render_plain(v, indent + 1, out);
                } else {
                    let _ = writeln!(out, "{pad}{k}: {v}");
                }
            }
        }
        serde_json::Value::Array(items) => {
            for item in items {
                let _ = writeln!(out, "{pad}-");
                render_plain(item, indent + 1, out);
            }
        }
        other => {
            let _ = writeln!(out, "{pad}{other}");
        }
    }
}
