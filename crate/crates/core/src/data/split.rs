use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::Manifest;
use crate::error::{Error, Result};
use crate::Rng;

/// Partitions a manifest into `(train, val)` with whole series as the unit,
/// so no series contributes to both sides. Series are visited in a seeded
/// random order and moved to validation whenever that brings its frame share
/// closer to `val_fraction`. Both sides always receive at least one series.
pub fn split_by_series(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Split(format!("val_fraction {val_fraction} outside [0, 1]")));
    }
    let mut frames_by_series: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        if e.series_id.is_empty() {
            return Err(Error::Split(format!("{} has no series_id", e.id)));
        }
        *frames_by_series.entry(e.series_id.as_str()).or_default() += e.frames;
    }
    if frames_by_series.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 series to split, found {}",
            frames_by_series.len()
        )));
    }
    let mut series: Vec<(&str, usize)> = frames_by_series.into_iter().collect();
    series.shuffle(&mut Rng::seed_from_u64(seed));

    let total: usize = series.iter().map(|(_, f)| f).sum();
    let target = val_fraction * total as f64;
    let mut val_frames = 0usize;
    let mut in_val = vec![false; series.len()];
    for (i, (_, f)) in series.iter().enumerate() {
        let now = (val_frames as f64 - target).abs();
        let with = ((val_frames + f) as f64 - target).abs();
        if with < now {
            in_val[i] = true;
            val_frames += f;
        }
    }
    if !in_val.iter().any(|v| *v) {
        in_val[0] = true;
    }
    if in_val.iter().all(|v| *v) {
        let last = in_val.len() - 1;
        in_val[last] = false;
    }
    let val_series: Vec<&str> = series
        .iter()
        .zip(&in_val)
        .filter(|(_, v)| **v)
        .map(|((s, _), _)| *s)
        .collect();

    let (mut train, mut val) = (Vec::new(), Vec::new());
    for e in &manifest.entries {
        let mut e = e.clone();
        if val_series.contains(&e.series_id.as_str()) {
            e.split = "val".into();
            val.push(e);
        } else {
            e.split = "train".into();
            train.push(e);
        }
    }
    Ok((
        Manifest::new(manifest.root.clone(), train)?,
        Manifest::new(manifest.root.clone(), val)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn manifest(series_frames: &[(usize, usize)]) -> Manifest {
        let mut entries = Vec::new();
        for (s, (eps, frames)) in series_frames.iter().enumerate() {
            for e in 0..*eps {
                entries.push(ManifestEntry {
                    id: format!("s{s}e{e}"),
                    series_id: format!("series{s}"),
                    path: format!("s{s}e{e}.icsq").into(),
                    has_labels: true,
                    frames: *frames,
                    split: String::new(),
                });
            }
        }
        Manifest::new("", entries).unwrap()
    }

    fn series_of(m: &Manifest) -> HashSet<String> {
        m.entries.iter().map(|e| e.series_id.clone()).collect()
    }

    #[test]
    fn two_series_split_one_each() {
        for frac in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let (t, v) = split_by_series(&manifest(&[(3, 100), (2, 100)]), frac, 1).unwrap();
            assert_eq!((series_of(&t).len(), series_of(&v).len()), (1, 1));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let m = manifest(&[(2, 100); 10]);
        let a = split_by_series(&m, 0.2, 42).unwrap();
        let b = split_by_series(&m, 0.2, 42).unwrap();
        assert_eq!(a, b);
        let frac = a.1.total_frames() as f64 / m.total_frames() as f64;
        assert!((frac - 0.2).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn needs_two_series() {
        assert!(matches!(
            split_by_series(&manifest(&[(4, 100)]), 0.2, 0),
            Err(Error::Split(_))
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_series_partition(
            sizes in proptest::collection::vec((1usize..5, 50usize..400), 2..12),
            frac in 0.05f64..0.6,
            seed in any::<u64>(),
        ) {
            let m = manifest(&sizes);
            let (t, v) = split_by_series(&m, frac, seed).unwrap();
            prop_assert_eq!(t.len() + v.len(), m.len());
            prop_assert!(series_of(&t).is_disjoint(&series_of(&v)));
            prop_assert!(!t.is_empty() && !v.is_empty());
            let mut ids: Vec<_> = t.entries.iter().chain(&v.entries).map(|e| e.id.clone()).collect();
            ids.sort();
            let mut all: Vec<_> = m.entries.iter().map(|e| e.id.clone()).collect();
            all.sort();
            prop_assert_eq!(ids, all);
        }
    }
}
