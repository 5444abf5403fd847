//! Dataset manifests: one tab-separated record per line.
//!
//! ```text
//! # id  series_id  path  has_labels  frames  split
//! s00e00  series00  s00e00.icsq  1  184  train
//! ```
//!
//! Lines starting with `#` are comments. Paths are relative to the
//! manifest's directory. `split` is free text; `-` means unassigned.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_sequence, EmbeddingSequence};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "# id\tseries_id\tpath\thas_labels\tframes\tsplit";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub series_id: String,
    pub path: PathBuf,
    pub has_labels: bool,
    pub frames: usize,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest {
            entries,
            root: root.into(),
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Format(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(|e| e.frames).sum()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Reads every referenced sequence, checking it against its entry.
    pub fn load_sequences(&self) -> Result<Vec<EmbeddingSequence>> {
        self.entries
            .iter()
            .map(|e| {
                let seq = read_sequence(self.resolve(e))?;
                if seq.id != e.id || seq.len() != e.frames || seq.has_labels() != e.has_labels {
                    return Err(Error::Format(format!(
                        "{}: file contents (id {:?}, {} frames, labels {}) disagree with manifest",
                        e.id,
                        seq.id,
                        seq.len(),
                        seq.has_labels()
                    )));
                }
                Ok(seq)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.id,
                e.series_id,
                e.path.display(),
                e.has_labels as u8,
                e.frames,
                if e.split.is_empty() { "-" } else { &e.split }
            );
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 1));
            let [id, series_id, path, has_labels, frames, split] = fields.as_slice() else {
                return Err(bad(&format!("expected 6 tab-separated fields, got {}", fields.len())));
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                series_id: series_id.to_string(),
                path: PathBuf::from(path),
                has_labels: match *has_labels {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad("has_labels must be 0 or 1")),
                },
                frames: frames.parse().map_err(|_| bad("frames is not an integer"))?,
                split: if *split == "-" { String::new() } else { split.to_string() },
            });
        }
        Manifest::new(root, entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Entries whose split tag equals `tag`.
    pub fn with_split(&self, tag: &str) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| e.split == tag).cloned().collect(),
            root: self.root.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, series: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            series_id: series.into(),
            path: format!("{id}.icsq").into(),
            has_labels: true,
            frames: 120,
            split: String::new(),
        }
    }

    #[test]
    fn text_round_trip() {
        let mut e2 = entry("b", "y");
        e2.split = "val".into();
        e2.has_labels = false;
        let m = Manifest::new("/data", vec![entry("a", "x"), e2]).unwrap();
        let text = m.to_text();
        assert!(text.starts_with(MANIFEST_HEADER));
        assert_eq!(Manifest::parse(&text, "/data").unwrap(), m);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(Manifest::new("", vec![entry("a", "x"), entry("a", "y")]).is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(Manifest::parse("a\tb\tc\n", "").is_err());
        assert!(Manifest::parse("a\tb\tc\t2\t10\t-\n", "").is_err());
        assert!(Manifest::parse("a\tb\tc\t1\tten\t-\n", "").is_err());
    }
}
