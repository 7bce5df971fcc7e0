//! Corpus manifest and annotation tables.
//!
//! The manifest is a JSON file listing (audio, annotations, split) triples
//! plus an optional normalization-stats path. Relative paths are resolved
//! against the manifest's directory. Annotations are CSV with the header
//! `Audiofilename,Starttime,Endtime,Label` (seconds, dot decimal); the label
//! is a class name for base files, or `POS`/`NEG`/`UNK` flags.

use crate::error::{Error, Result};
use crate::eval::{Event, EventList};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub annotations: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<PathBuf>,
}

impl CorpusManifest {
    /// Load a manifest, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        for entry in manifest.entries.iter_mut() {
            entry.audio = resolve(&entry.audio);
            entry.annotations = resolve(&entry.annotations);
        }
        if let Some(s) = manifest.norm_stats.as_mut() {
            *s = resolve(s);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// One annotated event.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub audio_id: String,
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

/// All annotations of one file, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationTable {
    pub rows: Vec<AnnotationRow>,
}

impl AnnotationTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, reason: String| Error::Annotation {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["Audiofilename", "Starttime", "Endtime", "Label"] {
            return Err(bad(1, format!("unexpected header '{header}'")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad(i + 1, format!("expected 4 fields, got {}", fields.len())));
            }
            let onset: f64 = fields[1]
                .parse()
                .map_err(|e| bad(i + 1, format!("bad onset: {e}")))?;
            let offset: f64 = fields[2]
                .parse()
                .map_err(|e| bad(i + 1, format!("bad offset: {e}")))?;
            if !(onset < offset) {
                return Err(bad(i + 1, format!("onset {onset} not before offset {offset}")));
            }
            rows.push(AnnotationRow {
                audio_id: fields[0].to_string(),
                onset,
                offset,
                label: fields[3].to_string(),
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("Audiofilename,Starttime,Endtime,Label\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.audio_id, r.onset, r.offset, r.label
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Positive events, in annotation order (not sorted, not merged): every
    /// row that is not flagged `NEG` or `UNK`.
    pub fn positive_rows(&self) -> Vec<&AnnotationRow> {
        self.rows
            .iter()
            .filter(|r| r.label != "NEG" && r.label != "UNK")
            .collect()
    }

    /// Positive events as a validated, sorted event list.
    pub fn positive_events(&self) -> Result<EventList> {
        EventList::new(
            self.positive_rows()
                .iter()
                .map(|r| Event {
                    onset: r.onset,
                    offset: r.offset,
                })
                .collect(),
        )
    }
}
