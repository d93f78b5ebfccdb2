use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

pub const FRAMES_PER_SEQUENCE: usize = 10;
/// Largest light dose among sequences offered for annotation, seconds.
pub const MAX_SEQUENCE_DOSE: f64 = 80.0;

/// A 10-frame timelapse crop offered for annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceItem {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub stage_position: u64,
    pub light_dose: f64,
}

impl SequenceItem {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != FRAMES_PER_SEQUENCE {
            return Err(AnnotateError::Invalid(format!(
                "sequence `{}` has {} frames, expected {FRAMES_PER_SEQUENCE}",
                self.id,
                self.frames.len()
            )));
        }
        if !(0.0..=MAX_SEQUENCE_DOSE).contains(&self.light_dose) {
            return Err(AnnotateError::Invalid(format!(
                "sequence `{}` light dose {} outside [0, {MAX_SEQUENCE_DOSE}]",
                self.id, self.light_dose
            )));
        }
        if self.id.is_empty() {
            return Err(AnnotateError::Invalid("empty sequence id".into()));
        }
        Ok(())
    }
}

/// All sequences of a campaign, keyed by id. Relative frame paths resolve
/// against `root`.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    sequences: BTreeMap<String, SequenceItem>,
    root: PathBuf,
}

impl Catalog {
    pub fn new(items: Vec<SequenceItem>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut sequences = BTreeMap::new();
        for item in items {
            item.validate()?;
            let id = item.id.clone();
            if sequences.insert(id.clone(), item).is_some() {
                return Err(AnnotateError::Invalid(format!("duplicate sequence id `{id}`")));
            }
        }
        Ok(Self { sequences, root: root.into() })
    }

    /// Read a JSON-lines catalog; frame paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(line).map_err(|e| AnnotateError::Corrupt { line: i + 1, detail: e.to_string() })?);
        }
        Self::new(items, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for item in self.sequences.values() {
            out.push_str(&serde_json::to_string(item)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn get(&self, id: &str) -> Option<&SequenceItem> {
        self.sequences.get(id)
    }

    /// Sequences in id order.
    pub fn iter(&self) -> impl Iterator<Item = &SequenceItem> {
        self.sequences.values()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frame_path(&self, id: &str, frame: usize) -> Result<PathBuf> {
        let item = self.get(id).ok_or_else(|| AnnotateError::UnknownSequence(id.into()))?;
        let rel = item.frames.get(frame).ok_or_else(|| {
            AnnotateError::Invalid(format!("frame {frame} outside 0..{FRAMES_PER_SEQUENCE}"))
        })?;
        Ok(if rel.is_absolute() { rel.clone() } else { self.root.join(rel) })
    }
}
