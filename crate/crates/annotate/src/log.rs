//! Durable append-only JSON-lines log of presentations and judgments.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Judgment {
    Healthy,
    Sick,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotator: String,
    pub sequence: String,
    pub label: Judgment,
    /// RFC 3339; filled in by the service when the client omits it.
    #[serde(default)]
    pub timestamp: String,
    /// 1-based position in the annotator's presentation stream.
    pub presentation: u64,
}

/// One sequence served to one annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub annotator: String,
    pub sequence: String,
    pub index: u64,
    /// Drawn from sequences already scored by another annotator.
    pub overlap: bool,
    /// An overlap draw was due but that pool was empty.
    pub fallback: bool,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Presentation(Presentation),
    Annotation(AnnotationRecord),
}

/// Every entry is written as one line and synced before the append returns.
#[derive(Debug)]
pub struct AppendLog {
    file: File,
    path: PathBuf,
}

impl AppendLog {
    /// Open (creating if needed) and replay. An unterminated final line is
    /// the trace of an interrupted append: it was never acknowledged, so it is
    /// cut off. Any other unreadable line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<LogEntry>)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            file.set_len(complete as u64)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        let text = std::str::from_utf8(&bytes[..complete])
            .map_err(|e| AnnotateError::Corrupt { line: 0, detail: e.to_string() })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| AnnotateError::Corrupt { line: i + 1, detail: e.to_string() })?);
        }
        Ok((Self { file, path }, entries))
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
