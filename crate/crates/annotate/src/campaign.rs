use std::collections::BTreeMap;
use std::path::Path;

use deadnet::dataset::{manifest_string, split_by_position, ImageRecord, Label};
use deadnet::rng::rng_for;
use deadnet::stats::{ambiguity_chain, ConcordanceReport};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, SequenceItem};
use crate::error::{AnnotateError, Result};
use crate::log::{AnnotationRecord, AppendLog, Judgment, LogEntry, Presentation};

/// Every `OVERLAP_PERIOD`-th presentation to an annotator is an overlap draw.
pub const OVERLAP_PERIOD: u64 = 5;
/// Default share of exported stage positions used for training (700 of 900).
pub const DEFAULT_TRAIN_FRACTION: f64 = 700.0 / 900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ack {
    Recorded,
    /// Same annotator, sequence and label as an earlier record; nothing written.
    Duplicate,
}

/// Pairwise agreement among sequences with two or more judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    /// Sequences judged by at least two annotators, none of them Unsure.
    pub overlaps: usize,
    /// Of those, sequences whose labels are not all equal.
    pub disagreements: usize,
    /// Multiply-judged sequences left out because someone was Unsure.
    pub unsure_excluded: usize,
    /// Absent when there are no overlaps or disagreement reaches one half.
    pub chain: Option<ConcordanceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub kept_sequences: usize,
    pub discordant: usize,
    pub unsure_only: usize,
}

impl Export {
    pub fn train_manifest(&self) -> Result<String> {
        Ok(manifest_string(&self.train)?)
    }

    pub fn test_manifest(&self) -> Result<String> {
        Ok(manifest_string(&self.test)?)
    }
}

/// Campaign state rebuilt from the log on open; every change is logged first.
#[derive(Debug)]
pub struct Campaign {
    catalog: Catalog,
    log: AppendLog,
    seed: u64,
    /// sequence → annotator → judgment
    labels: BTreeMap<String, BTreeMap<String, Judgment>>,
    presentations: Vec<Presentation>,
    served: BTreeMap<String, u64>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// FNV-1a, to key per-annotator random streams.
fn annotator_key(annotator: &str) -> u64 {
    annotator.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Campaign {
    pub fn open(catalog: Catalog, log_path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let (log, entries) = AppendLog::open(log_path)?;
        let mut c = Self { catalog, log, seed, labels: BTreeMap::new(), presentations: Vec::new(), served: BTreeMap::new() };
        for (i, entry) in entries.into_iter().enumerate() {
            let sequence = match &entry {
                LogEntry::Presentation(p) => &p.sequence,
                LogEntry::Annotation(a) => &a.sequence,
            };
            if c.catalog.get(sequence).is_none() {
                return Err(AnnotateError::Corrupt { line: i + 1, detail: format!("sequence `{sequence}` not in catalog") });
            }
            c.apply(entry);
        }
        Ok(c)
    }

    fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Presentation(p) => {
                let n = self.served.entry(p.annotator.clone()).or_default();
                *n = (*n).max(p.index);
                self.presentations.push(p);
            }
            LogEntry::Annotation(a) => {
                self.labels.entry(a.sequence).or_default().insert(a.annotator, a.label);
            }
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// Every presentation so far, in log order.
    pub fn presentations(&self) -> &[Presentation] {
        &self.presentations
    }

    pub fn judgments(&self, sequence: &str) -> Option<&BTreeMap<String, Judgment>> {
        self.labels.get(sequence)
    }

    pub fn record_count(&self) -> usize {
        self.labels.values().map(BTreeMap::len).sum()
    }

    /// Serve the annotator's next sequence. Every fifth presentation comes
    /// from sequences another annotator has scored (or, if there are none,
    /// falls back to an ordinary draw and says so). Ordinary draws prefer
    /// sequences nobody has scored. A sequence this annotator has scored is
    /// never served again.
    pub fn next_sequence(&mut self, annotator: &str) -> Result<(Presentation, &SequenceItem)> {
        if annotator.is_empty() {
            return Err(AnnotateError::Invalid("empty annotator id".into()));
        }
        let index = self.served.get(annotator).copied().unwrap_or(0) + 1;
        let (mut scored_by_others, mut fresh) = (Vec::new(), Vec::new());
        for item in self.catalog.iter() {
            match self.labels.get(&item.id) {
                Some(by) if by.contains_key(annotator) => {}
                Some(by) if !by.is_empty() => scored_by_others.push(item.id.as_str()),
                _ => fresh.push(item.id.as_str()),
            }
        }
        let due = index % OVERLAP_PERIOD == 0;
        let from_scored = due && !scored_by_others.is_empty() || fresh.is_empty();
        let pool = if from_scored { &scored_by_others } else { &fresh };
        if pool.is_empty() {
            return Err(AnnotateError::Exhausted(annotator.into()));
        }
        let mut rng = rng_for(self.seed, &[annotator_key(annotator), index]);
        let sequence = pool[rng.random_range(0..pool.len())].to_string();
        let p = Presentation {
            annotator: annotator.into(),
            overlap: from_scored,
            fallback: due && scored_by_others.is_empty(),
            sequence,
            index,
            timestamp: now(),
        };
        let entry = LogEntry::Presentation(p.clone());
        self.log.append(&entry)?;
        self.apply(entry);
        let item = self.catalog.get(&p.sequence).expect("drawn from the catalog");
        Ok((p, item))
    }

    /// Append a judgment. Re-sending the same label is acknowledged without
    /// writing; a different label for the same pair is a conflict.
    pub fn record(&mut self, mut rec: AnnotationRecord) -> Result<Ack> {
        if rec.annotator.is_empty() {
            return Err(AnnotateError::Invalid("empty annotator id".into()));
        }
        if self.catalog.get(&rec.sequence).is_none() {
            return Err(AnnotateError::UnknownSequence(rec.sequence));
        }
        if let Some(&existing) = self.labels.get(&rec.sequence).and_then(|by| by.get(&rec.annotator)) {
            return if existing == rec.label {
                Ok(Ack::Duplicate)
            } else {
                Err(AnnotateError::Conflict { annotator: rec.annotator, sequence: rec.sequence, existing, attempted: rec.label })
            };
        }
        if rec.timestamp.is_empty() {
            rec.timestamp = now();
        }
        let entry = LogEntry::Annotation(rec);
        self.log.append(&entry)?;
        self.apply(entry);
        Ok(Ack::Recorded)
    }

    pub fn concordance(&self) -> Concordance {
        let (mut overlaps, mut disagreements, mut unsure_excluded) = (0, 0, 0);
        for by in self.labels.values().filter(|by| by.len() >= 2) {
            if by.values().any(|&j| j == Judgment::Unsure) {
                unsure_excluded += 1;
                continue;
            }
            overlaps += 1;
            let mut it = by.values();
            let first = it.next().expect("at least two");
            disagreements += usize::from(it.any(|j| j != first));
        }
        Concordance { overlaps, disagreements, unsure_excluded, chain: ambiguity_chain(disagreements, overlaps).ok() }
    }

    /// Keep sequences whose non-Unsure judgments agree, expand each into ten
    /// labeled frame records, and split them by stage position.
    pub fn export(&self, train_fraction: f64, seed: u64) -> Result<Export> {
        if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
            return Err(AnnotateError::Invalid(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let (mut records, mut kept, mut discordant, mut unsure_only) = (Vec::new(), 0, 0, 0);
        for (id, by) in &self.labels {
            let decided: Vec<Judgment> = by.values().copied().filter(|&j| j != Judgment::Unsure).collect();
            let Some(&first) = decided.first() else {
                unsure_only += 1;
                continue;
            };
            if decided.iter().any(|&j| j != first) {
                discordant += 1;
                continue;
            }
            kept += 1;
            let label = if first == Judgment::Sick { Label::Sick } else { Label::Healthy };
            let item = self.catalog.get(id).expect("logged sequences are in the catalog");
            for k in 0..item.frames.len() {
                records.push(ImageRecord {
                    path: self.catalog.frame_path(id, k)?,
                    stage_position: item.stage_position,
                    light_dose: item.light_dose,
                    frame_index: k as u32,
                    label,
                    synthetic: false,
                });
            }
        }
        if records.is_empty() {
            return Err(AnnotateError::NothingExported);
        }
        let (train, test) = split_by_position(&records, 1.0 - train_fraction, seed)?;
        Ok(Export { train, test, kept_sequences: kept, discordant, unsure_only })
    }
}
