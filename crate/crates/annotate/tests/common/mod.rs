#![allow(dead_code)]

use std::path::{Path, PathBuf};

use deadnet_annotate::{AnnotationRecord, Catalog, Judgment, SequenceItem, FRAMES_PER_SEQUENCE};

/// `n` sequences; sequences `2p` and `2p + 1` share stage position `p`.
/// Frame files are written as tiny PNG-named placeholders under `root`.
pub fn catalog(root: &Path, n: usize) -> Catalog {
    let items = (0..n)
        .map(|i| {
            let id = format!("seq{i:04}");
            let frames: Vec<PathBuf> = (0..FRAMES_PER_SEQUENCE).map(|k| PathBuf::from(format!("{id}/f{k}.png"))).collect();
            let dir = root.join(&id);
            std::fs::create_dir_all(&dir).unwrap();
            for (k, f) in frames.iter().enumerate() {
                std::fs::write(root.join(f), format!("{id}:{k}")).unwrap();
            }
            SequenceItem { id, frames, stage_position: (i / 2) as u64, light_dose: (i % 9) as f64 * 10.0 }
        })
        .collect();
    Catalog::new(items, root).unwrap()
}

pub fn rec(annotator: &str, sequence: &str, label: Judgment) -> AnnotationRecord {
    AnnotationRecord { annotator: annotator.into(), sequence: sequence.into(), label, timestamp: String::new(), presentation: 0 }
}
