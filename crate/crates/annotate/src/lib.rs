//! Expert annotation campaign for 10-frame timelapse crops.
//!
//! Annotators see sequences blind to light dose and label each Healthy, Sick
//! or Unsure. Every fifth sequence shown to an annotator has already been
//! labeled by someone else, which yields the overlap used to measure
//! agreement. All state lives in an append-only log and is rebuilt by replay.

pub mod campaign;
pub mod catalog;
pub mod error;
pub mod http;
pub mod log;

pub use campaign::{Ack, Campaign, Concordance, Export, DEFAULT_TRAIN_FRACTION, OVERLAP_PERIOD};
pub use catalog::{Catalog, SequenceItem, FRAMES_PER_SEQUENCE};
pub use error::{AnnotateError, Result};
pub use log::{AnnotationRecord, AppendLog, Judgment, LogEntry, Presentation};
