//! Detection and classification of bird vocalizations in audio spectrograms.
//!
//! The pipeline has two stages. An unsupervised segmentation turns each
//! recording's spectrogram into a set of connected time-frequency segments
//! (median clipping, binary morphology, connected components). A classifier
//! then assigns species labels to segments using only recording-level weak
//! labels: segments are matched against other recordings by normalized
//! cross-correlation, restricted to a frequency band around the segment, and
//! label sets are refined in three passes (first pass, unallocated-label
//! repair, duplicate-label reassignment).
//!
//! Synthetic corpora with exact ground truth can be generated for evaluation,
//! and scored with the correct/wrong/unknown taxonomy.

pub mod classification;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod matching;
pub mod segmentation;
pub mod spectrogram;
pub mod synthgen;

pub use error::{Error, Result};
