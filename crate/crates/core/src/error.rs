use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by corpus loading and the processing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedAudio { path: PathBuf, detail: String },
    #[error("failed to decode audio {path}: {detail}")]
    AudioDecode { path: PathBuf, detail: String },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("duplicate recording id `{0}`")]
    DuplicateRecording(String),
    #[error("no file found for recording `{id}`: tried {wav} and {spec}")]
    MissingRecordingFile { id: String, wav: PathBuf, spec: PathBuf },
    #[error("recording `{id}` has {samples} samples, shorter than one window of {window_size}")]
    RecordingTooShort {
        id: String,
        samples: usize,
        window_size: usize,
    },
    #[error("spectrogram has {rows} rows; cropping needs more than {required}")]
    TooFewRows { rows: usize, required: usize },
    #[error("template shape {template:?} exceeds target shape {target:?}")]
    TemplateTooLarge {
        template: (usize, usize),
        target: (usize, usize),
    },
    #[error("corrupt spectrogram file {path}: {detail}")]
    SpecFile { path: PathBuf, detail: String },
    #[error("segment `{id}`: {detail}")]
    InvalidSegment { id: String, detail: String },
    #[error("unknown recording id `{0}`")]
    UnknownRecording(String),
    #[error("synthetic corpus needs at least one unlabelled noise recording with {required} frames")]
    NoNoiseBackground { required: usize },
    #[error("no source segment available for label `{label}` (min {min_px} px)")]
    NoSegmentsForLabel { label: String, min_px: usize },
    #[error("could not place segment for `{label}` in `{recording}` within the retry budget")]
    PlacementFailed { recording: String, label: String },
    #[error("patch of {patch:?} does not fit target {target:?} at ({row}, {col})")]
    PatchOutOfBounds {
        patch: (usize, usize),
        target: (usize, usize),
        row: usize,
        col: usize,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
