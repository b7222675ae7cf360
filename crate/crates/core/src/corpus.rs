//! Corpus loading: WAV recordings, weak-label manifests, spectrogram corpora.
//!
//! A corpus manifest is a UTF-8 CSV with header `recording_id,labels` where
//! `labels` is a `;`-separated list of species names (empty for noise-only
//! recordings). Each row refers to `<id>.wav` (PCM audio) or `<id>.spec`
//! (a stored spectrogram) next to the manifest; audio corpora and
//! spectrogram corpora share the same manifest shape.

use std::collections::btree_map;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrogram::{self, Spectrogram, SpectrogramParams};

/// Opaque species identifier as it appears in a weak-label manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeciesLabel(String);

impl SpeciesLabel {
    pub fn new(name: impl Into<String>) -> Self {
        SpeciesLabel(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpeciesLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type LabelSet = BTreeSet<SpeciesLabel>;

/// A mono recording with its recording-level weak labels.
///
/// Weak labels name the species present somewhere in the recording; they say
/// nothing about when or at which frequency. An empty set marks a noise-only
/// recording.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    /// Amplitudes in `[-1, 1]`; multi-channel input is averaged to mono.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub weak_labels: LabelSet,
}

/// Id-indexed collection of recordings. Ids are unique.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    recordings: BTreeMap<String, Recording>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, recording: Recording) -> Result<()> {
        match self.recordings.entry(recording.id.clone()) {
            btree_map::Entry::Occupied(_) => Err(Error::DuplicateRecording(recording.id)),
            btree_map::Entry::Vacant(v) => {
                v.insert(recording);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&Recording> {
        self.recordings.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Recording)> {
        self.recordings.iter()
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    pub fn single_label_species(&self) -> LabelSet {
        single_label_species(self.recordings.values().map(|r| &r.weak_labels))
    }
}

/// Labels that appear as the sole weak label of at least one recording.
pub fn single_label_species<'a, I>(label_sets: I) -> LabelSet
where
    I: IntoIterator<Item = &'a LabelSet>,
{
    label_sets
        .into_iter()
        .filter(|set| set.len() == 1)
        .flat_map(|set| set.iter().cloned())
        .collect()
}

/// Load a PCM WAV file as a normalized mono recording.
///
/// Integer samples are scaled by `2^(bits-1)` so all bit depths land in
/// `[-1, 1]`; multi-channel input is down-mixed by the arithmetic mean.
/// The recording id is the file stem.
pub fn load_recording(path: &Path) -> Result<Recording> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound_error(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::UnsupportedAudio {
            path: path.to_path_buf(),
            detail: "zero channels".into(),
        });
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::UnsupportedAudio {
                    path: path.to_path_buf(),
                    detail: format!("{}-bit float", spec.bits_per_sample),
                });
            }
            let mut reader = reader;
            reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound_error(path, e))?
        }
        hound::SampleFormat::Int => {
            if !matches!(spec.bits_per_sample, 8 | 16 | 24 | 32) {
                return Err(Error::UnsupportedAudio {
                    path: path.to_path_buf(),
                    detail: format!("{}-bit int", spec.bits_per_sample),
                });
            }
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            let mut reader = reader;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound_error(path, e))?
        }
    };

    let channels = spec.channels as usize;
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };

    Ok(Recording {
        id,
        samples,
        sample_rate: spec.sample_rate,
        weak_labels: LabelSet::new(),
    })
}

fn map_hound_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::UnsupportedAudio {
            path: path.to_path_buf(),
            detail: "unsupported WAV encoding".into(),
        },
        other => Error::AudioDecode {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// One parsed manifest row: recording id plus its weak labels.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: String,
    pub labels: LabelSet,
}

/// Parse a `recording_id,labels` manifest without touching the audio files.
pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| manifest_error(path, e.to_string()))?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| manifest_error(path, e.to_string()))?;
        if record.len() != 2 {
            return Err(manifest_error(
                path,
                format!("expected 2 fields, got {}", record.len()),
            ));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(manifest_error(path, "empty recording id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateRecording(id));
        }
        let labels: LabelSet = record[1]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(SpeciesLabel::new)
            .collect();
        rows.push(ManifestRow { id, labels });
    }
    Ok(rows)
}

fn manifest_error(path: &Path, detail: String) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        detail,
    }
}

/// Load an audio corpus: parse the manifest and decode every `<id>.wav`
/// next to it, attaching the weak labels.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let rows = read_manifest_rows(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut corpus = Corpus::new();
    for row in rows {
        let wav = dir.join(format!("{}.wav", row.id));
        if !wav.exists() {
            return Err(Error::MissingRecordingFile {
                id: row.id.clone(),
                spec: dir.join(format!("{}.spec", row.id)),
                wav,
            });
        }
        let mut recording = load_recording(&wav)?;
        recording.id = row.id;
        recording.weak_labels = row.labels;
        corpus.insert(recording)?;
    }
    Ok(corpus)
}

/// A stored spectrogram together with the recording-level weak labels.
#[derive(Debug, Clone)]
pub struct LabelledSpectrogram {
    pub spec: Spectrogram,
    pub weak_labels: LabelSet,
}

/// Id-indexed collection of labelled spectrograms: the form every stage
/// after the STFT operates on. Audio corpora are converted on load;
/// synthetic corpora are built in this form directly.
#[derive(Debug, Clone, Default)]
pub struct SpectrogramCorpus {
    entries: BTreeMap<String, LabelledSpectrogram>,
}

impl SpectrogramCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: LabelledSpectrogram) -> Result<()> {
        let id = entry.spec.recording_id.clone();
        match self.entries.entry(id) {
            btree_map::Entry::Occupied(o) => Err(Error::DuplicateRecording(o.key().clone())),
            btree_map::Entry::Vacant(v) => {
                v.insert(entry);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&LabelledSpectrogram> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LabelledSpectrogram)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn single_label_species(&self) -> LabelSet {
        single_label_species(self.entries.values().map(|e| &e.weak_labels))
    }

    /// Write the corpus as `manifest.csv` plus one `<id>.spec` per entry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.csv");
        let mut writer = csv::Writer::from_path(&manifest)
            .map_err(|e| manifest_error(&manifest, e.to_string()))?;
        writer
            .write_record(["recording_id", "labels"])
            .map_err(|e| manifest_error(&manifest, e.to_string()))?;
        for (id, entry) in &self.entries {
            let labels = entry
                .weak_labels
                .iter()
                .map(SpeciesLabel::as_str)
                .collect::<Vec<_>>()
                .join(";");
            writer
                .write_record([id.as_str(), labels.as_str()])
                .map_err(|e| manifest_error(&manifest, e.to_string()))?;
            spectrogram::save_spec(&entry.spec, &dir.join(format!("{id}.spec")))?;
        }
        writer
            .flush()
            .map_err(|e| Error::io(&manifest, e))?;
        Ok(())
    }
}

/// Load a corpus manifest into spectrogram form.
///
/// Each row resolves to `<id>.spec` if present, otherwise `<id>.wav` which is
/// decoded and run through the STFT, normalization and row cropping with the
/// given parameters.
pub fn load_spectrogram_corpus(
    manifest: &Path,
    params: &SpectrogramParams,
) -> Result<SpectrogramCorpus> {
    use rayon::prelude::*;

    let rows = read_manifest_rows(manifest)?;
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let entries: Vec<LabelledSpectrogram> = rows
        .into_par_iter()
        .map(|row| -> Result<LabelledSpectrogram> {
            let spec_path = dir.join(format!("{}.spec", row.id));
            let wav_path = dir.join(format!("{}.wav", row.id));
            let spec = if spec_path.exists() {
                let mut spec = spectrogram::load_spec(&spec_path)?;
                spec.recording_id = row.id.clone();
                spec
            } else if wav_path.exists() {
                let mut recording = load_recording(&wav_path)?;
                recording.id = row.id.clone();
                let spec = spectrogram::compute_spectrogram(&recording, params)?;
                let spec = spectrogram::normalize(spec);
                spectrogram::crop_rows(spec, params.crop_low, params.crop_high)?
            } else {
                return Err(Error::MissingRecordingFile {
                    id: row.id.clone(),
                    wav: wav_path,
                    spec: spec_path,
                });
            };
            Ok(LabelledSpectrogram {
                spec,
                weak_labels: row.labels,
            })
        })
        .collect::<Result<_>>()?;

    let mut corpus = SpectrogramCorpus::new();
    for entry in entries {
        corpus.insert(entry)?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_wav_i16(path: &Path, rate: u32, channels: u16, frames: usize, gen: impl Fn(usize, usize) -> i16) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).unwrap();
        for frame in 0..frames {
            for ch in 0..channels as usize {
                writer.write_sample(gen(frame, ch)).unwrap();
            }
        }
        writer.finalize().unwrap();
    }

    #[test]
    fn five_second_mono_file_has_expected_sample_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r0.wav");
        write_wav_i16(&path, 44_100, 1, 5 * 44_100, |_, _| 100);
        let rec = load_recording(&path).unwrap();
        assert_eq!(rec.samples.len(), 220_500);
        assert_eq!(rec.sample_rate, 44_100);
        assert_eq!(rec.id, "r0");
    }

    #[test]
    fn stereo_is_downmixed_to_channel_mean() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        write_wav_i16(&path, 8_000, 2, 4, |_, ch| if ch == 0 { 1000 } else { 3000 });
        let rec = load_recording(&path).unwrap();
        assert_eq!(rec.samples.len(), 4);
        let expected = (1000.0 + 3000.0) / 2.0 / 32768.0;
        for &s in &rec.samples {
            assert!((s - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn sixteen_bit_samples_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.wav");
        write_wav_i16(&path, 8_000, 1, 2, |frame, _| if frame == 0 { i16::MIN } else { i16::MAX });
        let rec = load_recording(&path).unwrap();
        assert!((rec.samples[0] + 1.0).abs() < 1e-6);
        assert!((rec.samples[1] - (32767.0 / 32768.0)).abs() < 1e-6);
    }

    #[test]
    fn truncated_header_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(b"RIFF\x04\x00\x00\x00WAVE")
            .unwrap();
        let err = load_recording(&path).unwrap_err();
        assert!(matches!(err, Error::AudioDecode { .. } | Error::Io { .. }));
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.wav");
        write_wav_i16(&path, 8_000, 1, 64, |frame, _| (frame as i16) * 17);
        let a = load_recording(&path).unwrap();
        let b = load_recording(&path).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    fn write_manifest(dir: &Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("manifest.csv");
        std::fs::write(&path, format!("recording_id,labels\n{body}")).unwrap();
        path
    }

    #[test]
    fn manifest_rows_parse_labels_and_empty_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "rec7,SpA;SpB\nnoise3,\n");
        let rows = read_manifest_rows(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(
            rows[0].labels,
            [SpeciesLabel::new("SpA"), SpeciesLabel::new("SpB")].into_iter().collect()
        );
        assert!(rows[1].labels.is_empty());
    }

    #[test]
    fn duplicate_manifest_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "rec7,SpA\nrec7,SpB\n");
        assert!(matches!(
            read_manifest_rows(&path).unwrap_err(),
            Error::DuplicateRecording(id) if id == "rec7"
        ));
    }

    #[test]
    fn malformed_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "only_one_field\n");
        assert!(matches!(read_manifest_rows(&path).unwrap_err(), Error::Manifest { .. }));
    }

    #[test]
    fn load_manifest_attaches_labels_and_requires_files() {
        let dir = tempfile::tempdir().unwrap();
        write_wav_i16(&dir.path().join("rec7.wav"), 8_000, 1, 16, |_, _| 0);
        let path = write_manifest(dir.path(), "rec7,SpA;SpB\n");
        let corpus = load_manifest(&path).unwrap();
        assert_eq!(corpus.len(), 1);
        let rec = corpus.get("rec7").unwrap();
        assert_eq!(rec.weak_labels.len(), 2);

        let path = write_manifest(dir.path(), "rec7,SpA\nmissing,\n");
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            Error::MissingRecordingFile { id, .. } if id == "missing"
        ));
    }

    #[test]
    fn single_label_species_follows_sole_label_rule() {
        let a = SpeciesLabel::new("A");
        let b = SpeciesLabel::new("B");
        let sets = [
            LabelSet::from([a.clone()]),
            LabelSet::from([a.clone(), b.clone()]),
            LabelSet::from([b.clone()]),
        ];
        assert_eq!(single_label_species(sets.iter()), LabelSet::from([a.clone(), b.clone()]));

        let only_multi = [LabelSet::from([a.clone(), b.clone()])];
        assert!(single_label_species(only_multi.iter()).is_empty());
    }

    #[test]
    fn single_label_species_is_subset_of_all_labels() {
        let labels: Vec<LabelSet> = (0..20)
            .map(|i| {
                (0..=(i % 3))
                    .map(|j| SpeciesLabel::new(format!("sp{}", (i + j) % 7)))
                    .collect()
            })
            .collect();
        let single = single_label_species(labels.iter());
        let union: LabelSet = labels.iter().flatten().cloned().collect();
        assert!(single.is_subset(&union));
    }
}
