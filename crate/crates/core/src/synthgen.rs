//! Seeded synthetic evaluation corpora with exact ground truth.
//!
//! Generation happens in the spectrogram domain: a noise background
//! spectrogram gets magnitude patches of real segments pasted onto it
//! (pointwise max), one per drawn label, at their original frequency rows
//! and a random time position, with no two planted boxes overlapping.
//! Everything is driven by one seeded RNG stream, so a (source, config)
//! pair reproduces byte-identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, LabelledSpectrogram, SpeciesLabel, SpectrogramCorpus};
use crate::error::{Error, Result};
use crate::segmentation::{self, BBox, Segment, SegmentationParams};
use crate::spectrogram::{frame_count, Spectrogram};

/// Configuration of one synthetic corpus draw. The seed is part of the
/// config: generation never touches ambient entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub recording_count: usize,
    /// Target duration; the background spectrogram is cut to the frame
    /// count this duration implies at the source sample rate.
    pub duration_s: f64,
    pub labels_min: usize,
    pub labels_max: usize,
    /// Only source segments with at least this many pixels are planted.
    pub min_segment_px: usize,
    pub rng_seed: u64,
}

impl SyntheticConfig {
    /// 50 recordings of 5 s with 2 to 5 labels each.
    pub fn with_seed(rng_seed: u64) -> Self {
        Self {
            recording_count: 50,
            duration_s: 5.0,
            labels_min: 2,
            labels_max: 5,
            min_segment_px: 0,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.labels_min == 0 || self.labels_min > self.labels_max {
            return Err(Error::InvalidInput(format!(
                "bad label range {}..={}",
                self.labels_min, self.labels_max
            )));
        }
        Ok(())
    }
}

/// One planted vocalization: where it went and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSegment {
    pub label: SpeciesLabel,
    pub bbox: BBox,
    pub source_segment: String,
}

/// Exact ground truth of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub recordings: BTreeMap<String, Vec<PlantedSegment>>,
}

impl GroundTruth {
    pub fn total_plants(&self) -> usize {
        self.recordings.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthRow {
    recording_id: String,
    plants: Vec<PlantedSegment>,
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (recording_id, plants) in &truth.recordings {
        let row = GroundTruthRow {
            recording_id: recording_id.clone(),
            plants: plants.clone(),
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut truth = GroundTruth::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: GroundTruthRow = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        truth.recordings.insert(row.recording_id, row.plants);
    }
    Ok(truth)
}

/// Paste a magnitude patch onto a spectrogram with a pointwise max, so
/// the patch shows through noise without breaking normalization bounds.
/// The patch must fit entirely inside the target.
pub fn paste_patch(
    background: &Spectrogram,
    patch: ndarray::ArrayView2<'_, f32>,
    at: (usize, usize),
) -> Result<Spectrogram> {
    let mut out = background.clone();
    paste_patch_into(&mut out.values, patch, at)?;
    Ok(out)
}

fn paste_patch_into(
    values: &mut Array2<f32>,
    patch: ndarray::ArrayView2<'_, f32>,
    (row, col): (usize, usize),
) -> Result<()> {
    let (ph, pw) = patch.dim();
    let (rows, cols) = values.dim();
    if row + ph > rows || col + pw > cols {
        return Err(Error::PatchOutOfBounds {
            patch: (ph, pw),
            target: (rows, cols),
            row,
            col,
        });
    }
    for ((r, c), &v) in patch.indexed_iter() {
        let slot = &mut values[(row + r, col + c)];
        *slot = slot.max(v);
    }
    Ok(())
}

/// Source segments usable for planting, keyed by their recording's sole
/// weak label. Only single-label recordings contribute, so every planted
/// patch has an unambiguous true label.
pub fn build_segment_pools(
    source: &SpectrogramCorpus,
    segments_by_recording: &BTreeMap<String, Vec<Segment>>,
    min_segment_px: usize,
) -> BTreeMap<SpeciesLabel, Vec<Segment>> {
    let mut pools: BTreeMap<SpeciesLabel, Vec<Segment>> = BTreeMap::new();
    for (id, segments) in segments_by_recording {
        let Some(entry) = source.get(id) else { continue };
        if entry.weak_labels.len() != 1 {
            continue;
        }
        let label = entry.weak_labels.iter().next().unwrap();
        for seg in segments {
            if seg.pixel_count >= min_segment_px {
                pools.entry(label.clone()).or_default().push(seg.clone());
            }
        }
    }
    pools
}

const PLACEMENT_ATTEMPTS: usize = 1000;
const SEGMENT_REDRAWS: usize = 10;

/// Build a synthetic corpus from a source corpus and its segments.
///
/// Per recording: a noise background is drawn and cut to the configured
/// duration, `k` labels are drawn without replacement, and for each label
/// a pooled segment is pasted at its original rows and a random column
/// such that no two planted boxes overlap. Placement retries up to 1000
/// positions before redrawing the segment. Each assembled recording is
/// re-normalized to a maximum of 1.0.
pub fn build_synthetic_corpus(
    source: &SpectrogramCorpus,
    segments_by_recording: &BTreeMap<String, Vec<Segment>>,
    cfg: &SyntheticConfig,
) -> Result<(SpectrogramCorpus, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let pools = build_segment_pools(source, segments_by_recording, cfg.min_segment_px);
    let eligible_labels: Vec<&SpeciesLabel> = pools.keys().collect();
    if eligible_labels.len() < cfg.labels_min {
        let wanted = cfg.labels_min;
        return Err(Error::InvalidInput(format!(
            "need at least {wanted} single-label species with usable segments, found {}",
            eligible_labels.len()
        )));
    }

    // Noise backgrounds: unlabelled recordings long enough for the cut.
    let mut noise: Vec<(&String, &LabelledSpectrogram, usize)> = Vec::new();
    let mut max_required = 0;
    for (id, entry) in source.iter() {
        if !entry.weak_labels.is_empty() {
            continue;
        }
        let samples = (cfg.duration_s * entry.spec.sample_rate as f64).round() as usize;
        let required = frame_count(samples, entry.spec.params.window_size, entry.spec.params.hop);
        max_required = max_required.max(required);
        if required > 0 && entry.spec.cols() >= required {
            noise.push((id, entry, required));
        }
    }
    if noise.is_empty() {
        return Err(Error::NoNoiseBackground {
            required: max_required,
        });
    }

    let mut corpus = SpectrogramCorpus::new();
    let mut truth = GroundTruth::default();

    for i in 0..cfg.recording_count {
        let recording_id = format!("synth{i:03}");
        let &(_, bg_entry, frames) = noise.choose(&mut rng).expect("noise is non-empty");
        let start = rng.random_range(0..=bg_entry.spec.cols() - frames);
        let mut values = bg_entry
            .spec
            .values
            .slice(ndarray::s![.., start..start + frames])
            .to_owned();

        let label_count =
            rng.random_range(cfg.labels_min..=cfg.labels_max.min(eligible_labels.len()));
        let drawn = rand::seq::index::sample(&mut rng, eligible_labels.len(), label_count);
        let mut drawn_labels: Vec<&SpeciesLabel> =
            drawn.iter().map(|idx| eligible_labels[idx]).collect();
        drawn_labels.sort();

        let mut plants: Vec<PlantedSegment> = Vec::new();
        let rows = values.nrows();
        let cols = values.ncols();
        for label in &drawn_labels {
            let pool = &pools[*label];
            let mut placed = false;
            'redraw: for _ in 0..SEGMENT_REDRAWS {
                let seg = pool.choose(&mut rng).ok_or_else(|| Error::NoSegmentsForLabel {
                    label: label.as_str().to_string(),
                    min_px: cfg.min_segment_px,
                })?;
                let (ph, pw) = seg.patch.dim();
                // Patches keep their original rows; frequency is part of
                // what identifies a species.
                let row = seg.bbox.row_min;
                if row + ph > rows || pw > cols {
                    continue 'redraw;
                }
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let col = rng.random_range(0..=cols - pw);
                    let bbox = BBox {
                        row_min: row,
                        row_max: row + ph - 1,
                        col_min: col,
                        col_max: col + pw - 1,
                    };
                    if plants.iter().any(|p| p.bbox.intersection_area(&bbox) > 0) {
                        continue;
                    }
                    paste_patch_into(&mut values, seg.patch.view(), (row, col))?;
                    plants.push(PlantedSegment {
                        label: (*label).clone(),
                        bbox,
                        source_segment: seg.id.clone(),
                    });
                    placed = true;
                    break 'redraw;
                }
            }
            if !placed {
                return Err(Error::PlacementFailed {
                    recording: recording_id.clone(),
                    label: label.as_str().to_string(),
                });
            }
        }

        // Max-combining normalized inputs keeps values in [0, 1]; the
        // final normalization pins the maximum back to exactly 1.0.
        let max = values.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            values.mapv_inplace(|v| v / max);
        }

        let weak_labels: LabelSet = drawn_labels.iter().map(|l| (*l).clone()).collect();
        corpus.insert(LabelledSpectrogram {
            spec: Spectrogram {
                values,
                params: bg_entry.spec.params.clone(),
                row_offset: bg_entry.spec.row_offset,
                recording_id: recording_id.clone(),
                sample_rate: bg_entry.spec.sample_rate,
            },
            weak_labels,
        })?;
        truth.recordings.insert(recording_id, plants);
    }

    Ok((corpus, truth))
}

/// How well segmentation recovers the planted boxes of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantednessReport {
    pub plants_total: usize,
    pub plants_recovered: usize,
    pub spurious_segments: usize,
}

impl PlantednessReport {
    pub fn all_recovered(&self) -> bool {
        self.plants_recovered == self.plants_total
    }
}

/// Re-segment every synthetic recording and count how many planted boxes
/// are overlapped by at least one detection.
pub fn check_plantedness(
    corpus: &SpectrogramCorpus,
    truth: &GroundTruth,
    params: &SegmentationParams,
) -> PlantednessReport {
    let mut report = PlantednessReport {
        plants_total: 0,
        plants_recovered: 0,
        spurious_segments: 0,
    };
    for (id, entry) in corpus.iter() {
        let detected = segmentation::segment_spectrogram(&entry.spec, params);
        let plants = truth.recordings.get(id).map(Vec::as_slice).unwrap_or(&[]);
        report.plants_total += plants.len();
        for plant in plants {
            if detected
                .iter()
                .any(|seg| seg.bbox.intersection_area(&plant.bbox) > 0)
            {
                report.plants_recovered += 1;
            }
        }
        report.spurious_segments += detected
            .iter()
            .filter(|seg| {
                plants
                    .iter()
                    .all(|plant| seg.bbox.intersection_area(&plant.bbox) == 0)
            })
            .count();
    }
    report
}

/// Configuration of the demo source-corpus generator.
///
/// Each species gets a deterministic random texture pattern; every
/// source recording plants variants of its species' pattern on low
/// uniform noise. With `variant_jitter`, within-species plants differ
/// from recording to recording so that matching is imperfect, the way
/// real repertoires are.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCorpusConfig {
    pub species: usize,
    pub recordings_per_species: usize,
    pub noise_recordings: usize,
    pub rows: usize,
    pub cols: usize,
    pub pattern_rows: usize,
    pub pattern_cols: usize,
    pub plants_per_recording: usize,
    /// 0.0 plants identical patterns; larger values blend per-recording
    /// noise into each plant.
    pub variant_jitter: f32,
    /// Probability that a plant is a one-off vocalization unique to its
    /// recording instead of the species pattern. Unique calls cannot be
    /// matched anywhere else, the way unusually complex real
    /// vocalizations cannot.
    pub unique_voc_rate: f32,
    pub pattern_style: PatternStyle,
    pub noise_level: f32,
    pub seed: u64,
}

/// Shape family of generated vocalization patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatternStyle {
    /// Sloped chirp-like ridge traces. Distinct traces are close to
    /// uncorrelated, so one-off calls genuinely fail to match.
    #[default]
    Trace,
    /// Dense random-texture blocks. Mutual correlation of bare patterns
    /// is tiny, but any two blocks share the bright-rectangle outline,
    /// so detected patches of the same size always resemble each other.
    Texture,
}

impl Default for SourceCorpusConfig {
    fn default() -> Self {
        Self {
            species: 12,
            recordings_per_species: 2,
            noise_recordings: 4,
            rows: 229,
            cols: 1_800,
            pattern_rows: 18,
            pattern_cols: 26,
            plants_per_recording: 2,
            variant_jitter: 0.0,
            unique_voc_rate: 0.0,
            pattern_style: PatternStyle::Trace,
            noise_level: 0.05,
            seed: 1,
        }
    }
}

/// A generated source corpus plus the per-species patterns it planted.
#[derive(Debug, Clone)]
pub struct SourceCorpus {
    pub corpus: SpectrogramCorpus,
    pub patterns: BTreeMap<SpeciesLabel, Array2<f32>>,
}

fn new_pattern(
    rng: &mut ChaCha8Rng,
    style: PatternStyle,
    rows: usize,
    cols: usize,
) -> Array2<f32> {
    match style {
        PatternStyle::Trace => trace_pattern(rng, rows, cols),
        PatternStyle::Texture => {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.55..0.95f32))
        }
    }
}

/// A connected, chirp-like ridge inside a `rows x cols` rectangle: a
/// sloped random walk a few pixels thick, bright against a zero
/// background. The slope varies per call, so independent traces cross
/// rather than run parallel and stay nearly uncorrelated.
fn trace_pattern(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    let thickness = (rows / 6).clamp(3, 5).min(rows);
    let mut values = Array2::zeros((rows, cols));
    let max_top = rows - thickness;
    let run = cols.saturating_sub(1).max(1) as f32;
    let max_slope = (max_top as f32 / run).min(1.0);
    let slope = rng.random_range(-1.0f32..1.0) * max_slope;
    let span = (slope.abs() * run).round() as usize;
    let start_range = max_top - span.min(max_top);
    let mut base = rng.random_range(0..=start_range) as f32;
    if slope < 0.0 {
        base += span as f32;
    }
    let mut wobble = 0i32;
    for c in 0..cols {
        if rng.random_range(0.0..1.0f32) < 0.3 {
            wobble += rng.random_range(-1i32..=1);
        }
        let top = ((base + slope * c as f32).round() as i32 + wobble).clamp(0, max_top as i32);
        for t in 0..thickness {
            values[(top as usize + t, c)] = rng.random_range(0.6..0.95f32);
        }
    }
    values
}

/// Generate a labelled source corpus of synthetic species patterns.
///
/// Species are named `sp00`, `sp01`, ... with recordings `sp00_r0` etc.;
/// noise recordings are `noise0`, ... with empty label sets.
pub fn build_source_corpus(cfg: &SourceCorpusConfig) -> Result<SourceCorpus> {
    if cfg.species == 0 || cfg.rows < cfg.pattern_rows || cfg.cols < cfg.pattern_cols {
        return Err(Error::InvalidInput("source corpus config is degenerate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = SpectrogramCorpus::new();
    let mut patterns = BTreeMap::new();

    let spec_of = |id: &str, values: Array2<f32>| Spectrogram {
        values,
        params: Default::default(),
        row_offset: 4,
        recording_id: id.to_string(),
        sample_rate: 44_100,
    };

    // Species patterns, each anchored to its own frequency band; bands
    // are spread evenly so distinct species sit at distinct rows.
    let span = cfg.rows - cfg.pattern_rows;
    let stride = (span / cfg.species.max(1)).max(1);
    let mut home_rows = Vec::with_capacity(cfg.species);
    for s in 0..cfg.species {
        let label = SpeciesLabel::new(format!("sp{s:02}"));
        let pattern = new_pattern(&mut rng, cfg.pattern_style, cfg.pattern_rows, cfg.pattern_cols);
        patterns.insert(label, pattern);
        home_rows.push((s * stride).min(span));
    }

    for (s, (label, pattern)) in patterns.iter().enumerate() {
        for r in 0..cfg.recordings_per_species {
            let id = format!("{}_r{r}", label.as_str());
            let mut values = Array2::from_shape_fn((cfg.rows, cfg.cols), |_| {
                rng.random_range(0.0..cfg.noise_level)
            });
            let variant = if cfg.variant_jitter > 0.0 {
                let jitter = cfg.variant_jitter;
                // amplitude jitter on the trace only; the path is the call
                pattern.mapv(|v| {
                    if v > 0.0 {
                        (v + rng.random_range(-jitter..jitter)).clamp(0.3, 1.0)
                    } else {
                        0.0
                    }
                })
            } else {
                pattern.clone()
            };
            let mut placed: Vec<BBox> = Vec::new();
            for _ in 0..cfg.plants_per_recording {
                let one_off = rng.random_range(0.0..1.0f32) < cfg.unique_voc_rate;
                let plant_pattern = if one_off {
                    new_pattern(&mut rng, cfg.pattern_style, cfg.pattern_rows, cfg.pattern_cols)
                } else {
                    variant.clone()
                };
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let col = rng.random_range(0..=cfg.cols - cfg.pattern_cols);
                    let bbox = BBox {
                        row_min: home_rows[s],
                        row_max: home_rows[s] + cfg.pattern_rows - 1,
                        col_min: col,
                        col_max: col + cfg.pattern_cols - 1,
                    };
                    // Keep plants a little apart so they segment separately.
                    if placed
                        .iter()
                        .any(|b| b.padded(12, cfg.rows, cfg.cols).intersection_area(&bbox) > 0)
                    {
                        continue;
                    }
                    paste_patch_into(&mut values, plant_pattern.view(), (bbox.row_min, bbox.col_min))?;
                    placed.push(bbox);
                    break;
                }
            }
            if placed.is_empty() {
                return Err(Error::PlacementFailed {
                    recording: id,
                    label: label.as_str().to_string(),
                });
            }
            let max = values.iter().copied().fold(0.0f32, f32::max);
            values.mapv_inplace(|v| v / max);
            corpus.insert(LabelledSpectrogram {
                spec: spec_of(&id, values),
                weak_labels: LabelSet::from([label.clone()]),
            })?;
        }
    }

    for n in 0..cfg.noise_recordings {
        let id = format!("noise{n}");
        let values = Array2::from_shape_fn((cfg.rows, cfg.cols), |_| {
            rng.random_range(0.0..cfg.noise_level)
        });
        corpus.insert(LabelledSpectrogram {
            spec: spec_of(&id, values),
            weak_labels: LabelSet::new(),
        })?;
    }

    Ok(SourceCorpus { corpus, patterns })
}

/// Segment every recording of a corpus, keyed by recording id.
pub fn segment_corpus(
    corpus: &SpectrogramCorpus,
    params: &SegmentationParams,
) -> BTreeMap<String, Vec<Segment>> {
    use rayon::prelude::*;
    let entries: Vec<(&String, &LabelledSpectrogram)> = corpus.iter().collect();
    entries
        .par_iter()
        .map(|(id, entry)| {
            (
                (*id).clone(),
                segmentation::segment_spectrogram(&entry.spec, params),
            )
        })
        .collect()
}
