//! `birdvoc`: spectrogram segmentation and weak-label classification of
//! bird vocalizations, with synthetic-corpus generation and scoring.
//!
//! Every command is a pure function of its inputs, the configuration and
//! the seed: re-runs produce byte-identical outputs, and `--threads`
//! changes only wall time. Progress goes to stderr, data to files and
//! stdout. Exit codes: 2 for usage and input problems, 1 for internal
//! failures.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use birdvoc_core::classification::{
    classify_corpus, read_assignments_jsonl, rehydrate_segments, write_assignments_jsonl,
    RecordingSegments,
};
use birdvoc_core::corpus::{load_spectrogram_corpus, SpectrogramCorpus};
use birdvoc_core::error::Error as CoreError;
use birdvoc_core::evaluation::{report_csv, report_text, score_records};
use birdvoc_core::segmentation::{read_segments_jsonl, write_segments_jsonl, Segment};
use birdvoc_core::spectrogram;
use birdvoc_core::synthgen::{
    build_source_corpus, build_synthetic_corpus, check_plantedness, read_ground_truth,
    segment_corpus, write_ground_truth, SourceCorpusConfig,
};

use config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "birdvoc",
    about = "Detect bird vocalizations in spectrograms and classify them from weak labels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Flat key=value configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (0 = one per core). Affects wall time only.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Segment every recording of a corpus into candidate vocalizations.
    Segment {
        /// Corpus manifest (`recording_id,labels` CSV next to the files).
        #[arg(long)]
        corpus: PathBuf,
        /// Output JSON Lines path.
        #[arg(long)]
        out: PathBuf,
        /// Also write spectrogram PNGs with segment boxes to `<out dir>/png/`.
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Classify segments against a corpus using weak labels.
    Classify {
        /// Corpus searched for matches.
        #[arg(long)]
        corpus: PathBuf,
        /// Segments to classify (JSON Lines from `segment`).
        #[arg(long)]
        segments: PathBuf,
        /// Corpus the segments belong to; defaults to `--corpus`
        /// (self-classification with source exclusion).
        #[arg(long)]
        segments_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Build a seeded synthetic corpus with ground truth from a source corpus.
    Synth {
        #[arg(long)]
        source: PathBuf,
        /// Output directory (manifest, .spec files, ground_truth.jsonl).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Score assignments against ground truth.
    Eval {
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// CSV report path; the text table goes to stdout.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Synthesize, segment, classify and score in one run.
    RunAll {
        #[arg(long)]
        source: PathBuf,
        /// Output directory for all artifacts.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Generate a demo labelled source corpus of synthetic patterns.
    GenSource {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        species: usize,
        #[arg(long, default_value_t = 3)]
        recordings_per_species: usize,
        #[arg(long, default_value_t = 4)]
        noise: usize,
        #[arg(long, default_value_t = 229)]
        rows: usize,
        #[arg(long, default_value_t = 1800)]
        cols: usize,
        /// Within-species pattern variation (0 = identical plants).
        #[arg(long, default_value_t = 0.3)]
        jitter: f32,
        /// Probability that a plant is unique to its recording.
        #[arg(long, default_value_t = 0.2)]
        unique_rate: f32,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input or I/O, 1 for internal failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::TemplateTooLarge { .. })
        | Some(CoreError::PatchOutOfBounds { .. })
        | Some(CoreError::PlacementFailed { .. }) => 1,
        Some(_) => 2,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some() {
                2
            } else {
                2
            }
        }
    }
}

fn load_config(common: &CommonOpts) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    if config.threads > 0 {
        // Ignore the error when a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment { corpus, out, png, common } => {
            let config = load_config(&common)?;
            cmd_segment(&corpus, &out, png, &config)
        }
        Command::Classify { corpus, segments, segments_corpus, out, common } => {
            let config = load_config(&common)?;
            cmd_classify(&corpus, &segments, segments_corpus.as_deref(), &out, &config)
        }
        Command::Synth { source, out, common } => {
            let config = load_config(&common)?;
            cmd_synth(&source, &out, &config)
        }
        Command::Eval { assignments, truth, out, common } => {
            let _config = load_config(&common)?;
            cmd_eval(&assignments, &truth, &out)
        }
        Command::RunAll { source, out, png, common } => {
            let config = load_config(&common)?;
            cmd_run_all(&source, &out, png, &config)
        }
        Command::GenSource {
            out,
            species,
            recordings_per_species,
            noise,
            rows,
            cols,
            jitter,
            unique_rate,
            common,
        } => {
            let config = load_config(&common)?;
            let source_config = SourceCorpusConfig {
                species,
                recordings_per_species,
                noise_recordings: noise,
                rows,
                cols,
                variant_jitter: jitter,
                unique_voc_rate: unique_rate,
                seed: config.seed,
                ..SourceCorpusConfig::default()
            };
            cmd_gen_source(&out, &source_config)
        }
    }
}

fn load_corpus(manifest: &Path, config: &PipelineConfig) -> Result<SpectrogramCorpus> {
    if !manifest.exists() {
        anyhow::bail!(CoreError::Io {
            path: manifest.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        });
    }
    Ok(load_spectrogram_corpus(manifest, &config.spectrogram_params())?)
}

fn segment_with_config(
    corpus: &SpectrogramCorpus,
    config: &PipelineConfig,
) -> BTreeMap<String, Vec<Segment>> {
    segment_corpus(corpus, &config.segmentation_params())
}

fn write_segment_artifacts(
    corpus: &SpectrogramCorpus,
    segments: &BTreeMap<String, Vec<Segment>>,
    out: &Path,
    png: bool,
) -> Result<()> {
    let flat: Vec<&Segment> = segments.values().flatten().collect();
    write_segments_jsonl(out, flat.iter().copied())?;
    let total: usize = segments.values().map(Vec::len).sum();
    eprintln!("wrote {} segments to {}", total, out.display());

    if png {
        let dir = out.parent().unwrap_or_else(|| Path::new(".")).join("png");
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        for (id, entry) in corpus.iter() {
            let boxes: Vec<(usize, usize, usize, usize)> = segments
                .get(id)
                .map(|segs| {
                    segs.iter()
                        .map(|s| (s.bbox.row_min, s.bbox.row_max, s.bbox.col_min, s.bbox.col_max))
                        .collect()
                })
                .unwrap_or_default();
            spectrogram::write_png_with_boxes(&entry.spec, &boxes, &dir.join(format!("{id}.png")))?;
        }
        eprintln!("wrote {} overlay images to {}", corpus.len(), dir.display());
    }
    Ok(())
}

fn cmd_segment(manifest: &Path, out: &Path, png: bool, config: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(manifest, config)?;
    eprintln!("segmenting {} recordings", corpus.len());
    let segments = segment_with_config(&corpus, config);
    write_segment_artifacts(&corpus, &segments, out, png)
}

fn cmd_classify(
    corpus_path: &Path,
    segments_path: &Path,
    segments_corpus_path: Option<&Path>,
    out: &Path,
    config: &PipelineConfig,
) -> Result<()> {
    let search = load_corpus(corpus_path, config)?;
    let records = read_segments_jsonl(segments_path)?;
    let items = match segments_corpus_path {
        Some(path) if path != corpus_path => {
            let owners = load_corpus(path, config)?;
            rehydrate_segments(&records, &owners)?
        }
        _ => rehydrate_segments(&records, &search)?,
    };
    let total: usize = items.iter().map(|i| i.segments.len()).sum();
    eprintln!(
        "classifying {} segments against {} recordings",
        total,
        search.len()
    );
    let state = classify_corpus(&search, items, &config.classification_params())?;
    write_assignments_jsonl(out, &state)?;
    eprintln!("wrote assignments to {}", out.display());
    Ok(())
}

fn cmd_synth(source_path: &Path, out_dir: &Path, config: &PipelineConfig) -> Result<()> {
    let source = load_corpus(source_path, config)?;
    eprintln!("segmenting source corpus ({} recordings)", source.len());
    let segments = segment_with_config(&source, config);
    let (synthetic, truth) =
        build_synthetic_corpus(&source, &segments, &config.synthetic_config())?;
    synthetic.save(out_dir)?;
    write_ground_truth(&out_dir.join("ground_truth.jsonl"), &truth)?;
    let report = check_plantedness(&synthetic, &truth, &config.segmentation_params());
    eprintln!(
        "synthetic corpus: {} recordings, {} planted segments ({} recovered by segmentation, \
         {} spurious) -> {}",
        synthetic.len(),
        truth.total_plants(),
        report.plants_recovered,
        report.spurious_segments,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(assignments: &Path, truth_path: &Path, out: &Path) -> Result<()> {
    let records = read_assignments_jsonl(assignments)?;
    let truth = read_ground_truth(truth_path)?;
    let report = score_records(&records, &truth)?;
    std::fs::write(out, report_csv(&report))
        .with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report_text(&report));
    Ok(())
}

fn cmd_run_all(source_path: &Path, out_dir: &Path, png: bool, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let source = load_corpus(source_path, config)?;

    eprintln!("[1/4] synthesizing evaluation corpus");
    let source_segments = segment_with_config(&source, config);
    let (synthetic, truth) =
        build_synthetic_corpus(&source, &source_segments, &config.synthetic_config())?;
    let synth_dir = out_dir.join("synthetic");
    synthetic.save(&synth_dir)?;
    let truth_path = out_dir.join("ground_truth.jsonl");
    write_ground_truth(&truth_path, &truth)?;

    eprintln!("[2/4] segmenting {} synthetic recordings", synthetic.len());
    let detected = segment_with_config(&synthetic, config);
    let segments_path = out_dir.join("segments.jsonl");
    write_segment_artifacts(&synthetic, &detected, &segments_path, png)?;

    eprintln!("[3/4] classifying against the source corpus");
    let items: Vec<RecordingSegments> = synthetic
        .iter()
        .map(|(id, entry)| RecordingSegments {
            recording_id: id.clone(),
            weak_labels: entry.weak_labels.clone(),
            segments: detected.get(id).cloned().unwrap_or_default(),
        })
        .collect();
    let state = classify_corpus(&source, items, &config.classification_params())?;
    let assignments_path = out_dir.join("assignments.jsonl");
    write_assignments_jsonl(&assignments_path, &state)?;

    eprintln!("[4/4] scoring");
    let records = read_assignments_jsonl(&assignments_path)?;
    let report = score_records(&records, &truth)?;
    std::fs::write(out_dir.join("report.csv"), report_csv(&report))?;
    std::fs::write(out_dir.join("report.txt"), report_text(&report))?;
    print!("{}", report_text(&report));
    Ok(())
}

fn cmd_gen_source(out_dir: &Path, config: &SourceCorpusConfig) -> Result<()> {
    let source = build_source_corpus(config)?;
    source.corpus.save(out_dir)?;
    eprintln!(
        "wrote source corpus: {} species x {} recordings + {} noise -> {}",
        config.species,
        config.recordings_per_species,
        config.noise_recordings,
        out_dir.display()
    );
    Ok(())
}
