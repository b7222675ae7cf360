//! Acceptance suite: one test per shipped criterion, each printing a
//! PASS line with the measured numbers (run with `-- --nocapture`).

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use birdvoc_core::classification::{
    classify_corpus, ClassificationParams, ClassificationState, DecidedBy, RecordingSegments,
};
use birdvoc_core::corpus::{LabelSet, LabelledSpectrogram, SpeciesLabel, SpectrogramCorpus};
use birdvoc_core::evaluation::{score_state, PassScores};
use birdvoc_core::matching::{best_match, ncc_map};
use birdvoc_core::segmentation::{segment_spectrogram, BBox, Segment, SegmentationParams};
use birdvoc_core::spectrogram::{normalize, Spectrogram, SpectrogramParams};
use birdvoc_core::synthgen::{
    build_source_corpus, build_synthetic_corpus, segment_corpus, PatternStyle,
    SourceCorpusConfig, SyntheticConfig,
};

use common::{as_patch, blend, ncc_oracle, orthonormal_patterns, plant, random_matrix};

fn spec_of(id: &str, values: Array2<f32>) -> Spectrogram {
    Spectrogram {
        values,
        params: SpectrogramParams::default(),
        row_offset: 4,
        recording_id: id.into(),
        sample_rate: 44_100,
    }
}

fn segment_at(recording_id: &str, idx: usize, patch: Array2<f32>, row: usize, col: usize) -> Segment {
    Segment {
        id: format!("{recording_id}#{idx}"),
        recording_id: recording_id.into(),
        bbox: BBox {
            row_min: row,
            row_max: row + patch.nrows() - 1,
            col_min: col,
            col_max: col + patch.ncols() - 1,
        },
        pixel_count: patch.len(),
        patch,
    }
}

/// A1: the fast correlation kernel agrees with the definition oracle to
/// 1e-6 on seeded random instances and stays within [-1, 1].
#[test]
fn a1_ncc_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let template = random_matrix(&mut rng, 8, 8);
        let target = random_matrix(&mut rng, 32, 32);
        let fast = ncc_map(template.view(), target.view()).unwrap();
        let slow = ncc_oracle(&template, &target);
        for (pos, &v) in fast.indexed_iter() {
            assert!((-1.0..=1.0).contains(&v), "value {v} out of range at {pos:?}");
            max_err = max_err.max((v - slow[pos]).abs());
        }
    }
    let elapsed = start.elapsed();
    assert!(max_err <= 1e-6, "max |fast - oracle| = {max_err:e}");
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "[A1] PASS ncc oracle equivalence: 100 pairs, max err {max_err:.2e}, {:.2}s",
        elapsed.as_secs_f64()
    );
}

/// A2: segmentation recovers exactly the planted rectangles, with padded
/// boxes inside the allowed slack and zero spurious detections.
#[test]
fn a2_segmentation_plantedness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    let (rows, cols) = (120usize, 400usize);
    let params = SegmentationParams::default();
    let slack = 13; // pad 5 + morphology growth budget 8

    for image in 0..20 {
        let mut values = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..0.05f32));
        let mut patches: Vec<BBox> = Vec::new();
        while patches.len() < 3 {
            let h = rng.random_range(12..=16);
            let w = rng.random_range(13..=18);
            assert!(h * w >= 150);
            let r0 = rng.random_range(0..rows - h);
            let c0 = rng.random_range(0..cols - w);
            let bbox = BBox {
                row_min: r0,
                row_max: r0 + h - 1,
                col_min: c0,
                col_max: c0 + w - 1,
            };
            if patches
                .iter()
                .any(|b| b.padded(10, rows, cols).intersection_area(&bbox) > 0)
            {
                continue;
            }
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    values[(r, c)] = 0.9;
                }
            }
            patches.push(bbox);
        }

        let spec = normalize(spec_of(&format!("a2_{image}"), values));
        let segments = segment_spectrogram(&spec, &params);
        assert_eq!(segments.len(), 3, "image {image}: {} segments", segments.len());
        for patch in &patches {
            let hits: Vec<&Segment> = segments
                .iter()
                .filter(|s| s.bbox.intersection_area(patch) > 0)
                .collect();
            assert_eq!(hits.len(), 1, "image {image}: patch {patch:?} hit {}", hits.len());
            let allowed = patch.padded(slack, rows, cols);
            let seg = hits[0].bbox;
            assert!(
                seg.row_min >= allowed.row_min
                    && seg.row_max <= allowed.row_max
                    && seg.col_min >= allowed.col_min
                    && seg.col_max <= allowed.col_max,
                "image {image}: bbox {seg:?} exceeds {allowed:?}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "[A2] PASS segmentation plantedness: 20 images x 3 patches, zero spurious, {:.2}s",
        elapsed.as_secs_f64()
    );
}

/// A3: a six-recording micro-corpus drives both repair passes exactly:
/// an unallocated label plus a match-not-found segment resolves through
/// the first variation, and a duplicated label resolves through the
/// second variation at the expected score.
#[test]
fn a3_algorithm_trace_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    let pats = orthonormal_patterns(&mut rng, 6, 20, 30);
    let (pa, px, pb, pd, pe, pw) = (&pats[0], &pats[1], &pats[2], &pats[3], &pats[4], &pats[5]);
    // q correlates 0.8 with the D pattern and 0.57 with the E pattern.
    let gamma = (1.0f64 - 0.8 * 0.8 - 0.57 * 0.57).sqrt();
    let q = pd * 0.8 + pe * 0.57 + pw * gamma;

    let (rows, cols) = (100, 300);
    let zeros = || Array2::<f32>::zeros((rows, cols));
    let (case1_row, case2_row) = (30, 60);

    let mut corpus = SpectrogramCorpus::new();
    let mut add = |id: &str, names: &[&str], values: Array2<f32>| {
        corpus
            .insert(LabelledSpectrogram {
                spec: spec_of(id, values),
                weak_labels: names.iter().map(|n| SpeciesLabel::new(*n)).collect(),
            })
            .unwrap();
    };

    let mut r1 = zeros();
    plant(&mut r1, &as_patch(pa), case1_row, 40);
    plant(&mut r1, &as_patch(px), case1_row, 120);
    add("r1", &["A", "B"], r1);

    let mut r2 = zeros();
    plant(&mut r2, &as_patch(pd), case2_row, 30);
    plant(&mut r2, &as_patch(pd), case2_row, 110);
    plant(&mut r2, &as_patch(&q), case2_row, 200);
    add("r2", &["D", "E"], r2);

    let mut r3 = zeros();
    plant(&mut r3, &as_patch(pa), case1_row, 90);
    add("r3", &["A"], r3);
    let mut r4 = zeros();
    plant(&mut r4, &as_patch(pb), case1_row, 150);
    add("r4", &["B"], r4);
    let mut r5 = zeros();
    plant(&mut r5, &as_patch(pd), case2_row, 70);
    add("r5", &["D"], r5);
    let mut r6 = zeros();
    plant(&mut r6, &as_patch(pe), case2_row, 140);
    add("r6", &["E"], r6);

    let seg_pa = segment_at("r1", 0, as_patch(pa), case1_row, 40);
    let seg_px = segment_at("r1", 1, as_patch(px), case1_row, 120);
    let seg_d1 = segment_at("r2", 0, as_patch(pd), case2_row, 30);
    let seg_d2 = segment_at("r2", 1, as_patch(pd), case2_row, 110);
    let seg_q = segment_at("r2", 2, as_patch(&q), case2_row, 200);

    // Construction checks: the blend realizes the intended scores and
    // nothing matches the unique pattern.
    let band_pad = 5;
    let v = |seg: &Segment, id: &str| best_match(seg, &corpus.get(id).unwrap().spec, band_pad).value;
    assert!((v(&seg_q, "r5") - 0.8).abs() < 0.01, "q vs D = {}", v(&seg_q, "r5"));
    assert!((v(&seg_q, "r6") - 0.57).abs() < 0.01, "q vs E = {}", v(&seg_q, "r6"));
    assert!(v(&seg_px, "r3") < 0.4 && v(&seg_px, "r4") < 0.4);
    assert!(v(&seg_d1, "r6") < 0.4);

    let items = vec![
        RecordingSegments {
            recording_id: "r1".into(),
            weak_labels: [SpeciesLabel::new("A"), SpeciesLabel::new("B")].into(),
            segments: vec![seg_pa, seg_px],
        },
        RecordingSegments {
            recording_id: "r2".into(),
            weak_labels: [SpeciesLabel::new("D"), SpeciesLabel::new("E")].into(),
            segments: vec![seg_d1, seg_d2, seg_q],
        },
    ];
    let state = classify_corpus(&corpus, items, &ClassificationParams::default()).unwrap();

    let single = |name: &str| {
        birdvoc_core::classification::CandidateLabelSet::single(SpeciesLabel::new(name))
    };

    // Case 1: A is matched, the unique pattern goes MNF, the first
    // variation hands it the unallocated B.
    let case1 = &state.recordings[0];
    assert_eq!(case1.segments[0].candidate, single("A"));
    assert_eq!(case1.segments[0].decided_by, DecidedBy::FirstPass);
    assert!(case1.segments[1].candidate_first_pass.is_mnf());
    assert_eq!(case1.segments[1].candidate, single("B"));
    assert_eq!(case1.segments[1].decided_by, DecidedBy::Var1);

    // Case 2: all three segments first get D; the second variation
    // reassigns the best-scoring duplicate to the unallocated E.
    let case2 = &state.recordings[1];
    for seg in &case2.segments {
        assert_eq!(seg.candidate_first_pass, single("D"));
        assert_eq!(seg.candidate_var1, single("D"));
    }
    assert_eq!(case2.segments[0].candidate, single("D"));
    assert_eq!(case2.segments[1].candidate, single("D"));
    assert_eq!(case2.segments[2].candidate, single("E"));
    assert_eq!(case2.segments[2].decided_by, DecidedBy::Var2);
    let score = case2.segments[2].score_sum.unwrap();
    assert!((score - 0.57).abs() < 0.01, "var2 score = {score}");

    println!(
        "[A3] PASS algorithm trace: case1 var1 repair, case2 var2 reassignment at {score:.2}"
    );
}

fn items_for(
    corpus: &SpectrogramCorpus,
    detected: &BTreeMap<String, Vec<Segment>>,
) -> Vec<RecordingSegments> {
    corpus
        .iter()
        .map(|(id, entry)| RecordingSegments {
            recording_id: id.clone(),
            weak_labels: entry.weak_labels.clone(),
            segments: detected.get(id).cloned().unwrap_or_default(),
        })
        .collect()
}

fn pct(scores: &PassScores) -> (f64, f64, f64) {
    scores.percentages()
}

/// A4: ten species with mutually near-orthogonal patterns are recovered
/// almost perfectly by the full pipeline, with zero wrong labels.
#[test]
fn a4_distinct_template_recovery() {
    let start = Instant::now();
    let source_cfg = SourceCorpusConfig {
        species: 10,
        recordings_per_species: 2,
        noise_recordings: 3,
        rows: 340,
        cols: 700,
        pattern_rows: 16,
        pattern_cols: 24,
        plants_per_recording: 2,
        variant_jitter: 0.0,
        unique_voc_rate: 0.0,
        pattern_style: PatternStyle::Texture,
        noise_level: 0.05,
        seed: 77,
    };
    let source = build_source_corpus(&source_cfg).unwrap();

    // Verified at build time: pairwise pattern correlation stays low.
    let patterns: Vec<_> = source.patterns.values().collect();
    let mut max_cross = 0.0f64;
    for i in 0..patterns.len() {
        for j in i + 1..patterns.len() {
            let cross = ncc_map(patterns[i].view(), patterns[j].view()).unwrap()[(0, 0)].abs();
            max_cross = max_cross.max(cross);
        }
    }
    assert!(max_cross < 0.2, "max pairwise pattern ncc = {max_cross}");

    let seg_params = SegmentationParams::default();
    let source_segments = segment_corpus(&source.corpus, &seg_params);
    let synth_cfg = SyntheticConfig {
        recording_count: 20,
        duration_s: 2.0,
        labels_min: 2,
        labels_max: 3,
        min_segment_px: 0,
        rng_seed: 0xA4,
    };
    let (synthetic, truth) =
        build_synthetic_corpus(&source.corpus, &source_segments, &synth_cfg).unwrap();
    let detected = segment_corpus(&synthetic, &seg_params);
    let items = items_for(&synthetic, &detected);
    let state = classify_corpus(&source.corpus, items, &ClassificationParams::default()).unwrap();
    let report = score_state(&state, &truth).unwrap();

    let (correct, wrong, unknown) = pct(&report.var2);
    assert!(correct >= 90.0, "correct = {correct}%");
    assert_eq!(report.var2.wrong, 0, "wrong = {} segments", report.var2.wrong);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "[A4] PASS distinct templates: {correct:.1}% correct / {wrong:.1}% wrong / {unknown:.1}% \
         unknown over {} segments (max cross ncc {max_cross:.3}), {:.1}s",
        report.n_evaluated,
        elapsed.as_secs_f64()
    );
}

/// A5: five seeded paper-style corpora reproduce the directional
/// behavior of the three passes.
#[test]
fn a5_directional_reproduction() {
    let source_cfg = SourceCorpusConfig {
        species: 12,
        recordings_per_species: 3,
        noise_recordings: 4,
        rows: 520,
        cols: 1_800,
        pattern_rows: 26,
        pattern_cols: 26,
        plants_per_recording: 3,
        variant_jitter: 0.25,
        unique_voc_rate: 0.35,
        pattern_style: PatternStyle::Trace,
        noise_level: 0.05,
        seed: 4242,
    };
    let source = build_source_corpus(&source_cfg).unwrap();
    let seg_params = SegmentationParams::default();
    let all_segments = segment_corpus(&source.corpus, &seg_params);

    // Plant from the `_r0` donors and search only the remainder, so
    // matches face the usual within-species variation.
    let donor_segments: BTreeMap<String, Vec<Segment>> = all_segments
        .iter()
        .filter(|(id, _)| id.ends_with("_r0"))
        .map(|(id, segs)| (id.clone(), segs.clone()))
        .collect();
    let mut search = SpectrogramCorpus::new();
    for (id, entry) in source.corpus.iter() {
        if !id.ends_with("_r0") {
            search.insert(entry.clone()).unwrap();
        }
    }

    let mut beats_chance = 0;
    for seed in [101u64, 202, 303, 404, 505] {
        let cfg = SyntheticConfig::with_seed(seed);
        let (synthetic, truth) =
            build_synthetic_corpus(&source.corpus, &donor_segments, &cfg).unwrap();
        let detected = segment_corpus(&synthetic, &seg_params);
        let items = items_for(&synthetic, &detected);
        let state = classify_corpus(&search, items, &ClassificationParams::default()).unwrap();
        let report = score_state(&state, &truth).unwrap();

        let (c_fp, w_fp, u_fp) = pct(&report.first_pass);
        let (c_v1, w_v1, u_v1) = pct(&report.var1);
        let (c_v2, w_v2, u_v2) = pct(&report.var2);
        println!(
            "[A5] seed {seed}: first-pass {c_fp:.1}/{w_fp:.1}/{u_fp:.1}  \
             var1 {c_v1:.1}/{w_v1:.1}/{u_v1:.1}  var2 {c_v2:.1}/{w_v2:.1}/{u_v2:.1}  \
             ({} evaluated, {} spurious)",
            report.n_evaluated, report.spurious_detections
        );

        assert!(c_v2 >= c_fp, "seed {seed}: correct fell {c_fp} -> {c_v2}");
        assert!(u_v1 <= u_fp, "seed {seed}: unknown rose {u_fp} -> {u_v1}");
        for (c, w, u) in [(c_fp, w_fp, u_fp), (c_v1, w_v1, u_v1), (c_v2, w_v2, u_v2)] {
            assert!((c + w + u - 100.0).abs() <= 0.1 + 1e-9, "sum {c}+{w}+{u}");
        }
        if c_v2 > 33.3 {
            beats_chance += 1;
        }
    }
    assert!(beats_chance >= 4, "only {beats_chance}/5 seeds beat chance");
    println!("[A5] PASS directional reproduction: {beats_chance}/5 seeds beat 33.3% chance");
}

/// A7: the kernel sustains at least ten times the throughput of the
/// definition oracle, and a 50-recording synthetic corpus classifies
/// well inside ten minutes.
#[test]
fn a7_performance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7);
    let template = random_matrix(&mut rng, 8, 8);
    let target = random_matrix(&mut rng, 32, 32);

    let time_per_map = |f: &dyn Fn() -> f64, iters: usize| {
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            let mut sink = 0.0;
            for _ in 0..iters {
                sink += f();
            }
            std::hint::black_box(sink);
            best = best.min(start.elapsed().as_secs_f64() / iters as f64);
        }
        best
    };
    let fast = time_per_map(
        &|| ncc_map(template.view(), target.view()).unwrap()[(0, 0)],
        2_000,
    );
    let slow = time_per_map(&|| ncc_oracle(&template, &target)[(0, 0)], 100);
    let ratio = slow / fast;
    assert!(ratio >= 10.0, "kernel only {ratio:.1}x the oracle");

    // 50-recording synthetic corpus, 5 s recordings, default settings.
    let source_cfg = SourceCorpusConfig {
        species: 12,
        recordings_per_species: 3,
        noise_recordings: 4,
        rows: 520,
        cols: 1_800,
        pattern_rows: 26,
        pattern_cols: 26,
        plants_per_recording: 2,
        variant_jitter: 0.25,
        unique_voc_rate: 0.2,
        pattern_style: PatternStyle::Trace,
        noise_level: 0.05,
        seed: 4242,
    };
    let source = build_source_corpus(&source_cfg).unwrap();
    let seg_params = SegmentationParams::default();
    let source_segments = segment_corpus(&source.corpus, &seg_params);
    let (synthetic, _truth) = build_synthetic_corpus(
        &source.corpus,
        &source_segments,
        &SyntheticConfig::with_seed(0xA7),
    )
    .unwrap();
    let detected = segment_corpus(&synthetic, &seg_params);
    let items = items_for(&synthetic, &detected);

    let start = Instant::now();
    let state = classify_corpus(&source.corpus, items, &ClassificationParams::default()).unwrap();
    let elapsed = start.elapsed();
    let n_segments: usize = state.recordings.iter().map(|r| r.segments.len()).sum();
    assert!(
        elapsed.as_secs_f64() < 600.0,
        "classification took {elapsed:?}"
    );
    println!(
        "[A7] PASS performance: kernel {ratio:.0}x oracle; classified {n_segments} segments \
         of 50 recordings in {:.1}s",
        elapsed.as_secs_f64()
    );
}

/// A6: structural invariants of segmentation, matching, classification
/// and evaluation as properties over generated inputs.
#[test]
fn a6_structural_invariants() {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    use birdvoc_core::classification::{
        variation_1, CandidateLabelSet, RecordingState, SegmentAssignment,
    };
    use birdvoc_core::segmentation::{
        median_clip, morph_close, morph_dilate, remove_small_objects, BinaryMask,
        Connectivity, StructuringElement,
    };

    let mut checks: Vec<&str> = Vec::new();
    let mut run = |name: &'static str, cases: u32, f: &dyn Fn(&mut TestRunner)| {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        f(&mut runner);
        checks.push(name);
    };

    // Median clipping is a ratio test: rescaling by an exactly
    // representable factor cannot change the mask.
    run("median_clip scale invariance", 48, &|runner| {
        let strategy = (
            2usize..12,
            2usize..12,
            proptest::collection::vec(0u16..1024, 4..144),
            prop_oneof![Just(0.25f32), Just(0.5), Just(2.0), Just(8.0), Just(64.0)],
        );
        runner
            .run(&strategy, |(rows, cols, cells, k)| {
                let values = Array2::from_shape_fn((rows, cols), |(r, c)| {
                    cells[(r * cols + c) % cells.len()] as f32 / 1024.0
                });
                let a = median_clip(&spec_of("p", values.clone()), 3.0);
                let b = median_clip(&spec_of("p", values.mapv(|v| v * k)), 3.0);
                prop_assert_eq!(a, b);
                Ok(())
            })
            .unwrap();
    });

    // Morphology: small-object removal is idempotent, dilation is
    // extensive, closing is extensive and idempotent.
    run("morphology idempotence/extensivity", 48, &|runner| {
        let strategy = (
            2usize..14,
            2usize..14,
            proptest::collection::vec(proptest::bool::ANY, 4..196),
            2usize..5,
            1usize..30,
        );
        runner
            .run(&strategy, |(rows, cols, cells, se_size, min_size)| {
                let bits = Array2::from_shape_fn((rows, cols), |(r, c)| {
                    cells[(r * cols + c) % cells.len()]
                });
                let mask = BinaryMask { bits };
                let se = StructuringElement::square(se_size);

                let removed = remove_small_objects(&mask, min_size, Connectivity::Eight);
                let twice = remove_small_objects(&removed, min_size, Connectivity::Eight);
                prop_assert_eq!(&removed, &twice);

                let dilated = morph_dilate(&mask, &se);
                for ((r, c), &set) in mask.bits.indexed_iter() {
                    if set {
                        prop_assert!(dilated.bits[(r, c)], "dilation lost ({r},{c})");
                    }
                }

                let closed = morph_close(&mask, &se);
                for ((r, c), &set) in mask.bits.indexed_iter() {
                    if set {
                        prop_assert!(closed.bits[(r, c)], "closing lost ({r},{c})");
                    }
                }
                let closed_twice = morph_close(&closed, &se);
                prop_assert_eq!(&closed, &closed_twice);
                Ok(())
            })
            .unwrap();
    });

    // The banded search never reads rows outside the padded band:
    // perfect decoys planted out of band change nothing.
    run("best_match band poisoning", 24, &|runner| {
        let strategy = (0u64..1_000_000, 6usize..10, 8usize..14, 18usize..30);
        runner
            .run(&strategy, |(seed, th, tw, row_min)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let patch = random_matrix(&mut rng, th, tw);
                let base = random_matrix(&mut rng, 64, 48);
                let seg = segment_at("p", 0, patch.clone(), row_min, 10);
                let clean = best_match(&seg, &spec_of("t", base.clone()), 5);

                let band_lo = row_min.saturating_sub(5);
                let band_hi = row_min + th - 1 + 5;
                let mut poisoned = base;
                if band_lo >= th {
                    plant(&mut poisoned, &patch, band_lo - th, 3);
                }
                if band_hi + 1 + th <= 64 {
                    plant(&mut poisoned, &patch, band_hi + 1, 20);
                }
                let after = best_match(&seg, &spec_of("t", poisoned), 5);
                prop_assert_eq!(clean, after);
                Ok(())
            })
            .unwrap();
    });

    // Correlation is invariant under positive affine maps of the
    // template; dyadic inputs keep the transform exact in f32.
    run("ncc affine invariance and range", 32, &|runner| {
        let strategy = (
            proptest::collection::vec(0u16..1024, 36..64),
            0u64..1_000_000,
            prop_oneof![Just(2.0f32), Just(4.0), Just(0.5)],
            prop_oneof![Just(0.25f32), Just(0.125), Just(0.0)],
        );
        runner
            .run(&strategy, |(cells, seed, a, b)| {
                let template = Array2::from_shape_fn((6, 6), |(r, c)| {
                    cells[(r * 6 + c) % cells.len()] as f32 / 1024.0
                });
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let target = random_matrix(&mut rng, 20, 20);
                let plain = ncc_map(template.view(), target.view()).unwrap();
                let mapped =
                    ncc_map(template.mapv(|v| a * v + b).view(), target.view()).unwrap();
                for (pos, &v) in plain.indexed_iter() {
                    prop_assert!((-1.0..=1.0).contains(&v));
                    prop_assert!(
                        (v - mapped[pos]).abs() <= 1e-9,
                        "affine drift {} at {:?}",
                        (v - mapped[pos]).abs(),
                        pos
                    );
                }
                Ok(())
            })
            .unwrap();
    });

    // After the first variation no recording has both unallocated
    // labels and match-not-found segments, and every candidate set is
    // the sentinel or non-empty.
    run("variation 1 resolves c_un/MNF coexistence", 64, &|runner| {
        let label_pool = ["A", "B", "C", "D", "E", "F"];
        let strategy = proptest::collection::vec(
            (
                1usize..=4,                                    // weak label count
                proptest::collection::vec(0usize..=16, 0..5), // per-segment candidate recipe
                0usize..label_pool.len(),                      // label offset
            ),
            1..5,
        );
        runner
            .run(&strategy, |recipes| {
                let recordings = recipes
                    .iter()
                    .enumerate()
                    .map(|(i, (n_labels, seg_recipes, offset))| {
                        let weak: Vec<SpeciesLabel> = (0..*n_labels)
                            .map(|k| SpeciesLabel::new(label_pool[(offset + k) % label_pool.len()]))
                            .collect();
                        let segments = seg_recipes
                            .iter()
                            .enumerate()
                            .map(|(j, recipe)| {
                                // 0 -> MNF; otherwise a bitmask over weak labels
                                let candidate = if *recipe == 0 {
                                    CandidateLabelSet::Mnf
                                } else {
                                    let set: LabelSet = weak
                                        .iter()
                                        .enumerate()
                                        .filter(|(k, _)| recipe & (1 << k) != 0)
                                        .map(|(_, l)| l.clone())
                                        .collect();
                                    CandidateLabelSet::labels(set)
                                };
                                let patch = Array2::from_elem((3, 3), 0.5f32);
                                SegmentAssignment::new(
                                    segment_at(&format!("rec{i}"), j, patch, 0, 0),
                                    candidate,
                                )
                            })
                            .collect();
                        RecordingState {
                            recording_id: format!("rec{i}"),
                            weak_labels: weak.into_iter().collect(),
                            segments,
                        }
                    })
                    .collect();
                let state = variation_1(ClassificationState { recordings });
                for rec in &state.recordings {
                    prop_assert!(
                        rec.unallocated().is_empty() || !rec.has_mnf(),
                        "{}: unallocated labels coexist with MNF",
                        rec.recording_id
                    );
                    for seg in &rec.segments {
                        if let Some(labels) = seg.candidate.as_labels() {
                            prop_assert!(!labels.is_empty());
                        }
                    }
                }
                Ok(())
            })
            .unwrap();
    });

    // Segmentation output invariants on planted images: final size
    // filter holds, components are disjoint, pipeline is deterministic.
    run("segment size filter and determinism", 16, &|runner| {
        let strategy = (0u64..1_000_000, 1usize..4);
        runner
            .run(&strategy, |(seed, blobs)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut values =
                    Array2::from_shape_fn((90, 220), |_| rng.random_range(0.0..0.05f32));
                for b in 0..blobs {
                    let h = rng.random_range(10..=14);
                    let w = rng.random_range(11..=16);
                    let r0 = rng.random_range(0..90 - h);
                    let c0 = b * 70 + rng.random_range(0..70 - w);
                    for r in r0..r0 + h {
                        for c in c0..c0 + w {
                            values[(r, c)] = 0.85;
                        }
                    }
                }
                let spec = normalize(spec_of("p", values));
                let params = SegmentationParams::default();
                let segs = segment_spectrogram(&spec, &params);
                let again = segment_spectrogram(&spec, &params);
                prop_assert_eq!(&segs, &again);
                for seg in &segs {
                    prop_assert!(seg.pixel_count >= params.min_size_final);
                    prop_assert!(seg.bbox.row_max < 90 && seg.bbox.col_max < 220);
                    prop_assert_eq!(seg.patch.dim(), (seg.bbox.height(), seg.bbox.width()));
                }
                Ok(())
            })
            .unwrap();
    });

    // Thread count is a performance knob only: identical states from a
    // 1-thread and an 8-thread pool.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA6);
        let pats = orthonormal_patterns(&mut rng, 4, 10, 14);
        let mut corpus = SpectrogramCorpus::new();
        let names = ["A", "B", "C", "D"];
        for (i, pat) in pats.iter().enumerate() {
            let mut values = Array2::<f32>::zeros((60, 160));
            plant(&mut values, &as_patch(pat), 20, 30 + 20 * i);
            corpus
                .insert(LabelledSpectrogram {
                    spec: spec_of(&format!("src{i}"), values),
                    weak_labels: [SpeciesLabel::new(names[i])].into(),
                })
                .unwrap();
        }
        let items: Vec<RecordingSegments> = (0..3)
            .map(|i| RecordingSegments {
                recording_id: format!("q{i}"),
                weak_labels: [
                    SpeciesLabel::new(names[i]),
                    SpeciesLabel::new(names[(i + 1) % 4]),
                ]
                .into(),
                segments: vec![
                    segment_at(&format!("q{i}"), 0, as_patch(&pats[i]), 20, 5),
                    segment_at(
                        &format!("q{i}"),
                        1,
                        as_patch(&blend(&pats[(i + 1) % 4], &pats[i], 0.9)),
                        20,
                        60,
                    ),
                ],
            })
            .collect();
        let run_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                classify_corpus(&corpus, items.clone(), &ClassificationParams::default()).unwrap()
            })
        };
        let one = run_with(1);
        let eight = run_with(8);
        assert_eq!(one, eight, "thread count changed the classification");
        checks.push("1-thread vs 8-thread determinism");
    }

    println!("[A6] PASS structural invariants: {}", checks.join("; "));
}
