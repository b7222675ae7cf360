//! Scoring classification output against synthetic ground truth.
//!
//! Detected segments are aligned to planted boxes by maximal pixel
//! overlap. An aligned segment is Correct when its candidate set is
//! exactly the true label, Unknown when it is match-not-found or carries
//! two or more labels (even if the true label is among them), and Wrong
//! otherwise. Detections overlapping no plant are spurious and excluded
//! from the three-way percentages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::classification::{
    state_to_records, AssignmentRecord, CandidateLabelSet, ClassificationState,
};
use crate::corpus::SpeciesLabel;
use crate::error::{Error, Result};
use crate::segmentation::BBox;
use crate::synthgen::{GroundTruth, PlantedSegment};

/// Reference value printed alongside every report.
pub const CHANCE_PCT: f64 = 33.3;

/// Map each detected box to the planted box it overlaps most, requiring
/// overlap greater than zero; `None` marks a spurious detection. A
/// planted box may absorb several detections.
pub fn align(detected: &[BBox], plants: &[PlantedSegment]) -> Vec<Option<usize>> {
    detected
        .iter()
        .map(|bbox| {
            let mut best: Option<(usize, usize)> = None;
            for (i, plant) in plants.iter().enumerate() {
                let overlap = bbox.intersection_area(&plant.bbox);
                if overlap > 0 && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((i, overlap));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect()
}

/// Three-way outcome for one aligned segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Correct,
    Wrong,
    Unknown,
}

/// Score one candidate set against the true label.
pub fn score_candidate(candidate: &CandidateLabelSet, truth: &SpeciesLabel) -> Outcome {
    match candidate {
        CandidateLabelSet::Mnf => Outcome::Unknown,
        CandidateLabelSet::Labels(set) if set.len() >= 2 => Outcome::Unknown,
        CandidateLabelSet::Labels(set) => {
            if set.contains(truth) {
                Outcome::Correct
            } else {
                Outcome::Wrong
            }
        }
    }
}

/// Counts for one classification pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassScores {
    pub correct: usize,
    pub wrong: usize,
    pub unknown: usize,
}

impl PassScores {
    fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::Wrong => self.wrong += 1,
            Outcome::Unknown => self.unknown += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.correct + self.wrong + self.unknown
    }

    /// (correct, wrong, unknown) percentages rounded to one decimal,
    /// matching the reported precision.
    pub fn percentages(&self) -> (f64, f64, f64) {
        let n = self.total();
        if n == 0 {
            return (0.0, 0.0, 0.0);
        }
        let pct = |c: usize| (c as f64 * 1000.0 / n as f64).round() / 10.0;
        (pct(self.correct), pct(self.wrong), pct(self.unknown))
    }
}

/// Correct/Wrong/Unknown percentages per pass plus the spurious count.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub n_evaluated: usize,
    pub spurious_detections: usize,
    pub chance_pct: f64,
    pub first_pass: PassScores,
    pub var1: PassScores,
    pub var2: PassScores,
}

impl EvaluationReport {
    pub fn passes(&self) -> [(&'static str, &PassScores); 3] {
        [
            ("First-Pass", &self.first_pass),
            ("1st Variation", &self.var1),
            ("2nd Variation", &self.var2),
        ]
    }
}

/// Score exported assignment records against ground truth.
///
/// Every record's recording must exist in the ground truth; per-pass
/// snapshots in the records produce one `PassScores` per pass.
pub fn score_records(
    records: &[AssignmentRecord],
    truth: &GroundTruth,
) -> Result<EvaluationReport> {
    let mut by_recording: BTreeMap<&str, Vec<&AssignmentRecord>> = BTreeMap::new();
    for record in records {
        by_recording
            .entry(record.recording_id.as_str())
            .or_default()
            .push(record);
    }

    let mut report = EvaluationReport {
        n_evaluated: 0,
        spurious_detections: 0,
        chance_pct: CHANCE_PCT,
        first_pass: PassScores::default(),
        var1: PassScores::default(),
        var2: PassScores::default(),
    };

    for (recording_id, records) in by_recording {
        let plants = truth
            .recordings
            .get(recording_id)
            .ok_or_else(|| Error::UnknownRecording(recording_id.to_string()))?;
        let boxes: Vec<BBox> = records.iter().map(|r| BBox::from_array(r.bbox)).collect();
        let alignment = align(&boxes, plants);
        for (record, aligned) in records.iter().zip(alignment) {
            let Some(plant_idx) = aligned else {
                report.spurious_detections += 1;
                continue;
            };
            let truth_label = &plants[plant_idx].label;
            report.n_evaluated += 1;
            for (field, scores) in [
                (&record.labels_first_pass, &mut report.first_pass),
                (&record.labels_var1, &mut report.var1),
                (&record.labels, &mut report.var2),
            ] {
                scores.add(score_candidate(&field.to_candidate()?, truth_label));
            }
        }
    }
    Ok(report)
}

/// Score an in-memory classification state against ground truth.
pub fn score_state(state: &ClassificationState, truth: &GroundTruth) -> Result<EvaluationReport> {
    let records = state_to_records(state);
    score_records(&records, truth)
}

/// Render the report as an aligned text table with the chance row.
pub fn report_text(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<15}{:>9}{:>9}{:>9}", "", "Correct", "Wrong", "Unknown");
    let _ = writeln!(
        out,
        "{:<15}{:>8.1}%{:>8.1}%{:>9}",
        "Chance",
        report.chance_pct,
        100.0 - report.chance_pct,
        "---"
    );
    for (name, scores) in report.passes() {
        let (correct, wrong, unknown) = scores.percentages();
        let _ = writeln!(
            out,
            "{:<15}{:>8.1}%{:>8.1}%{:>8.1}%",
            name, correct, wrong, unknown
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{} segments evaluated, {} spurious detections",
        report.n_evaluated, report.spurious_detections
    );
    out
}

/// Render the report as CSV: `pass,correct,wrong,unknown`.
pub fn report_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("pass,correct,wrong,unknown\n");
    let _ = writeln!(
        out,
        "chance,{:.1},{:.1},",
        report.chance_pct,
        100.0 - report.chance_pct
    );
    for (name, scores) in report.passes() {
        let key = match name {
            "First-Pass" => "first_pass",
            "1st Variation" => "var1",
            _ => "var2",
        };
        let (correct, wrong, unknown) = scores.percentages();
        let _ = writeln!(out, "{key},{correct:.1},{wrong:.1},{unknown:.1}");
    }
    out
}
