//! Weak-label classification of segments.
//!
//! Every segment starts with its recording's full weak-label set as
//! candidates. The first pass matches the segment against groups of other
//! recordings that share labels with it, smallest label combinations
//! first, and shrinks the candidate set to the best-scoring combination.
//! Two repair passes follow: unallocated labels are handed to match-not-
//! found segments, then duplicate-label recordings get one segment
//! reassigned to an unallocated label when it matches well enough.

use std::collections::{btree_map, BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, SpeciesLabel, SpectrogramCorpus};
use crate::error::{Error, Result};
use crate::matching::{self, MatchScore};
use crate::segmentation::Segment;

/// Qualifying-match threshold: scores at or above it count as matches.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.4;
/// Rows searched above and below a segment's band when matching.
pub const DEFAULT_BAND_PAD: usize = 5;

const MAX_WEAK_LABELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationParams {
    pub threshold: f64,
    pub band_pad: usize,
}

impl Default for ClassificationParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_MATCH_THRESHOLD,
            band_pad: DEFAULT_BAND_PAD,
        }
    }
}

/// Candidate labels of one segment: a non-empty label set, or the
/// match-not-found sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateLabelSet {
    Mnf,
    Labels(LabelSet),
}

impl CandidateLabelSet {
    /// Build from a label set; an empty set is not representable and maps
    /// to `Mnf`.
    pub fn labels(set: LabelSet) -> Self {
        if set.is_empty() {
            CandidateLabelSet::Mnf
        } else {
            CandidateLabelSet::Labels(set)
        }
    }

    pub fn single(label: SpeciesLabel) -> Self {
        CandidateLabelSet::Labels(LabelSet::from([label]))
    }

    pub fn is_mnf(&self) -> bool {
        matches!(self, CandidateLabelSet::Mnf)
    }

    pub fn as_labels(&self) -> Option<&LabelSet> {
        match self {
            CandidateLabelSet::Mnf => None,
            CandidateLabelSet::Labels(set) => Some(set),
        }
    }

    /// The label when the candidate set is a singleton.
    pub fn single_label(&self) -> Option<&SpeciesLabel> {
        match self {
            CandidateLabelSet::Labels(set) if set.len() == 1 => set.iter().next(),
            _ => None,
        }
    }
}

/// A non-empty subset of a recording's weak labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct LabelCombination(LabelSet);

impl LabelCombination {
    pub fn new(set: LabelSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::InvalidInput("empty label combination".into()));
        }
        Ok(LabelCombination(set))
    }

    pub fn single(label: SpeciesLabel) -> Self {
        LabelCombination(LabelSet::from([label]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_set(&self) -> &LabelSet {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &SpeciesLabel> {
        self.0.iter()
    }
}

/// The recordings whose weak labels intersect a segment's recording
/// labels in exactly one combination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingGroup {
    pub combination: LabelCombination,
    pub recording_ids: Vec<String>,
}

/// Group corpus recordings by their weak-label overlap with `labels_rec`.
///
/// For every non-empty subset `c` of `labels_rec` the group holds the
/// recordings `r != exclude` with `weak(r) ∩ labels_rec == c`; recordings
/// may carry labels outside `labels_rec`. Empty groups are retained. The
/// segment's own source recording is always excluded.
pub fn group_recordings(
    labels_rec: &LabelSet,
    corpus: &SpectrogramCorpus,
    exclude: &str,
) -> BTreeMap<LabelCombination, RecordingGroup> {
    let labels: Vec<&SpeciesLabel> = labels_rec.iter().collect();
    let n = labels.len();
    debug_assert!(n <= MAX_WEAK_LABELS);
    let mut groups = BTreeMap::new();
    for bits in 1u32..(1u32 << n) {
        let set: LabelSet = (0..n)
            .filter(|i| bits & (1 << i) != 0)
            .map(|i| labels[i].clone())
            .collect();
        let combination = LabelCombination(set);
        groups.insert(
            combination.clone(),
            RecordingGroup {
                combination,
                recording_ids: Vec::new(),
            },
        );
    }
    for (id, entry) in corpus.iter() {
        if id == exclude {
            continue;
        }
        let overlap: LabelSet = entry
            .weak_labels
            .intersection(labels_rec)
            .cloned()
            .collect();
        if overlap.is_empty() {
            continue;
        }
        groups
            .get_mut(&LabelCombination(overlap))
            .expect("every non-empty subset is present")
            .recording_ids
            .push(id.clone());
    }
    groups
}

/// Per-combination sums of qualifying match scores for one segment.
#[derive(Debug, Clone, Default)]
pub struct MatchAccumulator {
    sums: BTreeMap<LabelCombination, AccumEntry>,
}

#[derive(Debug, Clone)]
struct AccumEntry {
    sum: f64,
    contributions: usize,
}

impl MatchAccumulator {
    pub fn add(&mut self, combination: &LabelCombination, score: f64) {
        match self.sums.entry(combination.clone()) {
            btree_map::Entry::Vacant(v) => {
                v.insert(AccumEntry {
                    sum: score,
                    contributions: 1,
                });
            }
            btree_map::Entry::Occupied(mut o) => {
                let e = o.get_mut();
                e.sum += score;
                e.contributions += 1;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn sum_for(&self, combination: &LabelCombination) -> Option<f64> {
        self.sums.get(combination).map(|e| e.sum)
    }

    pub fn contributions_for(&self, combination: &LabelCombination) -> usize {
        self.sums.get(combination).map_or(0, |e| e.contributions)
    }

    /// Highest sum; ties prefer the smaller combination, then the
    /// lexicographically smallest.
    pub fn argmax(&self) -> Option<(&LabelCombination, f64)> {
        let mut best: Option<(&LabelCombination, f64)> = None;
        for (combo, entry) in &self.sums {
            let better = match best {
                None => true,
                Some((bc, bs)) => entry.sum > bs || (entry.sum == bs && combo.len() < bc.len()),
            };
            if better {
                best = Some((combo, entry.sum));
            }
        }
        best
    }
}

/// Which pass fixed a segment's final candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    FirstPass,
    Var1,
    Var2,
}

/// A segment with its evolving candidate labels and audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAssignment {
    pub segment: Segment,
    /// Current candidate set (final once all passes have run).
    pub candidate: CandidateLabelSet,
    /// Snapshot right after the first pass.
    pub candidate_first_pass: CandidateLabelSet,
    /// Snapshot right after the first variation.
    pub candidate_var1: CandidateLabelSet,
    pub decided_by: DecidedBy,
    pub winning_combination: Option<LabelCombination>,
    pub score_sum: Option<f64>,
}

impl SegmentAssignment {
    pub fn new(segment: Segment, candidate: CandidateLabelSet) -> Self {
        Self {
            segment,
            candidate_first_pass: candidate.clone(),
            candidate_var1: candidate.clone(),
            candidate,
            decided_by: DecidedBy::FirstPass,
            winning_combination: None,
            score_sum: None,
        }
    }
}

/// Per-recording classification state.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingState {
    pub recording_id: String,
    pub weak_labels: LabelSet,
    pub segments: Vec<SegmentAssignment>,
}

impl RecordingState {
    /// Weak labels assigned to no segment (`c_un`). A label counts as
    /// allocated when any segment's candidate set contains it.
    pub fn unallocated(&self) -> LabelSet {
        let mut allocated = LabelSet::new();
        for seg in &self.segments {
            if let Some(labels) = seg.candidate.as_labels() {
                allocated.extend(labels.iter().cloned());
            }
        }
        self.weak_labels.difference(&allocated).cloned().collect()
    }

    pub fn has_mnf(&self) -> bool {
        self.segments.iter().any(|s| s.candidate.is_mnf())
    }

    /// Labels carried as the sole candidate of two or more segments,
    /// with the indices of those segments (`same(c)`).
    pub fn duplicated_labels(&self) -> BTreeMap<SpeciesLabel, Vec<usize>> {
        let mut by_label: BTreeMap<SpeciesLabel, Vec<usize>> = BTreeMap::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if let Some(label) = seg.candidate.single_label() {
                by_label.entry(label.clone()).or_default().push(i);
            }
        }
        by_label.retain(|_, idxs| idxs.len() >= 2);
        by_label
    }
}

/// Classification state over all recordings, recordings sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassificationState {
    pub recordings: Vec<RecordingState>,
}

/// Segments of one recording queued for classification, with the weak
/// labels of the recording they came from.
#[derive(Debug, Clone)]
pub struct RecordingSegments {
    pub recording_id: String,
    pub weak_labels: LabelSet,
    pub segments: Vec<Segment>,
}

/// Outcome of the first pass for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstPassOutcome {
    pub candidate: CandidateLabelSet,
    pub winning_combination: Option<LabelCombination>,
    pub score_sum: Option<f64>,
}

/// First-pass matching for one segment.
///
/// Combination sizes are tried in increasing order. At each size, every
/// group recording contributes its best match when it scores at least the
/// threshold; the first size with any qualifying match decides: the
/// argmax combination is intersected with the segment's candidate labels
/// and the search stops. No qualifying match at any size yields `Mnf`.
pub fn first_pass(
    segment: &Segment,
    labels_rec: &LabelSet,
    groups: &BTreeMap<LabelCombination, RecordingGroup>,
    corpus: &SpectrogramCorpus,
    params: &ClassificationParams,
) -> FirstPassOutcome {
    let labels_seg = labels_rec.clone();
    for size in 1..=labels_rec.len() {
        let mut acc = MatchAccumulator::default();
        for (combination, group) in groups.iter().filter(|(c, _)| c.len() == size) {
            for id in &group.recording_ids {
                let entry = corpus.get(id).expect("group ids come from the corpus");
                let score: MatchScore = matching::best_match(segment, &entry.spec, params.band_pad);
                if score.value >= params.threshold {
                    acc.add(combination, score.value);
                }
            }
        }
        if let Some((winner, sum)) = acc.argmax() {
            let reduced: LabelSet = winner.as_set().intersection(&labels_seg).cloned().collect();
            return FirstPassOutcome {
                candidate: CandidateLabelSet::labels(reduced),
                winning_combination: Some(winner.clone()),
                score_sum: Some(sum),
            };
        }
    }
    FirstPassOutcome {
        candidate: CandidateLabelSet::Mnf,
        winning_combination: None,
        score_sum: None,
    }
}

/// First variation: in every recording that has both unallocated labels
/// and match-not-found segments, assign the full unallocated set to each
/// of those segments.
pub fn variation_1(mut state: ClassificationState) -> ClassificationState {
    for recording in &mut state.recordings {
        let unallocated = recording.unallocated();
        if !unallocated.is_empty() && recording.has_mnf() {
            for seg in &mut recording.segments {
                if seg.candidate.is_mnf() {
                    seg.candidate = CandidateLabelSet::labels(unallocated.clone());
                    seg.decided_by = DecidedBy::Var1;
                }
            }
        }
        for seg in &mut recording.segments {
            seg.candidate_var1 = seg.candidate.clone();
        }
    }
    state
}

/// Second variation: in recordings with unallocated labels, no
/// match-not-found segments and some label held by two or more segments,
/// search those duplicate segments against recordings containing each
/// unallocated label and reassign the best qualifying one.
pub fn variation_2(
    mut state: ClassificationState,
    corpus: &SpectrogramCorpus,
    params: &ClassificationParams,
) -> ClassificationState {
    for recording in &mut state.recordings {
        let unallocated = recording.unallocated();
        if unallocated.is_empty() || recording.has_mnf() {
            continue;
        }
        let mut reassigned: BTreeSet<usize> = BTreeSet::new();
        for label_un in &unallocated {
            // Duplicates are recomputed after every reassignment.
            let pool: Vec<usize> = recording
                .duplicated_labels()
                .into_values()
                .flatten()
                .filter(|i| !reassigned.contains(i))
                .collect();
            if pool.is_empty() {
                continue;
            }
            let targets: Vec<&str> = corpus
                .iter()
                .filter(|(id, entry)| {
                    *id != &recording.recording_id && entry.weak_labels.contains(label_un)
                })
                .map(|(id, _)| id.as_str())
                .collect();
            let mut best: Option<(usize, f64)> = None;
            for &seg_idx in &pool {
                let segment = &recording.segments[seg_idx].segment;
                for id in &targets {
                    let entry = corpus.get(id).expect("target ids come from the corpus");
                    let score = matching::best_match(segment, &entry.spec, params.band_pad);
                    if score.value >= params.threshold
                        && best.is_none_or(|(_, b)| score.value > b)
                    {
                        best = Some((seg_idx, score.value));
                    }
                }
            }
            if let Some((seg_idx, score)) = best {
                let seg = &mut recording.segments[seg_idx];
                seg.candidate = CandidateLabelSet::single(label_un.clone());
                seg.decided_by = DecidedBy::Var2;
                seg.winning_combination = Some(LabelCombination::single(label_un.clone()));
                seg.score_sum = Some(score);
                reassigned.insert(seg_idx);
            }
        }
    }
    state
}

/// Run the full classification: first pass on every segment, then the two
/// variations over all recordings, in order.
///
/// Matching searches `corpus`; segment ownership and weak labels come
/// from `items`. First-pass calls for distinct segments run in parallel;
/// results merge by index so thread count never changes the outcome.
pub fn classify_corpus(
    corpus: &SpectrogramCorpus,
    items: Vec<RecordingSegments>,
    params: &ClassificationParams,
) -> Result<ClassificationState> {
    use rayon::prelude::*;

    let mut items = items;
    items.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    for item in &items {
        if item.weak_labels.len() > MAX_WEAK_LABELS {
            return Err(Error::InvalidInput(format!(
                "recording `{}` has {} weak labels; at most {MAX_WEAK_LABELS} supported",
                item.recording_id,
                item.weak_labels.len()
            )));
        }
    }

    let groups_per_item: Vec<_> = items
        .iter()
        .map(|item| group_recordings(&item.weak_labels, corpus, &item.recording_id))
        .collect();

    let jobs: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, item)| (0..item.segments.len()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<FirstPassOutcome> = jobs
        .par_iter()
        .map(|&(i, j)| {
            first_pass(
                &items[i].segments[j],
                &items[i].weak_labels,
                &groups_per_item[i],
                corpus,
                params,
            )
        })
        .collect();

    let mut outcome_iter = outcomes.into_iter();
    let recordings = items
        .into_iter()
        .map(|item| {
            let segments = item
                .segments
                .into_iter()
                .map(|segment| {
                    let outcome = outcome_iter.next().expect("one outcome per segment");
                    let mut assignment = SegmentAssignment::new(segment, outcome.candidate);
                    assignment.winning_combination = outcome.winning_combination;
                    assignment.score_sum = outcome.score_sum;
                    assignment
                })
                .collect();
            RecordingState {
                recording_id: item.recording_id,
                weak_labels: item.weak_labels,
                segments,
            }
        })
        .collect();

    let state = ClassificationState { recordings };
    let state = variation_1(state);
    Ok(variation_2(state, corpus, params))
}

/// Re-attach patches to serialized segments by slicing their owning
/// spectrograms, grouping them per recording for classification.
/// Recordings without segments are kept so their labels show up as
/// unallocated.
pub fn rehydrate_segments(
    records: &[crate::segmentation::SegmentRecord],
    owners: &SpectrogramCorpus,
) -> Result<Vec<RecordingSegments>> {
    use crate::segmentation::BBox;

    let mut by_recording: BTreeMap<&str, Vec<Segment>> = BTreeMap::new();
    for record in records {
        let entry = owners
            .get(&record.recording_id)
            .ok_or_else(|| Error::UnknownRecording(record.recording_id.clone()))?;
        let bbox = BBox::from_array(record.bbox);
        let (rows, cols) = (entry.spec.rows(), entry.spec.cols());
        if bbox.row_min > bbox.row_max
            || bbox.col_min > bbox.col_max
            || bbox.row_max >= rows
            || bbox.col_max >= cols
        {
            return Err(Error::InvalidSegment {
                id: record.id.clone(),
                detail: format!("bbox {:?} outside {rows}x{cols}", record.bbox),
            });
        }
        let patch = entry
            .spec
            .values
            .slice(ndarray::s![
                bbox.row_min..=bbox.row_max,
                bbox.col_min..=bbox.col_max
            ])
            .to_owned();
        by_recording
            .entry(record.recording_id.as_str())
            .or_default()
            .push(Segment {
                id: record.id.clone(),
                recording_id: record.recording_id.clone(),
                bbox,
                pixel_count: record.pixel_count,
                patch,
            });
    }
    Ok(owners
        .iter()
        .map(|(id, entry)| RecordingSegments {
            recording_id: id.clone(),
            weak_labels: entry.weak_labels.clone(),
            segments: by_recording.remove(id.as_str()).unwrap_or_default(),
        })
        .collect())
}

/// JSON form of a candidate set: an array of labels, or the string "MNF".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelsField {
    Sentinel(String),
    Labels(Vec<String>),
}

impl LabelsField {
    pub fn from_candidate(candidate: &CandidateLabelSet) -> Self {
        match candidate {
            CandidateLabelSet::Mnf => LabelsField::Sentinel("MNF".into()),
            CandidateLabelSet::Labels(set) => {
                LabelsField::Labels(set.iter().map(|l| l.as_str().to_string()).collect())
            }
        }
    }

    pub fn to_candidate(&self) -> Result<CandidateLabelSet> {
        match self {
            LabelsField::Sentinel(s) if s == "MNF" => Ok(CandidateLabelSet::Mnf),
            LabelsField::Sentinel(s) => Err(Error::InvalidInput(format!(
                "unknown label sentinel `{s}`"
            ))),
            LabelsField::Labels(labels) => {
                if labels.is_empty() {
                    return Err(Error::InvalidInput("empty label list".into()));
                }
                Ok(CandidateLabelSet::Labels(
                    labels.iter().map(SpeciesLabel::new).collect(),
                ))
            }
        }
    }
}

/// One exported assignment line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub segment_id: String,
    pub recording_id: String,
    pub labels: LabelsField,
    pub decided_by: DecidedBy,
    pub winning_combination: Option<Vec<String>>,
    pub score_sum: Option<f64>,
    /// Segment bounding box, carried along so scoring can align
    /// detections with ground truth without reloading the corpus.
    pub bbox: [usize; 4],
    pub labels_first_pass: LabelsField,
    pub labels_var1: LabelsField,
}

impl AssignmentRecord {
    pub fn from_assignment(assignment: &SegmentAssignment) -> Self {
        Self {
            segment_id: assignment.segment.id.clone(),
            recording_id: assignment.segment.recording_id.clone(),
            labels: LabelsField::from_candidate(&assignment.candidate),
            decided_by: assignment.decided_by,
            winning_combination: assignment
                .winning_combination
                .as_ref()
                .map(|c| c.iter().map(|l| l.as_str().to_string()).collect()),
            score_sum: assignment.score_sum,
            bbox: assignment.segment.bbox.as_array(),
            labels_first_pass: LabelsField::from_candidate(&assignment.candidate_first_pass),
            labels_var1: LabelsField::from_candidate(&assignment.candidate_var1),
        }
    }
}

pub fn state_to_records(state: &ClassificationState) -> Vec<AssignmentRecord> {
    state
        .recordings
        .iter()
        .flat_map(|r| r.segments.iter().map(AssignmentRecord::from_assignment))
        .collect()
}

pub fn write_assignments_jsonl(path: &Path, state: &ClassificationState) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in state_to_records(state) {
        let line = serde_json::to_string(&record).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_assignments_jsonl(path: &Path) -> Result<Vec<AssignmentRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?);
    }
    Ok(out)
}
