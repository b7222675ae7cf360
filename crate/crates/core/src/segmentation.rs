//! Unsupervised segmentation of spectrograms into candidate vocalizations.
//!
//! The full pipeline on a normalized, cropped spectrogram is: median
//! clipping to a binary mask, closing, small-object removal (10 px),
//! dilation and median filtering, a second small-object removal (100 px),
//! another dilation, then connected components with padded bounding boxes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::Recording;
use crate::error::{Error, Result};
use crate::spectrogram::{self, Spectrogram, SpectrogramParams};

/// Binary image with the shape of its source spectrogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Array2<bool>,
}

impl BinaryMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            bits: Array2::from_elem((rows, cols), false),
        }
    }

    pub fn rows(&self) -> usize {
        self.bits.nrows()
    }

    pub fn cols(&self) -> usize {
        self.bits.ncols()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Rectangular structuring element with its anchor at
/// `((height-1)/2, (width-1)/2)`, matching the usual image-processing
/// convention for even sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    pub height: usize,
    pub width: usize,
}

impl StructuringElement {
    pub fn square(size: usize) -> Self {
        Self {
            height: size,
            width: size,
        }
    }

    /// Offsets of every element cell relative to the anchor.
    fn offsets(&self) -> Vec<(isize, isize)> {
        let (ar, ac) = (((self.height - 1) / 2) as isize, ((self.width - 1) / 2) as isize);
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height as isize {
            for c in 0..self.width as isize {
                out.push((r - ar, c - ac));
            }
        }
        out
    }
}

/// Pixel connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn neighbors(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Inclusive bounding box in (row, col) spectrogram coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    /// Pixel count of the rectangle intersection, 0 when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> usize {
        let r0 = self.row_min.max(other.row_min);
        let r1 = self.row_max.min(other.row_max);
        let c0 = self.col_min.max(other.col_min);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            0
        } else {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        }
    }

    /// Grow by `pad` in all four directions, clipped to the image bounds.
    pub fn padded(&self, pad: usize, rows: usize, cols: usize) -> BBox {
        BBox {
            row_min: self.row_min.saturating_sub(pad),
            row_max: (self.row_max + pad).min(rows - 1),
            col_min: self.col_min.saturating_sub(pad),
            col_max: (self.col_max + pad).min(cols - 1),
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.row_min, self.row_max, self.col_min, self.col_max]
    }

    pub fn from_array(a: [usize; 4]) -> BBox {
        BBox {
            row_min: a[0],
            row_max: a[1],
            col_min: a[2],
            col_max: a[3],
        }
    }
}

/// One detected candidate vocalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub recording_id: String,
    /// Component bounds after padding, clipped to the image.
    pub bbox: BBox,
    /// Mask pixels of the component, measured before padding.
    pub pixel_count: usize,
    /// Magnitudes of the normalized cropped spectrogram over `bbox`.
    pub patch: Array2<f32>,
}

/// Tunables of the segmentation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationParams {
    /// Median-clip ratio: a pixel survives when above `factor` times both
    /// its row median and its column median.
    pub clip_factor: f32,
    pub close_se: usize,
    pub dilate_se: usize,
    pub median_window: usize,
    /// First small-object filter, applied right after closing.
    pub min_size_initial: usize,
    /// Second filter; every returned segment has at least this many pixels.
    pub min_size_final: usize,
    /// Bounding-box padding in pixels, each direction.
    pub pad: usize,
    pub connectivity: Connectivity,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            clip_factor: 3.0,
            close_se: 3,
            dilate_se: 4,
            median_window: 3,
            min_size_initial: 10,
            min_size_final: 100,
            pad: 5,
            connectivity: Connectivity::Eight,
        }
    }
}

fn median_of(sorted: &mut [f32]) -> f32 {
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Binarize by median clipping: a pixel is set when its value exceeds
/// `factor` times the median of its row and `factor` times the median of
/// its column. With a zero median the test degrades to `value > 0`.
pub fn median_clip(spec: &Spectrogram, factor: f32) -> BinaryMask {
    let (rows, cols) = (spec.rows(), spec.cols());
    let mut row_medians = vec![0.0f32; rows];
    let mut col_medians = vec![0.0f32; cols];
    let mut buf = Vec::new();
    for r in 0..rows {
        buf.clear();
        buf.extend(spec.values.row(r).iter().copied());
        row_medians[r] = median_of(&mut buf);
    }
    for c in 0..cols {
        buf.clear();
        buf.extend(spec.values.column(c).iter().copied());
        col_medians[c] = median_of(&mut buf);
    }
    let bits = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let v = spec.values[(r, c)];
        v > factor * row_medians[r] && v > factor * col_medians[c]
    });
    BinaryMask { bits }
}

/// Binary dilation: out-of-bounds source pixels count as background.
pub fn morph_dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (rows, cols) = (mask.rows() as isize, mask.cols() as isize);
    let offsets = se.offsets();
    let mut out = BinaryMask::zeros(mask.rows(), mask.cols());
    for ((r, c), &set) in mask.bits.indexed_iter() {
        if !set {
            continue;
        }
        for &(dr, dc) in &offsets {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr >= 0 && nr < rows && nc >= 0 && nc < cols {
                out.bits[(nr as usize, nc as usize)] = true;
            }
        }
    }
    out
}

/// Erosion with the reflected element; out-of-bounds pixels count as
/// foreground so closing stays extensive and idempotent at the borders.
fn erode_reflected(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (rows, cols) = (mask.rows() as isize, mask.cols() as isize);
    let offsets = se.offsets();
    let bits = Array2::from_shape_fn((mask.rows(), mask.cols()), |(r, c)| {
        offsets.iter().all(|&(dr, dc)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr >= 0 && nr < rows && nc >= 0 && nc < cols {
                mask.bits[(nr as usize, nc as usize)]
            } else {
                true
            }
        })
    });
    BinaryMask { bits }
}

/// Binary closing (dilation then erosion): fills holes and gaps smaller
/// than the structuring element.
pub fn morph_close(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    erode_reflected(&morph_dilate(mask, se), se)
}

/// Majority vote in a `window`-sized square neighborhood, ties set the
/// pixel. The window is clipped at the borders.
pub fn median_filter(mask: &BinaryMask, window: usize) -> BinaryMask {
    let (rows, cols) = (mask.rows() as isize, mask.cols() as isize);
    let half_lo = ((window - 1) / 2) as isize;
    let half_hi = (window / 2) as isize;
    let bits = Array2::from_shape_fn((mask.rows(), mask.cols()), |(r, c)| {
        let r0 = (r as isize - half_lo).max(0);
        let r1 = (r as isize + half_hi).min(rows - 1);
        let c0 = (c as isize - half_lo).max(0);
        let c1 = (c as isize + half_hi).min(cols - 1);
        let mut ones = 0usize;
        let mut cells = 0usize;
        for nr in r0..=r1 {
            for nc in c0..=c1 {
                cells += 1;
                if mask.bits[(nr as usize, nc as usize)] {
                    ones += 1;
                }
            }
        }
        2 * ones >= cells
    });
    BinaryMask { bits }
}

struct Component {
    pixel_count: usize,
    bbox: BBox,
}

/// Label connected components; returns the label grid (0 = background,
/// labels start at 1) and per-component stats.
fn components(mask: &BinaryMask, connectivity: Connectivity) -> (Array2<u32>, Vec<Component>) {
    let (rows, cols) = (mask.rows(), mask.cols());
    let mut labels = Array2::<u32>::zeros((rows, cols));
    let mut comps = Vec::new();
    let neighbors = connectivity.neighbors();
    let mut stack = Vec::new();

    for r in 0..rows {
        for c in 0..cols {
            if !mask.bits[(r, c)] || labels[(r, c)] != 0 {
                continue;
            }
            let label = comps.len() as u32 + 1;
            let mut comp = Component {
                pixel_count: 0,
                bbox: BBox {
                    row_min: r,
                    row_max: r,
                    col_min: c,
                    col_max: c,
                },
            };
            labels[(r, c)] = label;
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                comp.pixel_count += 1;
                comp.bbox.row_min = comp.bbox.row_min.min(pr);
                comp.bbox.row_max = comp.bbox.row_max.max(pr);
                comp.bbox.col_min = comp.bbox.col_min.min(pc);
                comp.bbox.col_max = comp.bbox.col_max.max(pc);
                for &(dr, dc) in neighbors {
                    let (nr, nc) = (pr as isize + dr, pc as isize + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.bits[(nr, nc)] && labels[(nr, nc)] == 0 {
                        labels[(nr, nc)] = label;
                        stack.push((nr, nc));
                    }
                }
            }
            comps.push(comp);
        }
    }
    (labels, comps)
}

/// Zero every connected component smaller than `min_size` pixels.
pub fn remove_small_objects(
    mask: &BinaryMask,
    min_size: usize,
    connectivity: Connectivity,
) -> BinaryMask {
    let (labels, comps) = components(mask, connectivity);
    let keep: Vec<bool> = comps.iter().map(|c| c.pixel_count >= min_size).collect();
    let bits = Array2::from_shape_fn((mask.rows(), mask.cols()), |(r, c)| {
        let l = labels[(r, c)];
        l != 0 && keep[(l - 1) as usize]
    });
    BinaryMask { bits }
}

/// Turn mask components into segments: bounding boxes grown by `pad` and
/// clipped, patches copied from the spectrogram. Segments are ordered by
/// time (then frequency) and numbered within the recording.
pub fn extract_segments(
    mask: &BinaryMask,
    spec: &Spectrogram,
    pad: usize,
    connectivity: Connectivity,
) -> Vec<Segment> {
    debug_assert_eq!((mask.rows(), mask.cols()), (spec.rows(), spec.cols()));
    let (_, mut comps) = components(mask, connectivity);
    comps.sort_by_key(|c| (c.bbox.col_min, c.bbox.row_min, c.bbox.col_max, c.bbox.row_max));
    comps
        .into_iter()
        .enumerate()
        .map(|(i, comp)| {
            let bbox = comp.bbox.padded(pad, spec.rows(), spec.cols());
            let patch = spec
                .values
                .slice(s![bbox.row_min..=bbox.row_max, bbox.col_min..=bbox.col_max])
                .to_owned();
            Segment {
                id: format!("{}#{}", spec.recording_id, i),
                recording_id: spec.recording_id.clone(),
                bbox,
                pixel_count: comp.pixel_count,
                patch,
            }
        })
        .collect()
}

/// Run the full segmentation pipeline on a normalized cropped spectrogram.
pub fn segment_spectrogram(spec: &Spectrogram, params: &SegmentationParams) -> Vec<Segment> {
    let close_se = StructuringElement::square(params.close_se);
    let dilate_se = StructuringElement::square(params.dilate_se);
    let conn = params.connectivity;

    let mask = median_clip(spec, params.clip_factor);
    let mask = morph_close(&mask, &close_se);
    let mask = remove_small_objects(&mask, params.min_size_initial, conn);
    let mask = morph_dilate(&mask, &dilate_se);
    let mask = median_filter(&mask, params.median_window);
    let mask = remove_small_objects(&mask, params.min_size_final, conn);
    let mask = morph_dilate(&mask, &dilate_se);
    extract_segments(&mask, spec, params.pad, conn)
}

/// Segment a recording from raw audio: STFT, normalize, crop, then
/// [`segment_spectrogram`].
pub fn segment_recording(
    recording: &Recording,
    spec_params: &SpectrogramParams,
    seg_params: &SegmentationParams,
) -> Result<Vec<Segment>> {
    let spec = spectrogram::compute_spectrogram(recording, spec_params)?;
    let spec = spectrogram::normalize(spec);
    let spec = spectrogram::crop_rows(spec, spec_params.crop_low, spec_params.crop_high)?;
    Ok(segment_spectrogram(&spec, seg_params))
}

/// Serialized form of a segment; the patch is re-derived from the owning
/// corpus on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SegmentRecord {
    pub id: String,
    pub recording_id: String,
    pub bbox: [usize; 4],
    pub pixel_count: usize,
}

impl SegmentRecord {
    pub fn from_segment(seg: &Segment) -> Self {
        Self {
            id: seg.id.clone(),
            recording_id: seg.recording_id.clone(),
            bbox: seg.bbox.as_array(),
            pixel_count: seg.pixel_count,
        }
    }
}

/// Write segments as JSON Lines.
pub fn write_segments_jsonl<'a>(
    path: &Path,
    segments: impl IntoIterator<Item = &'a Segment>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for seg in segments {
        let line = serde_json::to_string(&SegmentRecord::from_segment(seg)).map_err(|e| {
            Error::Json {
                path: path.to_path_buf(),
                source: e,
            }
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_segments_jsonl(path: &Path) -> Result<Vec<SegmentRecord>> {
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
