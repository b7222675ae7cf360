//! Normalized cross-correlation of segment patches against spectrograms.
//!
//! The kernel computes Pearson-style NCC of a template against every
//! equally sized window of a target. Window means and variances come from
//! sliding sums so each placement costs one dot product plus O(1); all
//! accumulation is in f64. [`best_match`] restricts the search to a
//! frequency band around the segment's own rows.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::segmentation::Segment;
use crate::spectrogram::Spectrogram;

/// Windows whose per-pixel variance is at or below this floor count as
/// flat and score 0, so silence never wins a match.
const VAR_FLOOR_PER_PIXEL: f64 = 1e-12;

/// Best correlation of one template against one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    /// Correlation in `[-1, 1]`; 0 when no valid placement exists.
    pub value: f64,
    /// `(row, col)` of the best placement in target coordinates, `None`
    /// when the template does not fit.
    pub position: Option<(usize, usize)>,
}

impl MatchScore {
    pub const NONE: MatchScore = MatchScore {
        value: 0.0,
        position: None,
    };
}

/// Normalized cross-correlation of `template` with every window of
/// `target`.
///
/// The output has shape `(target_rows - template_rows + 1, target_cols -
/// template_cols + 1)`; entry `(r, c)` is the correlation at that offset,
/// in `[-1, 1]`. Windows (or templates) with zero variance score 0.
pub fn ncc_map(template: ArrayView2<'_, f32>, target: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    let (th, tw) = template.dim();
    let (rows, cols) = target.dim();
    if th == 0 || tw == 0 {
        return Err(Error::InvalidInput("empty template".into()));
    }
    if th > rows || tw > cols {
        return Err(Error::TemplateTooLarge {
            template: (th, tw),
            target: (rows, cols),
        });
    }

    let n = (th * tw) as f64;
    let var_floor = VAR_FLOOR_PER_PIXEL * n;

    // Widen both images to f64 once, so the hot loops are pure f64
    // multiply-adds over contiguous rows.
    let template_flat: Vec<f64> = template.iter().map(|&v| v as f64).collect();
    let target_flat: Vec<f64> = match target.as_slice() {
        Some(flat) => flat.iter().map(|&v| v as f64).collect(),
        None => target.iter().map(|&v| v as f64).collect(),
    };

    let mut sum_t = 0.0f64;
    let mut sum_t2 = 0.0f64;
    for &v in &template_flat {
        sum_t += v;
        sum_t2 += v * v;
    }
    let var_t_n = (sum_t2 - sum_t * sum_t / n).max(0.0);

    let out_rows = rows - th + 1;
    let out_cols = cols - tw + 1;
    let mut out = Array2::<f64>::zeros((out_rows, out_cols));
    if var_t_n <= var_floor {
        return Ok(out);
    }

    let (window_sums, window_sq_sums) = sliding_window_sums(&target_flat, rows, cols, th, tw);

    // Numerator via shift-and-accumulate: each template element streams
    // over a contiguous run of output columns, which vectorizes well.
    for or in 0..out_rows {
        let dot_row = out
            .row_mut(or)
            .into_slice()
            .expect("freshly allocated output is contiguous");
        for i in 0..th {
            let trow = &template_flat[i * tw..(i + 1) * tw];
            let wrow = &target_flat[(or + i) * cols..(or + i + 1) * cols];
            for (j, &t) in trow.iter().enumerate() {
                let shifted = &wrow[j..j + out_cols];
                for (d, &w) in dot_row.iter_mut().zip(shifted) {
                    *d += t * w;
                }
            }
        }
        let sums_row = &window_sums[or * out_cols..(or + 1) * out_cols];
        let sq_row = &window_sq_sums[or * out_cols..(or + 1) * out_cols];
        for ((slot, &sum_w), &sq_w) in dot_row.iter_mut().zip(sums_row).zip(sq_row) {
            let var_w_n = (sq_w - sum_w * sum_w / n).max(0.0);
            if var_w_n <= var_floor {
                *slot = 0.0;
                continue;
            }
            let num = *slot - sum_t * sum_w / n;
            *slot = (num / (var_t_n * var_w_n).sqrt()).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Sliding `th x tw` window sums of values and squared values over a
/// row-major f64 image, flattened row-major over the output grid.
fn sliding_window_sums(
    target: &[f64],
    rows: usize,
    cols: usize,
    th: usize,
    tw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let out_cols = cols - tw + 1;
    let out_rows = rows - th + 1;

    // Horizontal pass: per-row sums of width tw.
    let mut h_sum = vec![0.0f64; rows * out_cols];
    let mut h_sq = vec![0.0f64; rows * out_cols];
    for r in 0..rows {
        let row = &target[r * cols..(r + 1) * cols];
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for &v in &row[..tw] {
            sum += v;
            sq += v * v;
        }
        h_sum[r * out_cols] = sum;
        h_sq[r * out_cols] = sq;
        for c in 1..out_cols {
            let add = row[c + tw - 1];
            let sub = row[c - 1];
            sum += add - sub;
            sq += add * add - sub * sub;
            h_sum[r * out_cols + c] = sum;
            h_sq[r * out_cols + c] = sq;
        }
    }

    // Vertical pass: sums of th consecutive horizontal sums.
    let mut w_sum = vec![0.0f64; out_rows * out_cols];
    let mut w_sq = vec![0.0f64; out_rows * out_cols];
    let mut col_sum = vec![0.0f64; out_cols];
    let mut col_sq = vec![0.0f64; out_cols];
    for r in 0..th {
        for c in 0..out_cols {
            col_sum[c] += h_sum[r * out_cols + c];
            col_sq[c] += h_sq[r * out_cols + c];
        }
    }
    w_sum[..out_cols].copy_from_slice(&col_sum);
    w_sq[..out_cols].copy_from_slice(&col_sq);
    for r in 1..out_rows {
        for c in 0..out_cols {
            col_sum[c] += h_sum[(r + th - 1) * out_cols + c] - h_sum[(r - 1) * out_cols + c];
            col_sq[c] += h_sq[(r + th - 1) * out_cols + c] - h_sq[(r - 1) * out_cols + c];
            w_sum[r * out_cols + c] = col_sum[c];
            w_sq[r * out_cols + c] = col_sq[c];
        }
    }
    (w_sum, w_sq)
}

/// Best match of a segment's patch against a target spectrogram, searching
/// only rows within `band_pad` of the segment's own padded bounding box.
///
/// Degenerate inputs (band or target smaller than the template) return
/// score 0 with no position rather than an error.
pub fn best_match(segment: &Segment, target: &Spectrogram, band_pad: usize) -> MatchScore {
    let (th, tw) = segment.patch.dim();
    let (rows, cols) = (target.rows(), target.cols());
    if th == 0 || tw == 0 || rows == 0 || cols == 0 || tw > cols {
        return MatchScore::NONE;
    }
    let band_r0 = segment.bbox.row_min.saturating_sub(band_pad);
    let band_r1 = (segment.bbox.row_max + band_pad).min(rows - 1);
    if band_r0 >= rows || band_r1 - band_r0 + 1 < th {
        return MatchScore::NONE;
    }

    let band = target.values.slice(s![band_r0..=band_r1, ..]);
    let map = match ncc_map(segment.patch.view(), band) {
        Ok(map) => map,
        Err(_) => return MatchScore::NONE,
    };

    let mut best = f64::NEG_INFINITY;
    let mut best_pos = (0, 0);
    for ((r, c), &v) in map.indexed_iter() {
        if v > best {
            best = v;
            best_pos = (r, c);
        }
    }
    MatchScore {
        value: best,
        position: Some((band_r0 + best_pos.0, best_pos.1)),
    }
}
