//! Magnitude spectrograms: STFT, normalization, row cropping, persistence.
//!
//! Rows are frequency bins ascending from low, columns are time frames.
//! The pipeline order is fixed: compute, normalize to a global maximum of
//! 1.0, then drop the lowest and highest rows. Magnitudes stay linear.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use rustfft::{num_complex::Complex32, Fft, FftPlanner};

use crate::corpus::Recording;
use crate::error::{Error, Result};

/// Named window taper applied to each frame before the FFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowFn {
    #[default]
    Hann,
}

impl WindowFn {
    fn coefficients(self, len: usize) -> Vec<f32> {
        match self {
            // Periodic Hann: w[n] = 0.5 * (1 - cos(2*pi*n/N))
            WindowFn::Hann => (0..len)
                .map(|n| {
                    0.5 * (1.0 - (std::f32::consts::TAU * n as f32 / len as f32).cos())
                })
                .collect(),
        }
    }
}

/// STFT and cropping parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectrogramParams {
    /// Frame length in samples; must be a power of two.
    pub window_size: usize,
    /// Stride between frames in samples; `0 < hop <= window_size`.
    pub hop: usize,
    pub window_fn: WindowFn,
    /// Rows removed from the bottom of the spectrogram by [`crop_rows`].
    pub crop_low: usize,
    /// Rows removed from the top.
    pub crop_high: usize,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self {
            window_size: 512,
            hop: 128,
            window_fn: WindowFn::Hann,
            crop_low: 4,
            crop_high: 24,
        }
    }
}

impl SpectrogramParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || !self.window_size.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "window_size must be a power of two, got {}",
                self.window_size
            )));
        }
        if self.hop == 0 || self.hop > self.window_size {
            return Err(Error::InvalidInput(format!(
                "hop must satisfy 0 < hop <= window_size, got {}",
                self.hop
            )));
        }
        Ok(())
    }
}

/// Number of full analysis frames for a sample count.
pub fn frame_count(samples: usize, window_size: usize, hop: usize) -> usize {
    if samples < window_size {
        0
    } else {
        (samples - window_size) / hop + 1
    }
}

/// A magnitude spectrogram of one recording.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Non-negative magnitudes; rows = frequency bins, cols = frames.
    pub values: Array2<f32>,
    pub params: SpectrogramParams,
    /// Count of low rows removed by cropping, so segment rows can be mapped
    /// back to FFT bins.
    pub row_offset: usize,
    pub recording_id: String,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

/// Compute the magnitude spectrogram of a recording.
///
/// Frame `t` covers samples `[t*hop, t*hop + window_size)`; bin `r` of the
/// windowed FFT lands in `values[(r, t)]`. Fails when the recording is
/// shorter than one window.
pub fn compute_spectrogram(recording: &Recording, params: &SpectrogramParams) -> Result<Spectrogram> {
    params.validate()?;
    let window_size = params.window_size;
    if recording.samples.len() < window_size {
        return Err(Error::RecordingTooShort {
            id: recording.id.clone(),
            samples: recording.samples.len(),
            window_size,
        });
    }

    let frames = frame_count(recording.samples.len(), window_size, params.hop);
    let bins = window_size / 2 + 1;
    let window = params.window_fn.coefficients(window_size);

    let mut planner = FftPlanner::<f32>::new();
    let fft: Arc<dyn Fft<f32>> = planner.plan_fft_forward(window_size);
    let mut scratch = vec![Complex32::default(); fft.get_inplace_scratch_len()];
    let mut buffer = vec![Complex32::default(); window_size];

    let mut values = Array2::<f32>::zeros((bins, frames));
    for t in 0..frames {
        let start = t * params.hop;
        for (i, slot) in buffer.iter_mut().enumerate() {
            *slot = Complex32::new(recording.samples[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buffer, &mut scratch);
        for r in 0..bins {
            values[(r, t)] = buffer[r].norm();
        }
    }

    Ok(Spectrogram {
        values,
        params: params.clone(),
        row_offset: 0,
        recording_id: recording.id.clone(),
        sample_rate: recording.sample_rate,
    })
}

/// Divide by the global maximum so the largest magnitude is exactly 1.0.
/// An all-zero spectrogram is returned unchanged.
pub fn normalize(mut spec: Spectrogram) -> Spectrogram {
    let max = spec.values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        spec.values.mapv_inplace(|v| v / max);
    }
    spec
}

/// Remove `low` rows from the bottom and `high` rows from the top,
/// recording the offset so segment rows can be mapped back to bins.
pub fn crop_rows(spec: Spectrogram, low: usize, high: usize) -> Result<Spectrogram> {
    let rows = spec.rows();
    if rows <= low + high {
        return Err(Error::TooFewRows {
            rows,
            required: low + high,
        });
    }
    let values = spec.values.slice(s![low..rows - high, ..]).to_owned();
    Ok(Spectrogram {
        values,
        row_offset: spec.row_offset + low,
        ..spec
    })
}

const SPEC_MAGIC: &[u8; 8] = b"BVSPEC01";

/// Write a spectrogram as a little-endian binary matrix file.
pub fn save_spec(spec: &Spectrogram, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(SPEC_MAGIC).map_err(io_err)?;
    for v in [
        spec.rows() as u32,
        spec.cols() as u32,
        spec.row_offset as u32,
        spec.params.window_size as u32,
        spec.params.hop as u32,
        spec.sample_rate,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for v in spec.values.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read a spectrogram written by [`save_spec`]. The recording id is left
/// empty; callers set it from the manifest.
pub fn load_spec(path: &Path) -> Result<Spectrogram> {
    let corrupt = |detail: &str| Error::SpecFile {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 6 * 4 || &bytes[..8] != SPEC_MAGIC {
        return Err(corrupt("bad header"));
    }
    let mut fields = [0u32; 6];
    for (i, field) in fields.iter_mut().enumerate() {
        let off = 8 + i * 4;
        *field = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    }
    let [rows, cols, row_offset, window_size, hop, sample_rate] = fields.map(|v| v as usize);
    let data_off = 8 + 6 * 4;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("dimension overflow"))?;
    if bytes.len() != data_off + expected {
        return Err(corrupt("length mismatch"));
    }
    let data: Vec<f32> = bytes[data_off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values =
        Array2::from_shape_vec((rows, cols), data).map_err(|_| corrupt("shape mismatch"))?;
    Ok(Spectrogram {
        values,
        params: SpectrogramParams {
            window_size,
            hop,
            ..SpectrogramParams::default()
        },
        row_offset,
        recording_id: String::new(),
        sample_rate: sample_rate as u32,
    })
}

/// Render the spectrogram as a grayscale PNG with row 0 at the bottom.
/// Debug output only; nothing in the pipeline reads it back.
pub fn write_png(spec: &Spectrogram, path: &Path) -> Result<()> {
    write_png_with_boxes(spec, &[], path)
}

/// Same as [`write_png`] but with bounding boxes drawn in white.
/// Boxes are `(row_min, row_max, col_min, col_max)` inclusive.
pub fn write_png_with_boxes(
    spec: &Spectrogram,
    boxes: &[(usize, usize, usize, usize)],
    path: &Path,
) -> Result<()> {
    let (rows, cols) = (spec.rows(), spec.cols());
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for ((r, c), &v) in spec.values.indexed_iter() {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        // row 0 at the bottom
        img.put_pixel(c as u32, (rows - 1 - r) as u32, image::Luma([level]));
    }
    for &(r0, r1, c0, c1) in boxes {
        let (r1, c1) = (r1.min(rows - 1), c1.min(cols - 1));
        for c in c0..=c1 {
            img.put_pixel(c as u32, (rows - 1 - r0) as u32, image::Luma([255]));
            img.put_pixel(c as u32, (rows - 1 - r1) as u32, image::Luma([255]));
        }
        for r in r0..=r1 {
            img.put_pixel(c0 as u32, (rows - 1 - r) as u32, image::Luma([255]));
            img.put_pixel(c1 as u32, (rows - 1 - r) as u32, image::Luma([255]));
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::InvalidInput(format!("png encode {}: {other}", path.display())),
    })
}
