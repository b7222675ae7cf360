//! Pipeline configuration: one flat key-value file capturing every
//! tunable, so a single artifact reproduces an experiment. Command-line
//! flags override file values; defaults match the published constants.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};

use birdvoc_core::classification::ClassificationParams;
use birdvoc_core::segmentation::{Connectivity, SegmentationParams};
use birdvoc_core::spectrogram::SpectrogramParams;
use birdvoc_core::synthgen::SyntheticConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_size: usize,
    pub hop: usize,
    pub crop_low: usize,
    pub crop_high: usize,
    pub clip_factor: f32,
    pub close_size: usize,
    pub dilate_size: usize,
    pub median_size: usize,
    pub min_size_initial: usize,
    pub min_size_final: usize,
    pub segment_pad: usize,
    pub connectivity: usize,
    pub match_threshold: f64,
    pub band_pad: usize,
    pub synth_recordings: usize,
    pub synth_duration_s: f64,
    pub synth_labels_min: usize,
    pub synth_labels_max: usize,
    pub synth_min_segment_px: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_size: 512,
            hop: 128,
            crop_low: 4,
            crop_high: 24,
            clip_factor: 3.0,
            close_size: 3,
            dilate_size: 4,
            median_size: 3,
            min_size_initial: 10,
            min_size_final: 100,
            segment_pad: 5,
            connectivity: 8,
            match_threshold: 0.4,
            band_pad: 5,
            synth_recordings: 50,
            synth_duration_s: 5.0,
            synth_labels_min: 2,
            synth_labels_max: 5,
            synth_min_segment_px: 0,
            seed: 42,
            threads: 0,
        }
    }
}

impl PipelineConfig {
    /// Load `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
            };
            config
                .set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(config)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("bad value for {key}: {e}"))
        }
        match key {
            "window_size" => self.window_size = parse(key, value)?,
            "hop" => self.hop = parse(key, value)?,
            "crop_low" => self.crop_low = parse(key, value)?,
            "crop_high" => self.crop_high = parse(key, value)?,
            "clip_factor" => self.clip_factor = parse(key, value)?,
            "close_size" => self.close_size = parse(key, value)?,
            "dilate_size" => self.dilate_size = parse(key, value)?,
            "median_size" => self.median_size = parse(key, value)?,
            "min_size_initial" => self.min_size_initial = parse(key, value)?,
            "min_size_final" => self.min_size_final = parse(key, value)?,
            "segment_pad" => self.segment_pad = parse(key, value)?,
            "connectivity" => {
                let c: usize = parse(key, value)?;
                if c != 4 && c != 8 {
                    bail!("connectivity must be 4 or 8, got {c}");
                }
                self.connectivity = c;
            }
            "match_threshold" => self.match_threshold = parse(key, value)?,
            "band_pad" => self.band_pad = parse(key, value)?,
            "synth_recordings" => self.synth_recordings = parse(key, value)?,
            "synth_duration_s" => self.synth_duration_s = parse(key, value)?,
            "synth_labels_min" => self.synth_labels_min = parse(key, value)?,
            "synth_labels_max" => self.synth_labels_max = parse(key, value)?,
            "synth_min_segment_px" => self.synth_min_segment_px = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn spectrogram_params(&self) -> SpectrogramParams {
        SpectrogramParams {
            window_size: self.window_size,
            hop: self.hop,
            crop_low: self.crop_low,
            crop_high: self.crop_high,
            ..SpectrogramParams::default()
        }
    }

    pub fn segmentation_params(&self) -> SegmentationParams {
        SegmentationParams {
            clip_factor: self.clip_factor,
            close_se: self.close_size,
            dilate_se: self.dilate_size,
            median_window: self.median_size,
            min_size_initial: self.min_size_initial,
            min_size_final: self.min_size_final,
            pad: self.segment_pad,
            connectivity: if self.connectivity == 4 {
                Connectivity::Four
            } else {
                Connectivity::Eight
            },
        }
    }

    pub fn classification_params(&self) -> ClassificationParams {
        ClassificationParams {
            threshold: self.match_threshold,
            band_pad: self.band_pad,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            recording_count: self.synth_recordings,
            duration_s: self.synth_duration_s,
            labels_min: self.synth_labels_min,
            labels_max: self.synth_labels_max,
            min_segment_px: self.synth_min_segment_px,
            rng_seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.window_size, 512);
        assert_eq!((c.crop_low, c.crop_high), (4, 24));
        assert_eq!(c.clip_factor, 3.0);
        assert_eq!((c.min_size_initial, c.min_size_final), (10, 100));
        assert_eq!(c.segment_pad, 5);
        assert_eq!(c.match_threshold, 0.4);
        assert_eq!(c.band_pad, 5);
        assert_eq!(c.synth_recordings, 50);
        assert_eq!((c.synth_labels_min, c.synth_labels_max), (2, 5));
    }

    #[test]
    fn config_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.cfg");
        std::fs::write(
            &path,
            "# comment\nclip_factor = 2.5\nseed = 7\nconnectivity = 4\n",
        )
        .unwrap();
        let config = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(config.clip_factor, 2.5);
        assert_eq!(config.seed, 7);
        assert_eq!(config.connectivity, 4);
        assert_eq!(config.hop, 128);

        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
        std::fs::write(&path, "connectivity = 6\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
        std::fs::write(&path, "just a line\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
    }
}
