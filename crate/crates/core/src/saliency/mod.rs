//! Saliency sources compiled into max-normalized maps.

mod compile;
mod gaze;
pub mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::ImageSize;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub use compile::{
    compile_saliency, load_annotation_dir, load_mask_dir, SaliencyConfig, SaliencyInputs, SaliencyStore, SessionLabeling,
};
pub use gaze::{
    read_gaze_sessions, read_remap_file, remap_fixations, sessions_from_rows, FixationRecord,
    GazeRow, GazeSession, Phase, RemapCoefficients, RemapReport, RemapRow, CLAMP_WARN_FRACTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    Segmentation,
    HandLow,
    HandEqual,
    HandHigh,
    EtFull,
    EtInitial,
    EtFullDenoised,
    EtInitialDenoised,
}

impl SaliencySource {
    pub const ALL: [SaliencySource; 8] = [
        SaliencySource::Segmentation,
        SaliencySource::HandLow,
        SaliencySource::HandEqual,
        SaliencySource::HandHigh,
        SaliencySource::EtFull,
        SaliencySource::EtInitial,
        SaliencySource::EtFullDenoised,
        SaliencySource::EtInitialDenoised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SaliencySource::Segmentation => "segmentation",
            SaliencySource::HandLow => "hand_low",
            SaliencySource::HandEqual => "hand_equal",
            SaliencySource::HandHigh => "hand_high",
            SaliencySource::EtFull => "et_full",
            SaliencySource::EtInitial => "et_initial",
            SaliencySource::EtFullDenoised => "et_full_denoised",
            SaliencySource::EtInitialDenoised => "et_initial_denoised",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            SaliencySource::Segmentation => "Segmentation Masks",
            SaliencySource::HandLow => "Hand Annotations (Low Entropy)",
            SaliencySource::HandEqual => "Hand Annotations (Equal Entropy)",
            SaliencySource::HandHigh => "Hand Annotations (High Entropy)",
            SaliencySource::EtFull => "Full Eye Tracking",
            SaliencySource::EtInitial => "Initial Eye Tracking",
            SaliencySource::EtFullDenoised => "De-noised Full ET",
            SaliencySource::EtInitialDenoised => "De-noised Initial ET",
        }
    }

    /// Blur kernel applied to averaged hand annotations.
    pub fn hand_kernel(self) -> Option<i64> {
        match self {
            SaliencySource::HandLow => Some(0),
            SaliencySource::HandEqual => Some(5),
            SaliencySource::HandHigh => Some(10),
            _ => None,
        }
    }

    /// (phase, denoised) for eye-tracking sources.
    pub fn gaze_variant(self) -> Option<(Phase, bool)> {
        match self {
            SaliencySource::EtFull => Some((Phase::Full, false)),
            SaliencySource::EtInitial => Some((Phase::Initial, false)),
            SaliencySource::EtFullDenoised => Some((Phase::Full, true)),
            SaliencySource::EtInitialDenoised => Some((Phase::Initial, true)),
            _ => None,
        }
    }
}

impl fmt::Display for SaliencySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SaliencySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SaliencySource::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTag {
                kind: "saliency source",
                tag: s.to_string(),
                expected: SaliencySource::ALL
                    .iter()
                    .map(|t| t.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

/// Non-negative map aligned to image coordinates. `zero` flags an all-zero map,
/// which normalization leaves untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub sample_id: String,
    pub source: SaliencySource,
    pub values: Grid,
    pub zero: bool,
}

impl SaliencyMap {
    pub fn new(sample_id: impl Into<String>, source: SaliencySource, values: Grid) -> Self {
        let zero = !values.as_slice().iter().any(|v| *v > 0.0);
        Self {
            sample_id: sample_id.into(),
            source,
            values,
            zero,
        }
    }

    pub fn with_identity(mut self, sample_id: impl Into<String>, source: SaliencySource) -> Self {
        self.sample_id = sample_id.into();
        self.source = source;
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn is_valid(&self) -> bool {
        self.values.is_finite_non_negative()
    }
}

/// Binary annotator masks for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub sample_id: String,
    pub masks: Vec<Grid>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let first = self.masks.first().ok_or_else(|| {
            Error::Validation(format!("annotation set {} has no masks", self.sample_id))
        })?;
        for m in &self.masks {
            m.ensure_shape(first.shape())?;
            if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!(
                    "annotation set {}: mask values must be 0 or 1",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

pub fn normalize_map(map: &SaliencyMap) -> SaliencyMap {
    let (values, zero) = ops::normalize_max(&map.values);
    SaliencyMap {
        sample_id: map.sample_id.clone(),
        source: map.source,
        values,
        zero,
    }
}

/// Pixel-wise mean followed by max-normalization.
pub fn aggregate_maps(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate_maps needs at least one map".into()))?;
    if let Some(m) = maps.iter().find(|m| m.sample_id != first.sample_id) {
        return Err(Error::InvalidArgument(format!(
            "cannot aggregate maps of different samples ({} and {})",
            first.sample_id, m.sample_id
        )));
    }
    let grids: Vec<&Grid> = maps.iter().map(|m| &m.values).collect();
    let mean = ops::mean_grid(&grids)?;
    Ok(normalize_map(&SaliencyMap::new(
        first.sample_id.clone(),
        first.source,
        mean,
    )))
}

/// Per-pixel share of annotators marking the pixel. Tagged as the unblurred variant.
pub fn average_annotations(ann: &AnnotationSet) -> Result<SaliencyMap> {
    ann.validate()?;
    Ok(SaliencyMap::new(
        ann.sample_id.clone(),
        SaliencySource::HandLow,
        ops::annotation_mean(&ann.masks)?,
    ))
}

pub fn blur_map(map: &SaliencyMap, kernel: i64) -> Result<SaliencyMap> {
    Ok(SaliencyMap {
        values: ops::gaussian_blur(&map.values, kernel)?,
        ..map.clone()
    })
}

pub fn map_entropy(map: &SaliencyMap) -> Result<f64> {
    ops::entropy_bits(&map.values)
}

/// Duration-weighted Gaussian heatmap, max-normalized. Identity fields are left for the
/// caller to fill (see [`SaliencyMap::with_identity`]).
pub fn render_gaze_heatmap(
    fixations: &[FixationRecord],
    sigma_px: f64,
    size: ImageSize,
) -> Result<SaliencyMap> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma_px must be positive, got {sigma_px}"
        )));
    }
    let density = ops::gaze_density(fixations, sigma_px, size);
    Ok(normalize_map(&SaliencyMap::new(
        "",
        SaliencySource::EtFull,
        density,
    )))
}
