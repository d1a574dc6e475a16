use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Full,
}

/// One fixation in normalized image coordinates (origin top-left, x to the right).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub x: f64,
    pub y: f64,
    pub duration_ms: f64,
    pub t_ms: f64,
    pub participant_id: String,
    pub phase: Phase,
}

impl FixationRecord {
    pub fn new(x: f64, y: f64, duration_ms: f64) -> Self {
        Self {
            x,
            y,
            duration_ms,
            t_ms: 0.0,
            participant_id: String::new(),
            phase: Phase::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite fixation coordinate ({}, {})",
                self.x, self.y
            )));
        }
        if !(self.duration_ms > 0.0) || !self.duration_ms.is_finite() {
            return Err(Error::Validation(format!(
                "fixation duration must be > 0, got {}",
                self.duration_ms
            )));
        }
        Ok(())
    }
}

/// Polynomial calibration map `(x', y') = P(x, y)`.
///
/// Terms are ordered by total degree, then by decreasing power of x:
/// `1, x, y, x², xy, y², x³, x²y, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapCoefficients {
    pub degree: u32,
    pub coeffs_x: Vec<f64>,
    pub coeffs_y: Vec<f64>,
}

impl RemapCoefficients {
    pub fn term_count(degree: u32) -> usize {
        let d = degree as usize;
        (d + 1) * (d + 2) / 2
    }

    pub fn identity() -> Self {
        Self {
            degree: 1,
            coeffs_x: vec![0.0, 1.0, 0.0],
            coeffs_y: vec![0.0, 0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::InvalidArgument("remap degree must be ≥ 1".into()));
        }
        let expected = Self::term_count(self.degree);
        if self.coeffs_x.len() != expected || self.coeffs_y.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "degree {} needs {expected} coefficients per axis, got {} and {}",
                self.degree,
                self.coeffs_x.len(),
                self.coeffs_y.len()
            )));
        }
        if self
            .coeffs_x
            .iter()
            .chain(&self.coeffs_y)
            .any(|c| !c.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite remap coefficient".into()));
        }
        Ok(())
    }

    fn terms(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::term_count(self.degree));
        for total in 0..=self.degree as i32 {
            for ypow in 0..=total {
                out.push(x.powi(total - ypow) * y.powi(ypow));
            }
        }
        out
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = self.terms(x, y);
        let dot = |c: &[f64]| c.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
        (dot(&self.coeffs_x), dot(&self.coeffs_y))
    }
}

impl Default for RemapCoefficients {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSession {
    pub sample_id: String,
    pub participant_id: String,
    pub fixations: Vec<FixationRecord>,
    pub remap: RemapCoefficients,
}

impl GazeSession {
    pub fn validate(&self) -> Result<()> {
        self.remap.validate()?;
        let mut seen_full = false;
        for (i, f) in self.fixations.iter().enumerate() {
            f.validate()?;
            if f.participant_id != self.participant_id {
                return Err(Error::Validation(format!(
                    "session {}/{}: fixation {i} belongs to participant {}",
                    self.sample_id, self.participant_id, f.participant_id
                )));
            }
            if i > 0 && f.t_ms < self.fixations[i - 1].t_ms {
                return Err(Error::Validation(format!(
                    "session {}/{}: fixations not time-ordered at index {i}",
                    self.sample_id, self.participant_id
                )));
            }
            match f.phase {
                Phase::Full => seen_full = true,
                Phase::Initial if seen_full => {
                    return Err(Error::Validation(format!(
                        "session {}/{}: initial-phase fixation after full-phase fixations",
                        self.sample_id, self.participant_id
                    )))
                }
                Phase::Initial => {}
            }
        }
        Ok(())
    }

    /// Fixations used by a phase-restricted map. The full window includes the initial phase.
    pub fn fixations_for(&self, phase: Phase) -> Vec<FixationRecord> {
        match phase {
            Phase::Full => self.fixations.clone(),
            Phase::Initial => self
                .fixations
                .iter()
                .filter(|f| f.phase == Phase::Initial)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemapReport {
    pub total: usize,
    pub clamped: usize,
}

impl RemapReport {
    pub fn clamped_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clamped as f64 / self.total as f64
        }
    }
}

/// Share of clamped fixations above which a session is reported.
pub const CLAMP_WARN_FRACTION: f64 = 0.2;

/// Applies the session's calibration polynomial, clamping results into the frame.
pub fn remap_fixations(session: &GazeSession) -> Result<(GazeSession, RemapReport)> {
    session.remap.validate()?;
    let mut clamped = 0;
    let fixations = session
        .fixations
        .iter()
        .map(|f| {
            let (x, y) = session.remap.apply(f.x, f.y);
            let (cx, cy) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
            if cx != x || cy != y || !x.is_finite() || !y.is_finite() {
                clamped += 1;
            }
            FixationRecord {
                x: if cx.is_finite() { cx } else { 0.5 },
                y: if cy.is_finite() { cy } else { 0.5 },
                ..f.clone()
            }
        })
        .collect::<Vec<_>>();
    let report = RemapReport {
        total: fixations.len(),
        clamped,
    };
    if report.clamped_fraction() > CLAMP_WARN_FRACTION {
        tracing::warn!(
            sample_id = %session.sample_id,
            participant_id = %session.participant_id,
            clamped = report.clamped,
            total = report.total,
            "many remapped fixations fell outside the frame"
        );
    }
    Ok((
        GazeSession {
            fixations,
            ..session.clone()
        },
        report,
    ))
}

/// One line of the gaze input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeRow {
    pub sample_id: String,
    pub participant_id: String,
    pub phase: Phase,
    pub t_ms: f64,
    pub x: f64,
    pub y: f64,
    pub duration_ms: f64,
}

/// One line of the per-participant calibration sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapRow {
    pub participant_id: String,
    pub degree: u32,
    pub coeffs_x: Vec<f64>,
    pub coeffs_y: Vec<f64>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_remap_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, RemapCoefficients>> {
    let rows: Vec<RemapRow> = read_jsonl(path.as_ref())?;
    let mut out = BTreeMap::new();
    for r in rows {
        let c = RemapCoefficients {
            degree: r.degree,
            coeffs_x: r.coeffs_x,
            coeffs_y: r.coeffs_y,
        };
        c.validate()?;
        out.insert(r.participant_id, c);
    }
    Ok(out)
}

/// Groups gaze rows into time-ordered sessions keyed by (sample, participant).
/// Participants without calibration rows get the identity map.
pub fn sessions_from_rows(
    rows: Vec<GazeRow>,
    remaps: &BTreeMap<String, RemapCoefficients>,
) -> Result<Vec<GazeSession>> {
    let mut grouped: BTreeMap<(String, String), Vec<FixationRecord>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry((r.sample_id.clone(), r.participant_id.clone()))
            .or_default()
            .push(FixationRecord {
                x: r.x,
                y: r.y,
                duration_ms: r.duration_ms,
                t_ms: r.t_ms,
                participant_id: r.participant_id,
                phase: r.phase,
            });
    }
    grouped
        .into_iter()
        .map(|((sample_id, participant_id), mut fixations)| {
            fixations.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms));
            let session = GazeSession {
                remap: remaps.get(&participant_id).cloned().unwrap_or_default(),
                sample_id,
                participant_id,
                fixations,
            };
            session.validate()?;
            Ok(session)
        })
        .collect()
}

pub fn read_gaze_sessions(
    gaze_path: impl AsRef<Path>,
    remap_path: Option<&Path>,
) -> Result<Vec<GazeSession>> {
    let rows: Vec<GazeRow> = read_jsonl(gaze_path.as_ref())?;
    let remaps = match remap_path {
        Some(p) => read_remap_file(p)?,
        None => BTreeMap::new(),
    };
    sessions_from_rows(rows, &remaps)
}
