//! Canonical dataset types and the line-delimited manifest format.
//!
//! A manifest holds one JSON object per line:
//!
//! ```text
//! {"sample_id":"s001","image_path":"img/s001.png","label":"bonafide","attack_type":"bonafide","source_corpus":"lab-a"}
//! ```
//!
//! Relative image paths are resolved against the manifest's directory at load time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    Bonafide,
    Printout,
    Diseased,
    PostMortem,
    Synthetic,
    ContactsPlusPrint,
    TexturedContact,
    Artificial,
}

impl AttackType {
    pub const ALL: [AttackType; 8] = [
        AttackType::Bonafide,
        AttackType::Printout,
        AttackType::Diseased,
        AttackType::PostMortem,
        AttackType::Synthetic,
        AttackType::ContactsPlusPrint,
        AttackType::TexturedContact,
        AttackType::Artificial,
    ];

    /// The seven attack categories, in reporting column order.
    pub const ATTACKS: [AttackType; 7] = [
        AttackType::Printout,
        AttackType::Diseased,
        AttackType::PostMortem,
        AttackType::Synthetic,
        AttackType::ContactsPlusPrint,
        AttackType::TexturedContact,
        AttackType::Artificial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::Bonafide => "bonafide",
            AttackType::Printout => "printout",
            AttackType::Diseased => "diseased",
            AttackType::PostMortem => "post_mortem",
            AttackType::Synthetic => "synthetic",
            AttackType::ContactsPlusPrint => "contacts_plus_print",
            AttackType::TexturedContact => "textured_contact",
            AttackType::Artificial => "artificial",
        }
    }

    /// Human-readable column header.
    pub fn display_name(self) -> &'static str {
        match self {
            AttackType::Bonafide => "Bona fide",
            AttackType::Printout => "Printout",
            AttackType::Diseased => "Diseased",
            AttackType::PostMortem => "Post Mortem",
            AttackType::Synthetic => "Synthetic",
            AttackType::ContactsPlusPrint => "Contacts + Print",
            AttackType::TexturedContact => "Textured Contact",
            AttackType::Artificial => "Artificial",
        }
    }

    pub fn is_attack(self) -> bool {
        self != AttackType::Bonafide
    }

    pub fn label(self) -> Label {
        if self.is_attack() {
            Label::Attack
        } else {
            Label::Bonafide
        }
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTag {
                kind: "attack_type",
                tag: s.to_string(),
                expected: AttackType::ALL
                    .iter()
                    .map(|t| t.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        }
    }

    /// Class index used by the two-logit classifiers.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Attack => 1,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Bonafide => Label::Attack,
            Label::Attack => Label::Bonafide,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "attack" => Ok(Label::Attack),
            other => Err(Error::UnknownTag {
                kind: "label",
                tag: other.to_string(),
                expected: "bonafide, attack".to_string(),
            }),
        }
    }
}

/// Height and width in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrisSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub label: Label,
    pub attack_type: AttackType,
    pub source_corpus: String,
}

/// Raw on-disk record; tags are parsed by hand so unknown values report the closed set.
#[derive(Deserialize)]
struct RawRecord {
    sample_id: String,
    image_path: String,
    label: String,
    attack_type: String,
    source_corpus: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub samples: Vec<IrisSample>,
    pub image_size: ImageSize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    pub label: Label,
    pub attack_type: AttackType,
    pub source_corpus: String,
    pub count: usize,
}

impl DatasetManifest {
    /// Builds a manifest from in-memory samples, enforcing every manifest invariant.
    pub fn new(samples: Vec<IrisSample>, image_size: ImageSize) -> Result<Self> {
        let manifest = Self {
            samples,
            image_size,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size.height == 0 || self.image_size.width == 0 {
            return Err(Error::Validation("image_size must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.sample_id.is_empty() {
                return Err(Error::Validation("empty sample_id".into()));
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate sample_id {:?}",
                    s.sample_id
                )));
            }
            if s.label != s.attack_type.label() {
                return Err(Error::Validation(format!(
                    "sample {:?}: label {} inconsistent with attack_type {}",
                    s.sample_id, s.label, s.attack_type
                )));
            }
        }
        if !self.samples.iter().any(|s| s.label == Label::Bonafide) {
            return Err(Error::Validation("no bonafide samples".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&IrisSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn index(&self) -> BTreeMap<&str, &IrisSample> {
        self.samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect()
    }

    pub fn histogram(&self) -> BTreeMap<AttackType, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.attack_type).or_insert(0) += 1;
        }
        h
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        manifest_summary(self)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let rec = serde_json::json!({
                "sample_id": s.sample_id,
                "image_path": s.image_path.to_string_lossy(),
                "label": s.label.as_str(),
                "attack_type": s.attack_type.as_str(),
                "source_corpus": s.source_corpus,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest text. `base_dir` resolves relative image paths.
pub fn parse_manifest(
    text: &str,
    origin: &Path,
    base_dir: Option<&Path>,
    image_size: ImageSize,
) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let attack_type: AttackType = raw.attack_type.parse().map_err(|e| {
            Error::Validation(format!("{}:{line_no}: {e}", origin.display()))
        })?;
        let label: Label = raw.label.parse().map_err(|e| {
            Error::Validation(format!("{}:{line_no}: {e}", origin.display()))
        })?;
        let raw_path = PathBuf::from(&raw.image_path);
        let image_path = match base_dir {
            Some(base) if raw_path.is_relative() => base.join(raw_path),
            _ => raw_path,
        };
        samples.push(IrisSample {
            sample_id: raw.sample_id,
            image_path,
            label,
            attack_type,
            source_corpus: raw.source_corpus,
        });
    }
    DatasetManifest::new(samples, image_size)
}

pub fn load_manifest(path: impl AsRef<Path>, image_size: ImageSize) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path, path.parent(), image_size)
}

/// Counts per (label, attack_type, source_corpus), sorted by that key.
pub fn manifest_summary(manifest: &DatasetManifest) -> Vec<SummaryRow> {
    let mut counts: BTreeMap<(Label, AttackType, &str), usize> = BTreeMap::new();
    for s in &manifest.samples {
        *counts
            .entry((s.label, s.attack_type, s.source_corpus.as_str()))
            .or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|((label, attack_type, corpus), count)| SummaryRow {
            label,
            attack_type,
            source_corpus: corpus.to_string(),
            count,
        })
        .collect()
}
