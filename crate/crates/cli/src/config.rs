use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use viser_core::clustering::HdbscanParams;
use viser_core::datamodel::{load_manifest, DatasetManifest, ImageSize};
use viser_core::embeddings::{CommandExtractor, Extractor, ProbeParams, RemoteConfig, RemoteExtractor, StubExtractor};
use viser_core::evaluation::{Method, ProtocolConfig};
use viser_core::saliency::{SaliencyConfig, SaliencySource};
use viser_core::training::TrainingConfig;

pub const OUTPUT_ROOT_ENV: &str = "VISER_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Line-delimited sample records.
    pub manifest: PathBuf,
    pub image_size: ImageSize,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default)]
    pub saliency: SaliencySection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub probe: ProbeParams,
    #[serde(default)]
    pub extractor: Option<ExtractorConfig>,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("viser-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    /// `<dir>/<sample_id>.png` binary masks.
    pub segmentation_dir: Option<PathBuf>,
    /// `<dir>/<sample_id>/<annotator>.png` binary masks.
    pub annotation_dir: Option<PathBuf>,
    /// Fixation records.
    pub gaze: Option<PathBuf>,
    /// Per-participant remap coefficients.
    pub remap: Option<PathBuf>,
    pub sigma_fraction: f64,
    pub sigma_px: Option<f64>,
    pub clustering: HdbscanParams,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            segmentation_dir: None,
            annotation_dir: None,
            gaze: None,
            remap: None,
            sigma_fraction: 0.05,
            sigma_px: None,
            clustering: HdbscanParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorConfig {
    /// Mean-intensity stand-in, for fixtures.
    Stub,
    Remote(RemoteConfig),
    Command(CommandExtractor),
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<Box<dyn Extractor>> {
        Ok(match self {
            ExtractorConfig::Stub => Box::new(StubExtractor::new()),
            ExtractorConfig::Remote(c) => Box::new(RemoteExtractor::new(c.clone())?),
            ExtractorConfig::Command(c) => Box::new(c.clone()),
        })
    }

    /// Cache key of the produced vectors.
    pub fn id(&self) -> String {
        match self {
            ExtractorConfig::Stub => StubExtractor::new().id(),
            ExtractorConfig::Remote(c) => format!("remote-{}", c.model_id),
            ExtractorConfig::Command(c) => c.id.clone(),
        }
    }
}

/// One problem with one config field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: ")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_root);
        for p in [
            &mut self.saliency.segmentation_dir,
            &mut self.saliency.annotation_dir,
            &mut self.saliency.gaze,
            &mut self.saliency.remap,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// The training section with the experiment-wide image size applied.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            image_size: self.image_size,
            ..self.training.clone()
        }
    }

    pub fn saliency_config(&self) -> SaliencyConfig {
        SaliencyConfig {
            image_size: self.image_size,
            sigma_fraction: self.saliency.sigma_fraction,
            sigma_px: self.saliency.sigma_px,
            clustering: self.saliency.clustering,
        }
    }

    /// Checks every field and returns all problems at once. On success the
    /// parsed manifest is returned.
    pub fn validate(&self) -> std::result::Result<DatasetManifest, ConfigErrors> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if self.image_size.height == 0 || self.image_size.width == 0 {
            push("image_size", "height and width must be positive".into());
        }
        let manifest = if self.manifest.is_file() {
            match load_manifest(&self.manifest, self.image_size) {
                Ok(m) => Some(m),
                Err(e) => {
                    push("manifest", e.to_string());
                    None
                }
            }
        } else {
            push("manifest", format!("{} does not exist", self.manifest.display()));
            None
        };
        if let Some(m) = &manifest {
            let missing: Vec<String> = m
                .samples
                .iter()
                .filter(|s| !s.image_path.is_file())
                .map(|s| s.sample_id.clone())
                .collect();
            if !missing.is_empty() {
                push(
                    "manifest",
                    format!("{} image files missing (first: {})", missing.len(), missing[0]),
                );
            }
        }
        let s = &self.saliency;
        for (field, path, want_dir) in [
            ("saliency.segmentation_dir", &s.segmentation_dir, true),
            ("saliency.annotation_dir", &s.annotation_dir, true),
            ("saliency.gaze", &s.gaze, false),
            ("saliency.remap", &s.remap, false),
        ] {
            if let Some(p) = path {
                let ok = if want_dir { p.is_dir() } else { p.is_file() };
                if !ok {
                    push(field, format!("{} does not exist", p.display()));
                }
            }
        }
        if !(s.sigma_fraction > 0.0 && s.sigma_fraction.is_finite()) {
            push("saliency.sigma_fraction", "must be positive".into());
        }
        if let Some(px) = s.sigma_px {
            if !(px > 0.0 && px.is_finite()) {
                push("saliency.sigma_px", "must be positive".into());
            }
        }
        if s.clustering.min_cluster_size < 2 {
            push("saliency.clustering.min_cluster_size", "must be at least 2".into());
        }
        if s.clustering.min_samples < 1 {
            push("saliency.clustering.min_samples", "must be at least 1".into());
        }
        if let Err(e) = self.training().validate() {
            push("training", e.to_string());
        }
        let p = &self.protocol;
        if p.methods.is_empty() {
            push("protocol.methods", "at least one method is required".into());
        }
        if p.seeds.is_empty() {
            push("protocol.seeds", "at least one seed is required".into());
        }
        if !(p.bonafide_test_fraction > 0.0 && p.bonafide_test_fraction < 1.0) {
            push("protocol.bonafide_test_fraction", "must lie strictly between 0 and 1".into());
        }
        if p.jobs == 0 {
            push("protocol.jobs", "must be at least 1".into());
        }
        if let Some(a) = p.attacks.iter().find(|a| !a.is_attack()) {
            push("protocol.attacks", format!("{} cannot be held out", a.as_str()));
        }
        for m in &p.methods {
            if let Some(field) = self.missing_input_for(*m) {
                push("protocol.methods", format!("{m} needs {field}"));
            }
        }
        if !(self.probe.c > 0.0) {
            push("probe.c", "must be positive".into());
        }
        if let Some(ExtractorConfig::Remote(r)) = &self.extractor {
            if r.endpoint.is_empty() {
                push("extractor.endpoint", "must not be empty".into());
            }
        }
        if errs.is_empty() {
            Ok(manifest.expect("manifest loaded when no errors"))
        } else {
            Err(ConfigErrors(errs))
        }
    }

    /// Name of the config field a method depends on, when it is unset.
    pub fn missing_input_for(&self, method: Method) -> Option<&'static str> {
        match method {
            Method::Xent => None,
            Method::Saliency(src) => self.missing_source_input(src),
            Method::Probe(_) if self.extractor.is_none() => Some("extractor"),
            Method::Probe(_) => None,
        }
    }

    pub fn missing_source_input(&self, source: SaliencySource) -> Option<&'static str> {
        let s = &self.saliency;
        match source {
            SaliencySource::Segmentation if s.segmentation_dir.is_none() => Some("saliency.segmentation_dir"),
            _ if source.hand_kernel().is_some() && s.annotation_dir.is_none() => Some("saliency.annotation_dir"),
            _ if source.gaze_variant().is_some() && s.gaze.is_none() => Some("saliency.gaze"),
            _ => None,
        }
    }

    /// Stable hash of everything that changes results: the manifest content,
    /// image size, saliency parameters, the canonical training config, probe
    /// parameters, bonafide fraction and extractor id. Paths, seeds, methods and
    /// worker counts are excluded so adding seeds or moving files keeps
    /// completed runs valid.
    pub fn fingerprint(&self) -> Result<String> {
        let manifest = std::fs::read(&self.manifest)
            .with_context(|| format!("reading manifest {}", self.manifest.display()))?;
        let mut training = self.training();
        training.seed = 0;
        training.saliency_source = None;
        let view = serde_json::json!({
            "manifest_sha256": hex::encode(Sha256::digest(&manifest)),
            "image_size": self.image_size,
            "saliency": {
                "sigma_fraction": self.saliency.sigma_fraction,
                "sigma_px": self.saliency.sigma_px,
                "clustering": self.saliency.clustering,
            },
            "training": training.canonical(),
            "probe": ProbeParams { seed: 0, ..self.probe.clone() },
            "bonafide_test_fraction": self.protocol.bonafide_test_fraction,
            "extractor": self.extractor.as_ref().map(ExtractorConfig::id),
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&view)?)))
    }
}

/// Parses `0..11` (inclusive), `0..=11`, `3` or `0,2,5`.
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed range start {a:?}"))?;
        let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed range end {b:?}"))?;
        if hi < lo {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("bad seed {v:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..11").unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(parse_seeds("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("0, 5,9").unwrap(), vec![0, 5, 9]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn shipped_fixture_config_parses() {
        let cfg: ExperimentConfig = toml::from_str(crate::FIXTURE_CONFIG).unwrap();
        assert!(cfg.protocol.methods.contains(&Method::Xent));
        assert!(cfg.extractor.is_some());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("bogus = 1\n{}", crate::FIXTURE_CONFIG);
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }
}
