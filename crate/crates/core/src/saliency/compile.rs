use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{denoise_fixations, ClusterLabeling, HdbscanParams};
use crate::datamodel::ImageSize;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::imageio;

use super::{
    aggregate_maps, average_annotations, blur_map, normalize_map, remap_fixations,
    render_gaze_heatmap, AnnotationSet, FixationRecord, GazeSession, SaliencyMap,
    SaliencySource,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub image_size: ImageSize,
    /// Gaussian sigma as a fraction of image width; ignored when `sigma_px` is set.
    pub sigma_fraction: f64,
    pub sigma_px: Option<f64>,
    pub clustering: HdbscanParams,
}

impl SaliencyConfig {
    pub fn new(image_size: ImageSize) -> Self {
        Self {
            image_size,
            sigma_fraction: 0.05,
            sigma_px: None,
            clustering: HdbscanParams::default(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_px
            .unwrap_or(self.sigma_fraction * self.image_size.width as f64)
    }
}

pub enum SaliencyInputs<'a> {
    /// Binary masks keyed by sample_id.
    Segmentation(&'a BTreeMap<String, Grid>),
    Annotations(&'a [AnnotationSet]),
    Gaze(&'a [GazeSession]),
}

/// Clustering outcome of one denoised session, for inspection dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLabeling {
    pub sample_id: String,
    pub participant_id: String,
    pub fixations: Vec<FixationRecord>,
    pub labeling: ClusterLabeling,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SaliencyStore {
    pub source: Option<SaliencySource>,
    pub maps: BTreeMap<String, SaliencyMap>,
    /// Requested samples without raw input.
    pub gaps: Vec<String>,
    pub clamped_fixations: usize,
    pub labelings: Vec<SessionLabeling>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    source: SaliencySource,
    entries: Vec<IndexEntry>,
    gaps: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    sample_id: String,
    file: String,
    zero: bool,
}

fn file_stem_for(sample_id: &str, used: &mut BTreeSet<String>) -> String {
    let base: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let mut name = base.clone();
    let mut k = 1;
    while !used.insert(name.clone()) {
        name = format!("{base}~{k}");
        k += 1;
    }
    name
}

impl SaliencyStore {
    pub fn get(&self, sample_id: &str) -> Option<&SaliencyMap> {
        self.maps.get(sample_id)
    }

    /// Usable training target: present and not the flagged all-zero map.
    pub fn target(&self, sample_id: &str) -> Option<&SaliencyMap> {
        self.maps.get(sample_id).filter(|m| !m.zero)
    }

    pub fn source_dir(root: &Path, source: SaliencySource) -> PathBuf {
        root.join("saliency").join(source.as_str())
    }

    /// Writes `saliency/<source>/<sample_id>.grid` plus `index.json` under `root`.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let source = self
            .source
            .ok_or_else(|| Error::InvalidArgument("store has no source".into()))?;
        let dir = Self::source_dir(root, source);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut used = BTreeSet::new();
        let mut entries = Vec::with_capacity(self.maps.len());
        for (id, map) in &self.maps {
            let file = format!("{}.grid", file_stem_for(id, &mut used));
            imageio::write_grid(dir.join(&file), &map.values)?;
            entries.push(IndexEntry {
                sample_id: id.clone(),
                file,
                zero: map.zero,
            });
        }
        let index = StoreIndex {
            source,
            entries,
            gaps: self.gaps.clone(),
        };
        imageio::write_atomic(
            &dir.join("index.json"),
            serde_json::to_string_pretty(&index)?.as_bytes(),
        )?;
        Ok(dir)
    }

    pub fn load(root: &Path, source: SaliencySource) -> Result<Self> {
        let dir = Self::source_dir(root, source);
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: StoreIndex = serde_json::from_str(&text)?;
        let mut maps = BTreeMap::new();
        for e in index.entries {
            let values = imageio::read_grid(dir.join(&e.file))?;
            maps.insert(
                e.sample_id.clone(),
                SaliencyMap {
                    sample_id: e.sample_id,
                    source: index.source,
                    values,
                    zero: e.zero,
                },
            );
        }
        Ok(Self {
            source: Some(index.source),
            maps,
            gaps: index.gaps,
            clamped_fixations: 0,
            labelings: Vec::new(),
        })
    }

    pub fn check_shape(&self, size: ImageSize) -> Result<()> {
        for m in self.maps.values() {
            m.values.ensure_shape((size.height, size.width))?;
        }
        Ok(())
    }
}

/// Compiles one saliency source into a keyed store covering `sample_ids`.
pub fn compile_saliency(
    source: SaliencySource,
    inputs: SaliencyInputs<'_>,
    sample_ids: &[String],
    config: &SaliencyConfig,
) -> Result<SaliencyStore> {
    let size = config.image_size;
    let shape = (size.height, size.width);
    let results: Vec<(String, Option<Result<CompiledSample>>)> = match (source, inputs) {
        (SaliencySource::Segmentation, SaliencyInputs::Segmentation(masks)) => sample_ids
            .par_iter()
            .map(|id| {
                let r = masks.get(id).map(|m| {
                    m.ensure_shape(shape)?;
                    if !m.is_finite_non_negative() {
                        return Err(Error::Validation(format!("mask for {id} has invalid values")));
                    }
                    Ok(CompiledSample::map(normalize_map(&SaliencyMap::new(
                        id.clone(),
                        source,
                        m.clone(),
                    ))))
                });
                (id.clone(), r)
            })
            .collect(),
        (s, SaliencyInputs::Annotations(sets)) if s.hand_kernel().is_some() => {
            let kernel = s.hand_kernel().unwrap_or(0);
            let by_id: BTreeMap<&str, &AnnotationSet> =
                sets.iter().map(|a| (a.sample_id.as_str(), a)).collect();
            sample_ids
                .par_iter()
                .map(|id| {
                    let r = by_id.get(id.as_str()).map(|ann| {
                        let avg = average_annotations(ann)?;
                        avg.values.ensure_shape(shape)?;
                        let blurred = blur_map(&avg, kernel)?;
                        Ok(CompiledSample::map(
                            normalize_map(&blurred).with_identity(id.clone(), source),
                        ))
                    });
                    (id.clone(), r)
                })
                .collect()
        }
        (s, SaliencyInputs::Gaze(sessions)) if s.gaze_variant().is_some() => {
            let mut by_id: BTreeMap<&str, Vec<&GazeSession>> = BTreeMap::new();
            for sess in sessions.iter() {
                by_id.entry(sess.sample_id.as_str()).or_default().push(sess);
            }
            sample_ids
                .par_iter()
                .map(|id| {
                    let r = by_id
                        .get(id.as_str())
                        .map(|sess| compile_gaze_sample(id, source, sess, config));
                    (id.clone(), r)
                })
                .collect()
        }
        (s, _) => {
            return Err(Error::InvalidArgument(format!(
                "inputs do not match saliency source {s}"
            )))
        }
    };

    let mut store = SaliencyStore {
        source: Some(source),
        ..Default::default()
    };
    for (id, r) in results {
        match r {
            None => store.gaps.push(id),
            Some(r) => {
                let compiled = r?;
                store.clamped_fixations += compiled.clamped;
                store.labelings.extend(compiled.labelings);
                store.maps.insert(id, compiled.map);
            }
        }
    }
    if !store.gaps.is_empty() {
        tracing::info!(
            source = %source,
            gaps = store.gaps.len(),
            "samples without saliency input; excluded from the saliency term"
        );
    }
    Ok(store)
}

/// Binary masks stored as `<dir>/<sample_id>.png`; samples without a file are
/// left out.
pub fn load_mask_dir(dir: &Path, sample_ids: &[String], size: ImageSize) -> Result<BTreeMap<String, Grid>> {
    let mut out = BTreeMap::new();
    for id in sample_ids {
        let path = dir.join(format!("{id}.png"));
        if path.is_file() {
            out.insert(id.clone(), imageio::load_mask(&path, size)?);
        }
    }
    Ok(out)
}

/// Annotator masks stored as `<dir>/<sample_id>/<annotator>.png`.
pub fn load_annotation_dir(dir: &Path, sample_ids: &[String], size: ImageSize) -> Result<Vec<AnnotationSet>> {
    let mut out = Vec::new();
    for id in sample_ids {
        let sub = dir.join(id);
        if !sub.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            continue;
        }
        let masks = files
            .iter()
            .map(|p| imageio::load_mask(p, size))
            .collect::<Result<Vec<_>>>()?;
        out.push(AnnotationSet {
            sample_id: id.clone(),
            masks,
        });
    }
    Ok(out)
}

struct CompiledSample {
    map: SaliencyMap,
    clamped: usize,
    labelings: Vec<SessionLabeling>,
}

impl CompiledSample {
    fn map(map: SaliencyMap) -> Self {
        Self {
            map,
            clamped: 0,
            labelings: Vec::new(),
        }
    }
}

/// remap → phase filter → (denoise) → render per participant → mean.
fn compile_gaze_sample(
    sample_id: &str,
    source: SaliencySource,
    sessions: &[&GazeSession],
    config: &SaliencyConfig,
) -> Result<CompiledSample> {
    let (phase, denoise) = source
        .gaze_variant()
        .ok_or_else(|| Error::InvalidArgument(format!("{source} is not a gaze source")))?;
    let sigma = config.sigma();
    let mut per_participant = Vec::with_capacity(sessions.len());
    let mut clamped = 0;
    let mut labelings = Vec::new();
    for sess in sessions {
        sess.validate()?;
        let (remapped, report) = remap_fixations(sess)?;
        clamped += report.clamped;
        let mut fixations = remapped.fixations_for(phase);
        if denoise {
            let (kept, labeling) = denoise_fixations(&fixations, config.clustering);
            labelings.push(SessionLabeling {
                sample_id: sample_id.to_string(),
                participant_id: sess.participant_id.clone(),
                fixations: fixations.clone(),
                labeling,
            });
            fixations = kept;
        }
        let heat = render_gaze_heatmap(&fixations, sigma, config.image_size)?
            .with_identity(sample_id, source);
        per_participant.push(heat);
    }
    let map = if per_participant.is_empty() {
        SaliencyMap::new(
            sample_id,
            source,
            Grid::zeros(config.image_size.height, config.image_size.width),
        )
    } else {
        aggregate_maps(&per_participant)?
    };
    Ok(CompiledSample {
        map,
        clamped,
        labelings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::{ops, Phase, RemapCoefficients};

    fn cfg() -> SaliencyConfig {
        SaliencyConfig::new(ImageSize::new(12, 12))
    }

    fn session(sample: &str, pid: &str, pts: &[(f64, f64, Phase)]) -> GazeSession {
        GazeSession {
            sample_id: sample.into(),
            participant_id: pid.into(),
            fixations: pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y, phase))| FixationRecord {
                    x,
                    y,
                    duration_ms: 120.0,
                    t_ms: i as f64,
                    participant_id: pid.into(),
                    phase,
                })
                .collect(),
            remap: RemapCoefficients::identity(),
        }
    }

    #[test]
    fn hand_equal_is_average_then_kernel_five() {
        let mut a = Grid::zeros(12, 12);
        let mut b = Grid::zeros(12, 12);
        for r in 3..7 {
            for c in 2..9 {
                a.set(r, c, 1.0);
            }
        }
        for r in 5..10 {
            for c in 4..6 {
                b.set(r, c, 1.0);
            }
        }
        let ann = AnnotationSet {
            sample_id: "s".into(),
            masks: vec![a, b],
        };
        let store = compile_saliency(
            SaliencySource::HandEqual,
            SaliencyInputs::Annotations(std::slice::from_ref(&ann)),
            &["s".to_string()],
            &cfg(),
        )
        .unwrap();
        let composed = normalize_map(&blur_map(&average_annotations(&ann).unwrap(), 5).unwrap());
        assert_eq!(store.maps["s"].values, composed.values);
        assert_eq!(store.maps["s"].source, SaliencySource::HandEqual);
    }

    #[test]
    fn initial_with_no_initial_fixations_is_flagged_empty() {
        let s = session("s", "p", &[(0.3, 0.3, Phase::Full), (0.6, 0.6, Phase::Full)]);
        let store = compile_saliency(
            SaliencySource::EtInitial,
            SaliencyInputs::Gaze(std::slice::from_ref(&s)),
            &["s".to_string()],
            &cfg(),
        )
        .unwrap();
        assert!(store.maps["s"].zero);
        assert!(store.target("s").is_none());
    }

    #[test]
    fn missing_inputs_are_gaps() {
        let masks = BTreeMap::from([("a".to_string(), Grid::filled(12, 12, 1.0))]);
        let store = compile_saliency(
            SaliencySource::Segmentation,
            SaliencyInputs::Segmentation(&masks),
            &["a".to_string(), "b".to_string()],
            &cfg(),
        )
        .unwrap();
        assert_eq!(store.gaps, vec!["b".to_string()]);
        assert_eq!(store.maps.len(), 1);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let masks = BTreeMap::new();
        assert!(compile_saliency(
            SaliencySource::EtFull,
            SaliencyInputs::Segmentation(&masks),
            &[],
            &cfg()
        )
        .is_err());
    }

    #[test]
    fn participants_are_averaged() {
        let s1 = session("s", "p1", &[(0.25, 0.25, Phase::Full)]);
        let s2 = session("s", "p2", &[(0.75, 0.75, Phase::Full)]);
        let store = compile_saliency(
            SaliencySource::EtFull,
            SaliencyInputs::Gaze(&[s1.clone(), s2.clone()]),
            &["s".to_string()],
            &cfg(),
        )
        .unwrap();
        let sigma = cfg().sigma();
        let size = cfg().image_size;
        let h1 = ops::normalize_max(&ops::gaze_density(&s1.fixations, sigma, size)).0;
        let h2 = ops::normalize_max(&ops::gaze_density(&s2.fixations, sigma, size)).0;
        let expected = ops::normalize_max(&ops::mean_grid(&[&h1, &h2]).unwrap()).0;
        for (a, b) in store.maps["s"].values.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn store_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let masks = BTreeMap::from([
            ("a/1".to_string(), Grid::from_fn(12, 12, |r, _| r as f64)),
            ("b".to_string(), Grid::zeros(12, 12)),
        ]);
        let ids = vec!["a/1".to_string(), "b".to_string(), "c".to_string()];
        let store = compile_saliency(
            SaliencySource::Segmentation,
            SaliencyInputs::Segmentation(&masks),
            &ids,
            &cfg(),
        )
        .unwrap();
        store.save(dir.path()).unwrap();
        let back = SaliencyStore::load(dir.path(), SaliencySource::Segmentation).unwrap();
        assert_eq!(back.maps, store.maps);
        assert_eq!(back.gaps, store.gaps);
        assert!(back.maps["b"].zero);
    }
}
