//! Deterministic synthetic fixtures: iris-like corpora with every attack type,
//! masks, annotations and gaze, plus a two-region steering dataset.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackType, DatasetManifest, ImageSize, IrisSample, Label};
use crate::imageio;
use crate::saliency::{AnnotationSet, GazeRow, Phase, RemapRow};
use crate::{Error, Grid, Result};

/// Two disjoint square regions that each carry the full class signal: region A
/// through stripe orientation, region B through brightness.
#[derive(Debug, Clone)]
pub struct SteeringSet {
    pub images: Vec<Grid>,
    pub labels: Vec<Label>,
    /// Target saliency: 1 inside region A, 0 elsewhere.
    pub target: Grid,
    pub region_a: Grid,
    pub region_b: Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub size: ImageSize,
    pub n_per_class: usize,
    /// Stripe amplitude in region A and brightness offset in region B.
    pub contrast_a: f64,
    pub contrast_b: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SteeringSpec {
    fn default() -> Self {
        Self {
            size: ImageSize::new(16, 16),
            n_per_class: 40,
            contrast_a: 0.15,
            contrast_b: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

fn square(size: ImageSize, top: usize, left: usize, side: usize) -> Grid {
    Grid::from_fn(size.height, size.width, |r, c| {
        if (top..top + side).contains(&r) && (left..left + side).contains(&c) {
            1.0
        } else {
            0.0
        }
    })
}

pub fn steering_set(spec: &SteeringSpec) -> SteeringSet {
    let size = spec.size;
    let side = size.height.min(size.width) * 3 / 8;
    let region_a = square(size, 1, 1, side);
    let region_b = square(size, size.height - 1 - side, size.width - 1 - side, side);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let mut images = Vec::with_capacity(2 * spec.n_per_class);
    let mut labels = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..2 * spec.n_per_class {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Attack };
        let sign = if label == Label::Attack { 1.0 } else { -1.0 };
        let img = Grid::from_fn(size.height, size.width, |r, c| {
            let mut v = 0.5 + noise.sample(&mut rng);
            if region_a.get(r, c) > 0.0 {
                // Vertical stripes for attacks, horizontal for bonafide.
                let phase = if label == Label::Attack { c } else { r };
                v += if phase % 2 == 0 { spec.contrast_a } else { -spec.contrast_a };
            }
            if region_b.get(r, c) > 0.0 {
                v += sign * spec.contrast_b;
            }
            v.clamp(0.0, 1.0)
        });
        images.push(img);
        labels.push(label);
    }
    SteeringSet {
        images,
        labels,
        target: region_a.clone(),
        region_a,
        region_b,
    }
}

/// Multi-annotator binary masks: each annotator outlines a jittered disc
/// around a per-set centre.
pub fn annotation_sets(n_sets: usize, annotators: usize, size: ImageSize, seed: u64) -> Vec<AnnotationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sets)
        .map(|i| {
            let (h, w) = (size.height as f64, size.width as f64);
            let cy = h * rng.gen_range(0.35..0.65);
            let cx = w * rng.gen_range(0.35..0.65);
            let base = h.min(w) * rng.gen_range(0.12..0.25);
            let masks = (0..annotators)
                .map(|_| {
                    let dy = rng.gen_range(-0.05..0.05) * h;
                    let dx = rng.gen_range(-0.05..0.05) * w;
                    let r = base * rng.gen_range(0.8..1.2);
                    Grid::from_fn(size.height, size.width, |y, x| {
                        let d2 = (y as f64 + 0.5 - cy - dy).powi(2) + (x as f64 + 0.5 - cx - dx).powi(2);
                        if d2 <= r * r {
                            1.0
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            AnnotationSet {
                sample_id: format!("ann{i:03}"),
                masks,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub image_size: ImageSize,
    pub bonafide: usize,
    pub per_attack: usize,
    pub corpora: usize,
    pub annotators: usize,
    pub participants: usize,
    pub fixations_per_session: usize,
    pub initial_fixations: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            image_size: ImageSize::new(16, 16),
            bonafide: 20,
            per_attack: 4,
            corpora: 2,
            annotators: 3,
            participants: 3,
            fixations_per_session: 24,
            initial_fixations: 10,
            seed: 0,
        }
    }
}

/// Paths of a fixture corpus written to disk.
#[derive(Debug, Clone)]
pub struct FixtureCorpus {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub segmentation_dir: PathBuf,
    pub annotation_dir: PathBuf,
    pub gaze_path: PathBuf,
    pub remap_path: PathBuf,
}

/// Iris-like image: dark pupil, textured iris ring, bright sclera, and an
/// attack-specific artefact.
fn iris_image(size: ImageSize, attack: AttackType, rng: &mut ChaCha8Rng) -> Grid {
    let (h, w) = (size.height as f64, size.width as f64);
    let cy = h / 2.0 + rng.gen_range(-0.04..0.04) * h;
    let cx = w / 2.0 + rng.gen_range(-0.04..0.04) * w;
    let pupil = h.min(w) * rng.gen_range(0.10..0.14);
    let iris = h.min(w) * rng.gen_range(0.32..0.38);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.03).expect("finite");
    let attack_index = AttackType::ATTACKS.iter().position(|&a| a == attack);
    Grid::from_fn(size.height, size.width, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let r = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        let mut v = if r < pupil {
            0.08
        } else if r < iris {
            0.35 + 0.08 * (8.0 * theta + phase).sin()
        } else {
            0.8
        };
        if let Some(k) = attack_index {
            // Each attack type leaves its own periodic trace on the iris ring.
            let freq = 1.0 + k as f64;
            if r >= pupil && r < iris * 1.1 {
                v += 0.15 * (freq * (x as f64) * 0.9 + (k as f64) * (y as f64) * 0.7).cos();
            }
        }
        (v + noise.sample(rng)).clamp(0.0, 1.0)
    })
}

fn iris_mask(size: ImageSize) -> Grid {
    let (h, w) = (size.height as f64, size.width as f64);
    let (inner, outer) = (h.min(w) * 0.12, h.min(w) * 0.36);
    Grid::from_fn(size.height, size.width, |y, x| {
        let r = ((y as f64 + 0.5 - h / 2.0).powi(2) + (x as f64 + 0.5 - w / 2.0).powi(2)).sqrt();
        if r >= inner && r <= outer {
            1.0
        } else {
            0.0
        }
    })
}

/// Writes images, manifest, segmentation masks, annotations, gaze records and
/// calibration sidecar under `root`.
pub fn write_fixture_corpus(root: &Path, spec: &CorpusSpec) -> Result<FixtureCorpus> {
    if spec.bonafide < 2 || spec.per_attack == 0 || spec.corpora == 0 {
        return Err(Error::InvalidArgument(
            "fixture corpus needs at least 2 bonafide samples and one sample per attack".into(),
        ));
    }
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let images_dir = root.join("images");
    let segmentation_dir = root.join("segmentation");
    let annotation_dir = root.join("annotations");
    for d in [&images_dir, &segmentation_dir, &annotation_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut plan: Vec<(String, AttackType, String)> = Vec::new();
    for i in 0..spec.bonafide {
        plan.push((format!("bf{i:03}"), AttackType::Bonafide, format!("corpus{}", i % spec.corpora)));
    }
    for a in AttackType::ATTACKS {
        for j in 0..spec.per_attack {
            plan.push((format!("{}{j:03}", a.as_str()), a, format!("corpus{}", j % spec.corpora)));
        }
    }

    let mask = iris_mask(size);
    let mut samples = Vec::with_capacity(plan.len());
    let mut gaze = Vec::new();
    for (id, attack, corpus) in &plan {
        let img = iris_image(size, *attack, &mut rng);
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        imageio::save_gray_png(root.join(&rel), &img)?;
        imageio::save_gray_png(segmentation_dir.join(format!("{id}.png")), &mask)?;
        let sub = annotation_dir.join(id);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let set = &annotation_sets(1, spec.annotators, size, rng.gen())[0];
        for (k, m) in set.masks.iter().enumerate() {
            imageio::save_gray_png(sub.join(format!("annotator{k}.png")), m)?;
        }
        gaze.extend(gaze_rows(id, spec, &mut rng));
        samples.push(IrisSample {
            sample_id: id.clone(),
            image_path: rel,
            label: attack.label(),
            attack_type: *attack,
            source_corpus: corpus.clone(),
        });
    }

    let manifest = DatasetManifest::new(samples, size)?;
    let manifest_path = root.join("manifest.jsonl");
    imageio::write_atomic(&manifest_path, manifest.to_jsonl().as_bytes())?;

    let gaze_path = root.join("gaze.jsonl");
    imageio::write_atomic(&gaze_path, &jsonl(&gaze)?)?;
    let remaps: Vec<RemapRow> = (0..spec.participants)
        .map(|p| RemapRow {
            participant_id: format!("p{p}"),
            degree: 1,
            coeffs_x: vec![0.005 * p as f64, 0.99, 0.0],
            coeffs_y: vec![-0.005 * p as f64, 0.0, 1.01],
        })
        .collect();
    let remap_path = root.join("remap.jsonl");
    imageio::write_atomic(&remap_path, &jsonl(&remaps)?)?;

    // Manifest paths are relative to its directory; resolve them for callers.
    let manifest = crate::datamodel::load_manifest(&manifest_path, size)?;
    Ok(FixtureCorpus {
        root: root.to_path_buf(),
        manifest_path,
        manifest,
        segmentation_dir,
        annotation_dir,
        gaze_path,
        remap_path,
    })
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("vec write");
    }
    Ok(buf)
}

/// Fixations gather at the iris centre and a second spot near the upper-left
/// limbus, with a few stray glances.
fn gaze_rows(sample_id: &str, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<GazeRow> {
    const FOCI: [(f64, f64); 2] = [(0.5, 0.5), (0.3, 0.35)];
    let mut rows = Vec::new();
    let spread = Normal::<f64>::new(0.0, 0.03).expect("finite");
    for p in 0..spec.participants {
        let mut t = 0.0;
        for k in 0..spec.fixations_per_session {
            let u: f64 = rng.gen();
            let (x, y) = if u < 0.15 {
                (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
            } else {
                let (cx, cy) = FOCI[usize::from(u >= 0.7)];
                (
                    (cx + spread.sample(rng)).clamp(0.0, 1.0),
                    (cy + spread.sample(rng)).clamp(0.0, 1.0),
                )
            };
            let duration = rng.gen_range(80.0..400.0);
            rows.push(GazeRow {
                sample_id: sample_id.to_string(),
                participant_id: format!("p{p}"),
                phase: if k < spec.initial_fixations { Phase::Initial } else { Phase::Full },
                t_ms: t,
                x,
                y,
                duration_ms: duration,
            });
            t += duration + rng.gen_range(20.0..60.0);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steering_regions_are_disjoint_and_predictive() {
        let s = steering_set(&SteeringSpec::default());
        let overlap: f64 = s
            .region_a
            .as_slice()
            .iter()
            .zip(s.region_b.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(overlap, 0.0);
        let mean_in = |g: &Grid, m: &Grid| {
            g.as_slice().iter().zip(m.as_slice()).map(|(v, w)| v * w).sum::<f64>() / m.sum()
        };
        // Column-wise alternation dominates row-wise alternation inside A
        // exactly for attacks.
        let stripe = |g: &Grid, by_col: bool| {
            let mut acc = 0.0;
            for r in 1..7 {
                for c in 1..7 {
                    let k = if by_col { c } else { r };
                    acc += if k % 2 == 0 { g.get(r, c) } else { -g.get(r, c) };
                }
            }
            acc
        };
        for (img, label) in s.images.iter().zip(&s.labels) {
            assert_eq!(mean_in(img, &s.region_b) > 0.5, *label == Label::Attack);
            assert_eq!(stripe(img, true) > stripe(img, false), *label == Label::Attack);
        }
    }

    #[test]
    fn corpus_is_complete_and_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::default();
        let ca = write_fixture_corpus(a.path(), &spec).unwrap();
        let cb = write_fixture_corpus(b.path(), &spec).unwrap();
        assert_eq!(ca.manifest.histogram().len(), 8);
        let ga = std::fs::read(&ca.gaze_path).unwrap();
        assert_eq!(ga, std::fs::read(&cb.gaze_path).unwrap());
        let img = std::fs::read(a.path().join("images/printout000.png")).unwrap();
        assert_eq!(img, std::fs::read(b.path().join("images/printout000.png")).unwrap());
    }
}
