//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use viser_core::clustering::{hdbscan, HdbscanParams, NOISE};
use viser_core::datamodel::{AttackType, DatasetManifest, ImageSize, IrisSample, Label};
use viser_core::embeddings::{fit_probe, ProbeKind, ProbeParams};
use viser_core::evaluation::{
    apcer_at_bpcer, auroc, make_loto_splits, run_dir, run_protocol, Method, ProtocolConfig, ProtocolContext,
    ScoreRecord, SplitPlan, RESULT_FILE,
};
use viser_core::imageio::ImageStore;
use viser_core::nn::{BackboneKind, Network};
use viser_core::reporting::{best_rows, delta_table, Column, DeltaReport, Metric, MethodReport};
use viser_core::saliency::{
    compile_saliency, map_entropy, SaliencyConfig, SaliencyInputs, SaliencyMap, SaliencySource, SaliencyStore,
};
use viser_core::synthetic::{annotation_sets, steering_set, write_fixture_corpus, CorpusSpec, SteeringSpec};
use viser_core::training::{
    batch_tensor, cam_mass_fraction, image_cam, loss_and_backward, loss_value, save_checkpoint, train_model,
    TrainingConfig,
};
use viser_core::Grid;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// --- 1: table arithmetic -----------------------------------------------------

#[derive(Deserialize)]
struct TableRow {
    method: String,
    values: Vec<f64>,
    printed_average: f64,
    bold: Vec<String>,
}

#[derive(Deserialize)]
struct TableFixture {
    attacks: Vec<String>,
    auroc: Vec<TableRow>,
    apcer: Vec<TableRow>,
}

fn table_report(fx: &TableFixture) -> Result<DeltaReport, String> {
    let attacks: Vec<AttackType> = fx.attacks.iter().map(|a| a.parse().map_err(err)).collect::<Result<_, _>>()?;
    let (base_au, base_ap) = (&fx.auroc[0].values, &fx.apcer[0].values);
    let report = |i: usize| -> Result<MethodReport, String> {
        let cells: Vec<(AttackType, f64, f64)> = attacks
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let (au, ap) = (fx.auroc[i].values[k], fx.apcer[i].values[k]);
                if i == 0 {
                    (*a, au, ap)
                } else {
                    (*a, base_au[k] + au, base_ap[k] + ap)
                }
            })
            .collect();
        MethodReport::from_means(&fx.auroc[i].method, &cells).map_err(err)
    };
    let baseline = report(0)?;
    let methods = (1..fx.auroc.len()).map(report).collect::<Result<Vec<_>, _>>()?;
    delta_table(&baseline, &methods).map_err(err)
}

fn criterion_table() -> Outcome {
    let fx: TableFixture = serde_json::from_str(include_str!("data/table_fixture.json")).map_err(err)?;
    let report = table_report(&fx)?;
    let base = report.baseline.avg_auroc;
    ensure((base - 0.7711).abs() <= 1e-4, || format!("baseline AUROC average {base:.6}"))?;
    let row = report
        .rows
        .iter()
        .find(|r| r.report.method == "et_initial_denoised")
        .ok_or("missing et_initial_denoised row")?;
    ensure((row.avg_auroc_delta - 0.0608).abs() <= 5e-4, || {
        format!("AUROC delta average {:+.6}", row.avg_auroc_delta)
    })?;
    ensure((row.avg_apcer_delta + 0.1063).abs() <= 5e-4, || {
        format!("APCER delta average {:+.6}", row.avg_apcer_delta)
    })?;

    let attacks = report.attacks();
    let mut columns: Vec<(Column, String)> = attacks.iter().map(|a| (Column::Attack(*a), a.as_str().into())).collect();
    columns.push((Column::Average, "average".into()));
    for (metric, rows) in [(Metric::Auroc, &fx.auroc), (Metric::Apcer, &fx.apcer)] {
        for (col, name) in &columns {
            let ours = best_rows(&report, metric, *col);
            let theirs: Vec<usize> = (1..rows.len()).filter(|&i| rows[i].bold.contains(name)).map(|i| i - 1).collect();
            ensure(ours == theirs, || format!("{} {name}: bold rows {ours:?}, table {theirs:?}", metric.as_str()))?;
        }
        for (i, r) in rows.iter().enumerate().skip(1) {
            let avg = match metric {
                Metric::Auroc => report.rows[i - 1].avg_auroc_delta,
                Metric::Apcer => report.rows[i - 1].avg_apcer_delta,
            };
            ensure((avg - r.printed_average).abs() <= 5e-4, || {
                format!("{} {}: average {avg:+.6} vs printed {:+.4}", metric.as_str(), r.method, r.printed_average)
            })?;
        }
    }
    Ok(format!(
        "baseline {base:.4}; denoised initial ET {:+.4} / {:+.4}; bolding matches",
        row.avg_auroc_delta, row.avg_apcer_delta
    ))
}

// --- 2: metric oracles -------------------------------------------------------

fn brute_auroc(bf: &[f64], at: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in at {
        for b in bf {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (bf.len() * at.len()) as f64
}

/// Every observed score and +inf as a threshold; keep the lowest APCER among
/// thresholds meeting the BPCER target, earliest threshold on ties.
fn sweep_apcer(bf: &[f64], at: &[f64], target: f64) -> (f64, f64, f64) {
    let mut ts: Vec<f64> = bf.iter().chain(at).copied().collect();
    ts.push(f64::INFINITY);
    ts.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64, f64)> = None;
    for t in ts {
        let bpcer = bf.iter().filter(|&&b| b >= t).count() as f64 / bf.len() as f64;
        if bpcer > target {
            continue;
        }
        let apcer = at.iter().filter(|&&a| a < t).count() as f64 / at.len() as f64;
        if best.is_none_or(|(ap, _, _)| apcer < ap) {
            best = Some((apcer, t, bpcer));
        }
    }
    best.expect("+inf always passes")
}

fn records(bf: &[f64], at: &[f64]) -> Vec<ScoreRecord> {
    let mk = |label, i, s: &f64| ScoreRecord {
        sample_id: format!("{label:?}{i}"),
        label,
        score: *s,
    };
    bf.iter()
        .enumerate()
        .map(|(i, s)| mk(Label::Bonafide, i, s))
        .chain(at.iter().enumerate().map(|(i, s)| mk(Label::Attack, i, s)))
        .collect()
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.4) {
                rng.gen_range(0..8) as f64 / 8.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect()
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets = [0.01, 0.05, 0.1, 0.25, 0.5];
    let mut worst = 0.0f64;
    for set in 0..200 {
        let nb = rng.gen_range(2..=50);
        let na = rng.gen_range(2..=50);
        let (bf, at) = (random_scores(&mut rng, nb), random_scores(&mut rng, na));
        let recs = records(&bf, &at);
        let ours = auroc(&recs).map_err(err)?;
        let diff = (ours - brute_auroc(&bf, &at)).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("set {set}: auroc off by {diff:e}"))?;
        let target = targets[set % targets.len()];
        let got = apcer_at_bpcer(&recs, target).map_err(err)?;
        let (apcer, t, bpcer) = sweep_apcer(&bf, &at, target);
        let same_t = if t.is_infinite() {
            got.threshold > bf.iter().chain(&at).copied().fold(f64::MIN, f64::max)
        } else {
            got.threshold == t
        };
        ensure(got.apcer == apcer && got.achieved_bpcer == bpcer && same_t, || {
            format!("set {set}: apcer {got:?} vs sweep ({apcer}, {t}, {bpcer})")
        })?;
    }
    Ok(format!("200 sets; max auroc deviation {worst:e}; apcer exact"))
}

// --- 3: gradient check -------------------------------------------------------

fn criterion_gradients() -> Outcome {
    let size = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<Grid> = (0..4).map(|_| Grid::from_fn(size, size, |_, _| rng.gen::<f64>())).collect();
    let targets: Vec<Grid> = (0..4)
        .map(|_| Grid::from_fn(size, size, |r, c| if r < 5 && c >= 2 { rng.gen::<f64>() } else { 0.0 }))
        .collect();
    let labels = [Label::Bonafide, Label::Attack, Label::Attack, Label::Bonafide];
    let x = batch_tensor(&images.iter().collect::<Vec<_>>()).map_err(err)?;
    let tref: Vec<Option<&Grid>> = targets.iter().map(Some).collect();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for alpha in [0.0, 0.5, 1.0] {
        let mut net = Network::new(BackboneKind::Tiny { channels: 2 }, 11);
        net.zero_grad();
        let lb = loss_and_backward(&mut net, &x, &labels, &tref, alpha).map_err(err)?;
        ensure(alpha == 0.0 || lb.n_samples_with_saliency > 0, || {
            format!("alpha {alpha}: every CAM was zero")
        })?;
        let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
        for (k, grads) in analytic.iter().enumerate() {
            for (j, &g) in grads.iter().enumerate() {
                let orig = net.params()[k].value[j];
                net.params()[k].value[j] = orig + eps;
                let up = loss_value(&mut net, &x, &labels, &tref, alpha).map_err(err)?;
                net.params()[k].value[j] = orig - eps;
                let down = loss_value(&mut net, &x, &labels, &tref, alpha).map_err(err)?;
                net.params()[k].value[j] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
                ensure(rel < 1e-4, || {
                    format!("alpha {alpha}: param {k}[{j}] analytic {g:e} numeric {numeric:e}")
                })?;
            }
        }
    }
    Ok(format!("{checked} partials over alpha 0/0.5/1; max relative error {worst:.2e}"))
}

// --- 4: clustering oracle ----------------------------------------------------

#[derive(Deserialize)]
struct ClusterFixture {
    name: String,
    points: Vec<[f64; 2]>,
    labels: Vec<i32>,
}

#[derive(Deserialize)]
struct ClusterReference {
    min_cluster_size: usize,
    min_samples: usize,
    fixtures: Vec<ClusterFixture>,
}

fn criterion_clustering() -> Outcome {
    let r: ClusterReference = serde_json::from_str(include_str!("data/hdbscan_reference.json")).map_err(err)?;
    let params = HdbscanParams {
        min_cluster_size: r.min_cluster_size,
        min_samples: r.min_samples,
    };
    ensure(r.fixtures.len() == 100, || format!("{} fixtures", r.fixtures.len()))?;
    let mut worst = 1.0f64;
    for f in &r.fixtures {
        let ours = hdbscan(&f.points, params);
        let same = ours
            .labels
            .iter()
            .zip(&f.labels)
            .filter(|(a, b)| (**a >= 0) == (**b >= 0))
            .count();
        let agreement = if f.points.is_empty() { 1.0 } else { same as f64 / f.points.len() as f64 };
        worst = worst.min(agreement);
        ensure(agreement >= 0.95, || format!("{}: agreement {agreement:.3}", f.name))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 0..params.min_cluster_size {
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>() * 0.01, rng.gen::<f64>() * 0.01]).collect();
        let l = hdbscan(&pts, params);
        ensure(l.labels.iter().all(|&x| x == NOISE), || format!("{n} points not all noise"))?;
    }
    Ok(format!("100 fixtures, worst membership agreement {worst:.3}; small sets all noise"))
}

// --- 5: steering -------------------------------------------------------------

struct SteeringData {
    manifest: DatasetManifest,
    images: ImageStore,
    targets: SaliencyStore,
    split: SplitPlan,
}

fn steering_data(spec: &SteeringSpec) -> Result<SteeringData, String> {
    let set = steering_set(spec);
    let mut samples = Vec::new();
    let mut images = BTreeMap::new();
    let mut maps = BTreeMap::new();
    for (i, (img, label)) in set.images.iter().zip(&set.labels).enumerate() {
        let id = format!("s{i:03}");
        samples.push(IrisSample {
            sample_id: id.clone(),
            image_path: PathBuf::from(format!("{id}.png")),
            label: *label,
            attack_type: if *label == Label::Attack {
                AttackType::Printout
            } else {
                AttackType::Bonafide
            },
            source_corpus: "steering".into(),
        });
        images.insert(id.clone(), img.clone());
        maps.insert(id.clone(), SaliencyMap::new(id, SaliencySource::Segmentation, set.target.clone()));
    }
    let manifest = DatasetManifest::new(samples, spec.size).map_err(err)?;
    let split = SplitPlan {
        held_out_attack: AttackType::Printout,
        train: manifest.samples.iter().map(|s| s.sample_id.clone()).collect(),
        test: Vec::new(),
        seed: spec.seed,
    };
    Ok(SteeringData {
        manifest,
        images: ImageStore {
            images,
            failures: BTreeMap::new(),
        },
        targets: SaliencyStore {
            source: Some(SaliencySource::Segmentation),
            maps,
            ..Default::default()
        },
        split,
    })
}

fn criterion_steering() -> Outcome {
    let seed = 0;
    let spec = SteeringSpec { seed, ..Default::default() };
    let data = steering_data(&spec)?;
    let base = TrainingConfig {
        epochs: 100,
        batch_size: 10,
        learning_rate: 0.05,
        momentum: 0.0,
        image_size: spec.size,
        backbone: BackboneKind::Tiny { channels: 8 },
        seed,
        ..Default::default()
    };
    let train = |alpha: f64, source: Option<SaliencySource>| {
        let cfg = TrainingConfig {
            alpha,
            saliency_source: source,
            ..base.clone()
        };
        train_model(&data.split, &data.manifest, &data.images, Some(&data.targets), &cfg).map_err(err)
    };
    let test = steering_set(&SteeringSpec { seed: seed + 1000, ..spec });
    let mass_in_a = |net: &mut Network| -> Result<f64, String> {
        let mut total = 0.0;
        for (img, label) in test.images.iter().zip(&test.labels) {
            let cam = image_cam(net, img, label.class_index()).map_err(err)?;
            total += cam_mass_fraction(&cam, &test.region_a).map_err(err)?;
        }
        Ok(total / test.images.len() as f64)
    };

    let mut xent = train(0.0, None)?;
    let mut guided = train(0.5, Some(SaliencySource::Segmentation))?;
    let mut alpha0 = train(0.0, Some(SaliencySource::Segmentation))?;
    let (fx, fs) = (mass_in_a(&mut xent.network)?, mass_in_a(&mut guided.network)?);

    let dir = tempfile::tempdir().map_err(err)?;
    let (dx, d0) = (dir.path().join("xent"), dir.path().join("alpha0"));
    save_checkpoint(&dx, &mut xent).map_err(err)?;
    save_checkpoint(&d0, &mut alpha0).map_err(err)?;
    let read = |p: PathBuf| std::fs::read(p).map_err(err);
    let identical = read(dx.join("params.bin"))? == read(d0.join("params.bin"))?
        && read(dx.join("checkpoint.json"))? == read(d0.join("checkpoint.json"))?;
    ensure(identical, || "XENT and alpha=0 checkpoints differ".into())?;
    ensure(fs - fx >= 0.15, || format!("mass in A: xent {fx:.3}, saliency {fs:.3}, gap {:.3}", fs - fx))?;
    Ok(format!(
        "mass in A: xent {fx:.3}, saliency {fs:.3} (gap {:.3}); alpha=0 checkpoint identical",
        fs - fx
    ))
}

// --- 6: entropy ordering -----------------------------------------------------

fn criterion_entropy() -> Outcome {
    let size = ImageSize::new(48, 48);
    let sets = annotation_sets(20, 3, size, 6);
    let ids: Vec<String> = sets.iter().map(|s| s.sample_id.clone()).collect();
    let config = SaliencyConfig::new(size);
    let mut means = Vec::new();
    for source in [SaliencySource::HandHigh, SaliencySource::HandEqual, SaliencySource::HandLow] {
        let store = compile_saliency(source, SaliencyInputs::Annotations(&sets), &ids, &config).map_err(err)?;
        ensure(store.maps.len() == sets.len(), || format!("{source:?}: {} maps", store.maps.len()))?;
        let mut total = 0.0;
        for m in store.maps.values() {
            total += map_entropy(m).map_err(err)?;
        }
        means.push(total / store.maps.len() as f64);
    }
    let summary = format!("hand_high {:.4} > hand_equal {:.4} > hand_low {:.4}", means[0], means[1], means[2]);
    ensure(means[0] > means[1] && means[1] > means[2], || summary.clone())?;
    Ok(summary)
}

// --- 7: protocol shape -------------------------------------------------------

fn criterion_protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let corpus = write_fixture_corpus(&dir.path().join("corpus"), &CorpusSpec::default()).map_err(err)?;
    let manifest = &corpus.manifest;
    let histogram = manifest.histogram();
    ensure(histogram.len() == 8, || format!("manifest covers {} tags", histogram.len()))?;
    let images = ImageStore::load(manifest);
    let saliency = BTreeMap::new();
    let output = dir.path().join("out");
    let ctx = ProtocolContext {
        manifest,
        images: &images,
        saliency: &saliency,
        embeddings: None,
        training: TrainingConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.01,
            image_size: manifest.image_size,
            backbone: BackboneKind::Tiny { channels: 4 },
            ..Default::default()
        },
        probe: ProbeParams::default(),
        output_root: &output,
        fingerprint: "fixture".into(),
        cancel: None,
    };
    let cfg = ProtocolConfig {
        methods: vec![Method::Xent],
        seeds: vec![0, 1],
        jobs: 2,
        save_checkpoints: false,
        ..Default::default()
    };
    let first = run_protocol(&ctx, &cfg).map_err(err)?;
    ensure(first.is_complete(), || format!("failures: {:?}", first.failures))?;
    ensure(first.results.len() == 14 && first.executed == 14, || {
        format!("{} results, {} executed", first.results.len(), first.executed)
    })?;
    let index = manifest.index();
    for &seed in &cfg.seeds {
        for split in make_loto_splits(manifest, seed, cfg.bonafide_test_fraction).map_err(err)? {
            let leaked = split.train.iter().filter(|id| index[id.as_str()].attack_type == split.held_out_attack).count();
            ensure(leaked == 0, || format!("seed {seed}: {leaked} {} samples in train", split.held_out_attack.as_str()))?;
        }
    }
    let victim = run_dir(&output, "xent", AttackType::Synthetic, 1).join(RESULT_FILE);
    std::fs::remove_file(&victim).map_err(err)?;
    let second = run_protocol(&ctx, &cfg).map_err(err)?;
    ensure(second.executed == 1 && second.cached == 13 && second.results.len() == 14, || {
        format!("rerun executed {}, cached {}", second.executed, second.cached)
    })?;
    Ok("14 results; held-out attack never in train; rerun executed 1, cached 13".into())
}

// --- 8: probes ---------------------------------------------------------------

fn accuracy(vectors: &[Vec<f64>], labels: &[Label], kind: ProbeKind) -> Result<f64, String> {
    let model = fit_probe(vectors, labels, kind, &ProbeParams::default()).map_err(err)?;
    let mut correct = 0;
    for (x, l) in vectors.iter().zip(labels) {
        let predicted = if model.decision(x).map_err(err)? > 0.0 {
            Label::Attack
        } else {
            Label::Bonafide
        };
        correct += usize::from(predicted == *l);
    }
    Ok(correct as f64 / vectors.len() as f64)
}

fn criterion_probes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut noise = |s: f64| rng.gen_range(-s..s);
    let mut blobs = Vec::new();
    let mut blob_labels = Vec::new();
    for i in 0..80 {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Attack };
        let centre = if label == Label::Attack { 2.0 } else { -2.0 };
        blobs.push((0..5).map(|_| centre + noise(1.0)).collect::<Vec<f64>>());
        blob_labels.push(label);
    }
    let mut xor = Vec::new();
    let mut xor_labels = Vec::new();
    for i in 0..80 {
        let (sx, sy) = ([-1.0, 1.0][i % 2], [-1.0, 1.0][(i / 2) % 2]);
        xor.push(vec![sx + noise(0.3), sy + noise(0.3)]);
        xor_labels.push(if sx * sy > 0.0 { Label::Attack } else { Label::Bonafide });
    }
    let mut parts = Vec::new();
    for kind in ProbeKind::ALL {
        let acc = accuracy(&blobs, &blob_labels, kind)?;
        ensure(acc == 1.0, || format!("{} blob accuracy {acc}", kind.as_str()))?;
    }
    let rbf = accuracy(&xor, &xor_labels, ProbeKind::SvmRbf)?;
    ensure(rbf == 1.0, || format!("rbf XOR accuracy {rbf}"))?;
    parts.push(format!("XOR rbf {rbf:.2}"));
    for kind in [ProbeKind::Logreg, ProbeKind::SvmLinear] {
        let acc = accuracy(&xor, &xor_labels, kind)?;
        ensure(acc <= 0.75, || format!("{} XOR accuracy {acc}", kind.as_str()))?;
        parts.push(format!("{} {acc:.2}", kind.as_str()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let bf = random_scores(&mut rng, 30).iter().map(|s| 6.0 * s - 3.0).collect::<Vec<_>>();
        let at = random_scores(&mut rng, 30).iter().map(|s| 6.0 * s - 2.5).collect::<Vec<_>>();
        let squash = |v: &[f64]| v.iter().map(|s| s / (1.0 + s.abs())).collect::<Vec<_>>();
        let raw = auroc(&records(&bf, &at)).map_err(err)?;
        let squashed = auroc(&records(&squash(&bf), &squash(&at))).map_err(err)?;
        worst = worst.max((raw - squashed).abs());
    }
    ensure(worst <= 1e-12, || format!("AUROC moved by {worst:e} under squashing"))?;
    Ok(format!("blobs 100% for all probes; {}; squashing delta {worst:e}", parts.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 reporting arithmetic", criterion_table),
        ("2 metric oracles", criterion_metrics),
        ("3 gradient check", criterion_gradients),
        ("4 clustering oracle", criterion_clustering),
        ("5 saliency steering", criterion_steering),
        ("6 entropy ordering", criterion_entropy),
        ("7 protocol shape", criterion_protocol),
        ("8 probe sanity", criterion_probes),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
