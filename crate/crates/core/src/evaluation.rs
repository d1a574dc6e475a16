//! Leave-one-attack-type-out splits, scoring and ISO/IEC 30107 metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackType, DatasetManifest, IrisSample, Label};
use crate::embeddings::{fit_probe, probe_scores, EmbeddingStore, ProbeKind, ProbeParams};
use crate::imageio::{self, ImageStore};
use crate::nn::Network;
use crate::saliency::{SaliencySource, SaliencyStore};
use crate::training::{self, TrainingConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub held_out_attack: AttackType,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitPlan {
    /// Checks the split invariants against the manifest.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let index = manifest.index();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("unknown sample {id} in split")))
        };
        let train: BTreeSet<&str> = self.train.iter().map(String::as_str).collect();
        let mut bf = (0, 0);
        for id in &self.train {
            let s = lookup(id)?;
            if s.attack_type == self.held_out_attack {
                return Err(Error::Validation(format!("held-out sample {id} in train")));
            }
            if s.label == Label::Bonafide {
                bf.0 += 1;
            }
        }
        for id in &self.test {
            if train.contains(id.as_str()) {
                return Err(Error::Validation(format!("{id} in both train and test")));
            }
            let s = lookup(id)?;
            match s.label {
                Label::Bonafide => bf.1 += 1,
                Label::Attack if s.attack_type != self.held_out_attack => {
                    return Err(Error::Validation(format!(
                        "test attack {id} is {}, not {}",
                        s.attack_type, self.held_out_attack
                    )))
                }
                Label::Attack => {}
            }
        }
        if bf.0 == 0 || bf.1 == 0 {
            return Err(Error::Validation("both partitions need bonafide samples".into()));
        }
        Ok(())
    }
}

/// Splits bonafide samples into (train, test) for one seed, stratified by
/// source corpus. Per-corpus test counts use largest-remainder rounding of the
/// overall target.
pub fn partition_bonafide(
    manifest: &DatasetManifest,
    seed: u64,
    test_fraction: f64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bonafide test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut by_corpus: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in manifest.samples.iter().filter(|s| s.label == Label::Bonafide) {
        by_corpus.entry(&s.source_corpus).or_default().push(&s.sample_id);
    }
    let n: usize = by_corpus.values().map(Vec::len).sum();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 bonafide samples to partition, found {n}"
        )));
    }
    let target = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let quotas: Vec<(usize, f64)> = by_corpus
        .values()
        .map(|v| {
            let q = v.len() as f64 * target as f64 / n as f64;
            (q.floor() as usize, q - q.floor())
        })
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.0).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    let mut left = target - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if counts[i] < by_corpus.values().nth(i).map_or(0, Vec::len) {
            counts[i] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ids, k) in by_corpus.into_values().zip(counts) {
        let mut ids = ids;
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        test.extend(ids[..k].iter().map(|s| s.to_string()));
        train.extend(ids[k..].iter().map(|s| s.to_string()));
    }
    train.sort();
    test.sort();
    Ok((train, test))
}

/// One split per attack type, sharing the seed's bonafide partition.
pub fn make_loto_splits(
    manifest: &DatasetManifest,
    seed: u64,
    bonafide_test_fraction: f64,
) -> Result<Vec<SplitPlan>> {
    let hist = manifest.histogram();
    let missing: Vec<&str> = AttackType::ATTACKS
        .iter()
        .filter(|a| !hist.contains_key(a))
        .map(|a| a.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "manifest lacks attack types: {}",
            missing.join(", ")
        )));
    }
    let (bf_train, bf_test) = partition_bonafide(manifest, seed, bonafide_test_fraction)?;
    Ok(AttackType::ATTACKS
        .iter()
        .map(|&held| {
            let mut train = bf_train.clone();
            let mut test = bf_test.clone();
            for s in manifest.samples.iter().filter(|s| s.label == Label::Attack) {
                if s.attack_type == held {
                    test.push(s.sample_id.clone());
                } else {
                    train.push(s.sample_id.clone());
                }
            }
            train.sort();
            test.sort();
            SplitPlan {
                held_out_attack: held,
                train,
                test,
                seed,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub label: Label,
    /// Higher means more attack-like.
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOutcome {
    pub records: Vec<ScoreRecord>,
    /// (sample_id, message) for samples that could not be scored.
    pub errors: Vec<(String, String)>,
}

/// Attack-class softmax probability per sample; unreadable images are recorded
/// as errors and skipped.
pub fn score_samples(net: &mut Network, samples: &[&IrisSample], images: &ImageStore) -> Result<ScoreOutcome> {
    let mut out = ScoreOutcome::default();
    let mut ready = Vec::new();
    for s in samples {
        match images.get(&s.sample_id) {
            Some(g) => ready.push((s.sample_id.as_str(), g, s.label)),
            None => out.errors.push((
                s.sample_id.clone(),
                images
                    .failures
                    .get(&s.sample_id)
                    .cloned()
                    .unwrap_or_else(|| "image not loaded".into()),
            )),
        }
    }
    out.records = training::predict(net, ready)?;
    Ok(out)
}

fn split_scores(scores: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bf = Vec::new();
    let mut at = Vec::new();
    for r in scores {
        if !r.score.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite score for {}", r.sample_id)));
        }
        match r.label {
            Label::Bonafide => bf.push(r.score),
            Label::Attack => at.push(r.score),
        }
    }
    if bf.is_empty() || at.is_empty() {
        return Err(Error::SingleClass {
            bonafide: bf.len(),
            attack: at.len(),
        });
    }
    bf.sort_by(f64::total_cmp);
    at.sort_by(f64::total_cmp);
    Ok((bf, at))
}

/// Probability that a random attack outscores a random bonafide sample, ties
/// counted one half.
pub fn auroc(scores: &[ScoreRecord]) -> Result<f64> {
    let (bf, at) = split_scores(scores)?;
    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    for &a in &at {
        let below = bf.partition_point(|&b| b < a);
        let not_above = bf.partition_point(|&b| b <= a);
        twice_u += (2 * below + (not_above - below)) as u128;
    }
    Ok(twice_u as f64 / (2.0 * bf.len() as f64 * at.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApcerAtBpcer {
    pub apcer: f64,
    pub threshold: f64,
    pub achieved_bpcer: f64,
}

/// APCER at the smallest threshold `t` whose BPCER (bonafide with score ≥ t)
/// does not exceed `bpcer_target`. Candidates are the observed scores plus
/// one value just above the maximum.
pub fn apcer_at_bpcer(scores: &[ScoreRecord], bpcer_target: f64) -> Result<ApcerAtBpcer> {
    let (bf, at) = split_scores(scores)?;
    let mut candidates: Vec<f64> = bf.iter().chain(&at).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(candidates.last().copied().unwrap_or(0.0).next_up());
    let n_bf = bf.len() as f64;
    let bpcer = |t: f64| (bf.len() - bf.partition_point(|&b| b < t)) as f64 / n_bf;
    // BPCER is non-increasing in t, so the first passing candidate is the smallest.
    let lo = candidates.partition_point(|&t| bpcer(t) > bpcer_target);
    let t = candidates[lo];
    Ok(ApcerAtBpcer {
        apcer: at.partition_point(|&a| a < t) as f64 / at.len() as f64,
        threshold: t,
        achieved_bpcer: bpcer(t),
    })
}

pub const BPCER_TARGET: f64 = 0.01;

/// One operating point: samples scoring at or above `threshold` are called attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Every distinct operating point, thresholds ascending, ending above the
/// maximum score (BPCER 0, APCER 1).
pub fn roc_points(scores: &[ScoreRecord]) -> Result<Vec<RocPoint>> {
    let (bf, at) = split_scores(scores)?;
    let mut thresholds: Vec<f64> = bf.iter().chain(&at).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(thresholds.last().copied().unwrap_or(0.0).next_up());
    Ok(thresholds
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            apcer: at.partition_point(|&a| a < t) as f64 / at.len() as f64,
            bpcer: (bf.len() - bf.partition_point(|&b| b < t)) as f64 / bf.len() as f64,
        })
        .collect())
}

/// Evaluation method: the cross-entropy baseline, saliency-guided training
/// with one source, or a probe on foundation-model embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Xent,
    Saliency(SaliencySource),
    Probe(ProbeKind),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Xent => "xent".into(),
            Method::Saliency(s) => s.as_str().into(),
            Method::Probe(k) => format!("probe_{}", k.as_str()),
        }
    }

    pub fn display_name(&self) -> String {
        match self {
            Method::Xent => "XENT".into(),
            Method::Saliency(s) => s.display_name().into(),
            Method::Probe(k) => k.display_name().into(),
        }
    }

    /// Every method, baseline first.
    pub fn all() -> Vec<Method> {
        let mut v = vec![Method::Xent];
        v.extend(SaliencySource::ALL.iter().map(|&s| Method::Saliency(s)));
        v.extend(ProbeKind::ALL.iter().map(|&k| Method::Probe(k)));
        v
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "xent" {
            return Ok(Method::Xent);
        }
        if let Some(k) = s.strip_prefix("probe_") {
            if let Ok(k) = k.parse() {
                return Ok(Method::Probe(k));
            }
        }
        if let Ok(src) = s.parse() {
            return Ok(Method::Saliency(src));
        }
        Err(Error::UnknownTag {
            kind: "method",
            tag: s.to_string(),
            expected: Method::all().iter().map(Method::name).collect::<Vec<_>>().join(", "),
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub held_out_attack: AttackType,
    pub seed: u64,
    #[serde(skip)]
    pub scores: Vec<ScoreRecord>,
    pub auroc: f64,
    pub apcer_at_bpcer1: f64,
    pub threshold: f64,
    pub achieved_bpcer: f64,
    pub n_scores: usize,
    pub n_errors: usize,
    pub fingerprint: String,
}

impl RunResult {
    pub fn from_scores(
        method: &str,
        held_out_attack: AttackType,
        seed: u64,
        scores: Vec<ScoreRecord>,
        n_errors: usize,
        fingerprint: &str,
    ) -> Result<Self> {
        let a = auroc(&scores)?;
        let ap = apcer_at_bpcer(&scores, BPCER_TARGET)?;
        Ok(Self {
            method: method.to_string(),
            held_out_attack,
            seed,
            n_scores: scores.len(),
            scores,
            auroc: a,
            apcer_at_bpcer1: ap.apcer,
            threshold: ap.threshold,
            achieved_bpcer: ap.achieved_bpcer,
            n_errors,
            fingerprint: fingerprint.to_string(),
        })
    }

    /// Stored metrics agree with a recomputation from the scores.
    pub fn verify(&self) -> Result<()> {
        let a = auroc(&self.scores)?;
        let ap = apcer_at_bpcer(&self.scores, BPCER_TARGET)?;
        if (a - self.auroc).abs() > 1e-12 || (ap.apcer - self.apcer_at_bpcer1).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "stored metrics of {}/{}/{} do not match scores",
                self.method, self.held_out_attack, self.seed
            )));
        }
        Ok(())
    }
}

pub const RESULT_FILE: &str = "result.json";
pub const SCORES_FILE: &str = "scores.jsonl";

pub fn run_dir(root: &Path, method: &str, attack: AttackType, seed: u64) -> PathBuf {
    root.join("runs").join(method).join(attack.as_str()).join(seed.to_string())
}

pub fn save_run(root: &Path, result: &RunResult) -> Result<PathBuf> {
    let dir = run_dir(root, &result.method, result.held_out_attack, result.seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut buf = Vec::new();
    for r in &result.scores {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("vec write");
    }
    imageio::write_atomic(&dir.join(SCORES_FILE), &buf)?;
    // The summary is written last; its presence marks the run complete.
    imageio::write_atomic(&dir.join(RESULT_FILE), &serde_json::to_vec_pretty(result)?)?;
    Ok(dir)
}

pub fn load_run(dir: &Path) -> Result<RunResult> {
    let path = dir.join(RESULT_FILE);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut result: RunResult = serde_json::from_slice(&text)?;
    let spath = dir.join(SCORES_FILE);
    let scores = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    for (i, line) in scores.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        result.scores.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: spath.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if result.scores.len() != result.n_scores {
        return Err(Error::Validation(format!(
            "{}: {} scores, summary says {}",
            spath.display(),
            result.scores.len(),
            result.n_scores
        )));
    }
    Ok(result)
}

/// Every stored result under `root/runs`, in path order.
pub fn load_all_runs(root: &Path) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    let runs = root.join("runs");
    if !runs.is_dir() {
        return Ok(out);
    }
    let mut dirs = Vec::new();
    collect_result_dirs(&runs, &mut dirs)?;
    dirs.sort();
    for d in dirs {
        out.push(load_run(&d)?);
    }
    Ok(out)
}

fn collect_result_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(RESULT_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            collect_result_dirs(&entry.path(), out)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub methods: Vec<Method>,
    pub attacks: Vec<AttackType>,
    pub seeds: Vec<u64>,
    pub bonafide_test_fraction: f64,
    pub jobs: usize,
    /// Persist model checkpoints next to each result.
    pub save_checkpoints: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Xent],
            attacks: AttackType::ATTACKS.to_vec(),
            seeds: (0..12).collect(),
            bonafide_test_fraction: 0.3,
            jobs: 1,
            save_checkpoints: true,
        }
    }
}

/// Shared read-only inputs of a protocol run.
pub struct ProtocolContext<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a ImageStore,
    pub saliency: &'a BTreeMap<SaliencySource, SaliencyStore>,
    pub embeddings: Option<&'a EmbeddingStore>,
    pub training: TrainingConfig,
    pub probe: ProbeParams,
    pub output_root: &'a Path,
    /// Fingerprint of the producing experiment config, stamped on every result.
    pub fingerprint: String,
    pub cancel: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunFailure {
    pub method: String,
    pub held_out_attack: AttackType,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ProtocolOutcome {
    pub results: Vec<RunResult>,
    pub executed: usize,
    pub cached: usize,
    pub cancelled: usize,
    pub failures: Vec<RunFailure>,
}

impl ProtocolOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.cancelled == 0
    }
}

enum TaskOutcome {
    Done(Box<RunResult>),
    Failed(String),
    Cancelled,
}

/// Runs every (method, held-out attack, seed) cell, skipping cells whose
/// result is already stored with the same fingerprint.
pub fn run_protocol(ctx: &ProtocolContext<'_>, cfg: &ProtocolConfig) -> Result<ProtocolOutcome> {
    for m in &cfg.methods {
        match m {
            Method::Saliency(s) if !ctx.saliency.contains_key(s) => {
                return Err(Error::InvalidArgument(format!("saliency store {s} not compiled")));
            }
            Method::Probe(_) if ctx.embeddings.is_none() => {
                return Err(Error::InvalidArgument("probe methods need an embedding store".into()));
            }
            _ => {}
        }
    }
    let mut splits: BTreeMap<u64, Vec<SplitPlan>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        splits.insert(seed, make_loto_splits(ctx.manifest, seed, cfg.bonafide_test_fraction)?);
    }

    let mut outcome = ProtocolOutcome::default();
    let mut pending = Vec::new();
    for &method in &cfg.methods {
        for &attack in &cfg.attacks {
            if !attack.is_attack() {
                return Err(Error::InvalidArgument("bonafide cannot be held out".into()));
            }
            for &seed in &cfg.seeds {
                let dir = run_dir(ctx.output_root, &method.name(), attack, seed);
                match load_run(&dir) {
                    Ok(r) if r.fingerprint == ctx.fingerprint => {
                        outcome.cached += 1;
                        outcome.results.push(r);
                        continue;
                    }
                    Ok(_) => tracing::warn!(dir = %dir.display(), "fingerprint changed, rerunning"),
                    Err(_) => {}
                }
                let split = splits[&seed]
                    .iter()
                    .find(|s| s.held_out_attack == attack)
                    .expect("one split per attack");
                pending.push((method, split));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let outcomes: Vec<TaskOutcome> = pool.install(|| {
        pending
            .par_iter()
            .map(|(method, split)| {
                if ctx.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                    return TaskOutcome::Cancelled;
                }
                match execute_run(ctx, cfg, *method, split) {
                    Ok(r) => TaskOutcome::Done(Box::new(r)),
                    Err(e) => TaskOutcome::Failed(e.to_string()),
                }
            })
            .collect()
    });

    for ((method, split), o) in pending.iter().zip(outcomes) {
        match o {
            TaskOutcome::Done(r) => {
                outcome.executed += 1;
                outcome.results.push(*r);
            }
            TaskOutcome::Cancelled => outcome.cancelled += 1,
            TaskOutcome::Failed(message) => {
                tracing::error!(method = %method, attack = %split.held_out_attack, seed = split.seed, %message, "run failed");
                outcome.failures.push(RunFailure {
                    method: method.name(),
                    held_out_attack: split.held_out_attack,
                    seed: split.seed,
                    message,
                });
            }
        }
    }
    outcome
        .results
        .sort_by(|a, b| (&a.method, a.held_out_attack, a.seed).cmp(&(&b.method, b.held_out_attack, b.seed)));
    Ok(outcome)
}

fn execute_run(
    ctx: &ProtocolContext<'_>,
    cfg: &ProtocolConfig,
    method: Method,
    split: &SplitPlan,
) -> Result<RunResult> {
    let name = method.name();
    let dir = run_dir(ctx.output_root, &name, split.held_out_attack, split.seed);
    tracing::info!(method = %name, attack = %split.held_out_attack, seed = split.seed, "run started");
    let index = ctx.manifest.index();
    let test: Vec<&IrisSample> = split.test.iter().filter_map(|id| index.get(id.as_str()).copied()).collect();
    let (scores, n_errors) = match method {
        Method::Xent | Method::Saliency(_) => {
            let mut tc = ctx.training.clone();
            tc.seed = split.seed;
            let store = match method {
                Method::Saliency(s) => {
                    tc.saliency_source = Some(s);
                    ctx.saliency.get(&s)
                }
                _ => {
                    tc.saliency_source = None;
                    tc.alpha = 0.0;
                    None
                }
            };
            let mut model = training::train_model(split, ctx.manifest, ctx.images, store, &tc)?;
            if cfg.save_checkpoints {
                training::save_checkpoint(&dir, &mut model)?;
            }
            let scored = score_samples(&mut model.network, &test, ctx.images)?;
            for (id, msg) in &scored.errors {
                tracing::warn!(sample_id = %id, error = %msg, "sample not scored");
            }
            (scored.records, scored.errors.len())
        }
        Method::Probe(kind) => {
            let store = ctx.embeddings.expect("checked above");
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for id in &split.train {
                if let (Some(v), Some(s)) = (store.get(id), index.get(id.as_str())) {
                    xs.push(v.iter().map(|&x| x as f64).collect::<Vec<_>>());
                    ys.push(s.label);
                }
            }
            let params = ProbeParams {
                seed: split.seed,
                ..ctx.probe.clone()
            };
            let model = fit_probe(&xs, &ys, kind, &params)?;
            let mut ids = Vec::new();
            let mut vecs = Vec::new();
            let mut labels = Vec::new();
            let mut missing = 0;
            for s in &test {
                match store.get(&s.sample_id) {
                    Some(v) => {
                        ids.push(s.sample_id.clone());
                        vecs.push(v.iter().map(|&x| x as f64).collect::<Vec<_>>());
                        labels.push(s.label);
                    }
                    None => missing += 1,
                }
            }
            (probe_scores(&model, &ids, &vecs, &labels)?, missing)
        }
    };
    let result = RunResult::from_scores(&name, split.held_out_attack, split.seed, scores, n_errors, &ctx.fingerprint)?;
    save_run(ctx.output_root, &result)?;
    Ok(result)
}
