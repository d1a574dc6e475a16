use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use viser_core::datamodel::{manifest_summary, DatasetManifest};
use viser_core::embeddings::{extract_embeddings, EmbeddingStore};
use viser_core::evaluation::{
    load_all_runs, make_loto_splits, roc_points, run_dir, run_protocol, Method, ProtocolContext, RunResult,
};
use viser_core::imageio::ImageStore;
use viser_core::reporting::{aggregate_runs, delta_table, render_report};
use viser_core::saliency::{
    compile_saliency, load_annotation_dir, load_mask_dir, read_gaze_sessions, SaliencyInputs, SaliencySource,
    SaliencyStore,
};
use viser_core::synthetic::{write_fixture_corpus, CorpusSpec};
use viser_core::training::{save_checkpoint, train_model};

use crate::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::{Cli, Command, EvalArgs, CANCEL, EXIT_PARTIAL, FIXTURE_CONFIG};

const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    fingerprint: String,
    tool: String,
}

fn write_provenance(dir: &Path, fingerprint: &str) -> Result<()> {
    let p = Provenance {
        fingerprint: fingerprint.into(),
        tool: format!("viser {}", env!("CARGO_PKG_VERSION")),
    };
    let path = dir.join(PROVENANCE_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&p)?).with_context(|| format!("writing {}", path.display()))
}

fn read_provenance(dir: &Path) -> Option<Provenance> {
    let bytes = std::fs::read(dir.join(PROVENANCE_FILE)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Machine-readable result line on stdout.
fn emit(value: serde_json::Value) {
    println!("{value}");
}

struct Session {
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    fingerprint: String,
}

impl Session {
    fn open(cli: &Cli) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&cli.config)?;
        if let Some(root) = &cli.output_root {
            cfg.output_root = root.clone();
        } else if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            cfg.output_root = PathBuf::from(root);
        }
        let manifest = cfg.validate()?;
        let fingerprint = cfg.fingerprint()?;
        Ok(Self {
            cfg,
            manifest,
            fingerprint,
        })
    }

    fn root(&self) -> &Path {
        &self.cfg.output_root
    }

    fn images(&self) -> ImageStore {
        let images = ImageStore::load(&self.manifest);
        for (id, msg) in &images.failures {
            tracing::warn!(sample_id = %id, error = %msg, "image not loaded");
        }
        images
    }

    fn load_saliency(&self, source: SaliencySource) -> Result<SaliencyStore> {
        let dir = SaliencyStore::source_dir(self.root(), source);
        if !dir.join("index.json").is_file() {
            bail!("saliency source {source} is not compiled; run `viser compile-saliency {source}` first");
        }
        match read_provenance(&dir) {
            Some(p) if p.fingerprint == self.fingerprint => {}
            _ => bail!(
                "{} was compiled under a different config; rerun `viser compile-saliency {source}`",
                dir.display()
            ),
        }
        Ok(SaliencyStore::load(self.root(), source)?)
    }

    fn load_embeddings(&self) -> Result<EmbeddingStore> {
        let extractor = self.cfg.extractor.as_ref().ok_or_else(|| anyhow!("no extractor configured"))?;
        let id = extractor.id();
        let dir = EmbeddingStore::dir(self.root(), &id);
        if !dir.join("index.json").is_file() {
            bail!("no embeddings for extractor {id}; run `viser embed` first");
        }
        let store = EmbeddingStore::load(self.root(), &id)?;
        let missing = self
            .manifest
            .samples
            .iter()
            .filter(|s| store.get(&s.sample_id).is_none() && !store.gaps.contains_key(&s.sample_id))
            .count();
        if missing > 0 {
            bail!("{missing} samples lack embeddings; run `viser embed` to complete the cache");
        }
        Ok(store)
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Fixture { dir, seed } => fixture(dir, *seed),
        Command::ValidateConfig => validate(cli),
        Command::CompileSaliency { source, dump_labelings } => {
            compile(&Session::open(cli)?, source, dump_labelings.as_deref())
        }
        Command::Train { method, attack, seed } => train(&Session::open(cli)?, *method, *attack, *seed),
        Command::Embed { jobs } => embed(&Session::open(cli)?, *jobs),
        Command::Eval(args) => eval(&Session::open(cli)?, args),
        Command::Report {
            baseline,
            format,
            methods,
            force,
            output,
            roc,
        } => {
            let s = Session::open(cli)?;
            report(&s, *baseline, *format, methods, *force, output.as_deref(), roc.as_deref())
        }
    }
}

fn fixture(dir: &Path, seed: u64) -> Result<u8> {
    let corpus = write_fixture_corpus(&dir.join("corpus"), &CorpusSpec { seed, ..Default::default() })?;
    let config = dir.join("viser.toml");
    std::fs::write(&config, FIXTURE_CONFIG).with_context(|| format!("writing {}", config.display()))?;
    emit(json!({
        "config": config,
        "manifest": corpus.manifest_path,
        "samples": corpus.manifest.len(),
    }));
    Ok(0)
}

fn validate(cli: &Cli) -> Result<u8> {
    let s = Session::open(cli)?;
    emit(json!({
        "valid": true,
        "fingerprint": s.fingerprint,
        "samples": s.manifest.len(),
        "summary": manifest_summary(&s.manifest),
        "methods": s.cfg.protocol.methods,
    }));
    Ok(0)
}

fn compile(s: &Session, source: &str, dump: Option<&Path>) -> Result<u8> {
    let sources: Vec<SaliencySource> = if source == "all" {
        SaliencySource::ALL
            .into_iter()
            .filter(|src| s.cfg.missing_source_input(*src).is_none())
            .collect()
    } else {
        vec![source.parse()?]
    };
    let ids: Vec<String> = s.manifest.samples.iter().map(|x| x.sample_id.clone()).collect();
    let size = s.cfg.image_size;
    let sc = &s.cfg.saliency;
    let mut dump_lines = Vec::new();
    for src in sources {
        if let Some(field) = s.cfg.missing_source_input(src) {
            bail!("{src} needs {field} in the config");
        }
        let store = if src == SaliencySource::Segmentation {
            let masks = load_mask_dir(sc.segmentation_dir.as_deref().expect("checked"), &ids, size)?;
            compile_saliency(src, SaliencyInputs::Segmentation(&masks), &ids, &s.cfg.saliency_config())?
        } else if src.hand_kernel().is_some() {
            let sets = load_annotation_dir(sc.annotation_dir.as_deref().expect("checked"), &ids, size)?;
            compile_saliency(src, SaliencyInputs::Annotations(&sets), &ids, &s.cfg.saliency_config())?
        } else {
            let sessions = read_gaze_sessions(sc.gaze.as_deref().expect("checked"), sc.remap.as_deref())?;
            compile_saliency(src, SaliencyInputs::Gaze(&sessions), &ids, &s.cfg.saliency_config())?
        };
        let dir = store.save(s.root())?;
        write_provenance(&dir, &s.fingerprint)?;
        for l in &store.labelings {
            dump_lines.push(serde_json::to_string(&json!({ "source": src, "labeling": l }))?);
        }
        let zero = store.maps.values().filter(|m| m.zero).count();
        tracing::info!(source = %src, maps = store.maps.len(), gaps = store.gaps.len(), "saliency compiled");
        emit(json!({
            "source": src,
            "dir": dir,
            "maps": store.maps.len(),
            "zero_maps": zero,
            "gaps": store.gaps.len(),
            "clamped_fixations": store.clamped_fixations,
        }));
    }
    if let Some(path) = dump {
        let mut text = dump_lines.join("\n");
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn train(s: &Session, method: Method, attack: viser_core::datamodel::AttackType, seed: u64) -> Result<u8> {
    if !attack.is_attack() {
        bail!("bonafide cannot be held out");
    }
    let mut tc = s.cfg.training();
    tc.seed = seed;
    let store = match method {
        Method::Xent => {
            tc.alpha = 0.0;
            tc.saliency_source = None;
            None
        }
        Method::Saliency(src) => {
            tc.saliency_source = Some(src);
            Some(s.load_saliency(src)?)
        }
        Method::Probe(_) => bail!("probe methods have no network to train; use `viser eval --method {method}`"),
    };
    let splits = make_loto_splits(&s.manifest, seed, s.cfg.protocol.bonafide_test_fraction)?;
    let split = splits
        .iter()
        .find(|p| p.held_out_attack == attack)
        .expect("one split per attack");
    let images = s.images();
    let mut model = train_model(split, &s.manifest, &images, store.as_ref(), &tc)?;
    let dir = run_dir(s.root(), &method.name(), attack, seed);
    save_checkpoint(&dir, &mut model)?;
    write_provenance(&dir, &s.fingerprint)?;
    emit(json!({
        "checkpoint": dir,
        "fingerprint": model.fingerprint,
        "final": model.log.last(),
        "skipped_samples": model.skipped,
    }));
    Ok(0)
}

fn embed(s: &Session, jobs: Option<usize>) -> Result<u8> {
    let cfg = s.cfg.extractor.as_ref().ok_or_else(|| anyhow!("no extractor configured"))?;
    let extractor = cfg.build()?;
    let images = s.images();
    let samples: Vec<_> = s.manifest.samples.iter().collect();
    let jobs = jobs.unwrap_or(s.cfg.protocol.jobs).max(1);
    let store = extract_embeddings(extractor.as_ref(), &samples, &images, Some(s.root()), jobs)?;
    let dir = EmbeddingStore::dir(s.root(), &store.extractor_id);
    write_provenance(&dir, &s.fingerprint)?;
    emit(json!({
        "extractor": store.extractor_id,
        "dir": dir,
        "vectors": store.len(),
        "dim": store.dim,
        "gaps": store.gaps.len(),
    }));
    Ok(0)
}

fn eval(s: &Session, args: &EvalArgs) -> Result<u8> {
    let mut pc = s.cfg.protocol.clone();
    if !args.methods.is_empty() {
        pc.methods = args.methods.clone();
    }
    if !args.attacks.is_empty() {
        pc.attacks = args.attacks.clone();
    }
    if let Some(seeds) = &args.seeds {
        pc.seeds = seeds.0.clone();
    }
    if let Some(j) = args.jobs {
        pc.jobs = j.max(1);
    }
    for m in &pc.methods {
        if let Some(field) = s.cfg.missing_input_for(*m) {
            bail!("method {m} needs {field} in the config");
        }
    }
    let mut saliency = BTreeMap::new();
    for m in &pc.methods {
        if let Method::Saliency(src) = m {
            saliency.insert(*src, s.load_saliency(*src)?);
        }
    }
    let embeddings = if pc.methods.iter().any(|m| matches!(m, Method::Probe(_))) {
        Some(s.load_embeddings()?)
    } else {
        None
    };
    std::fs::create_dir_all(s.root()).with_context(|| format!("creating {}", s.root().display()))?;
    let experiment = s.root().join("experiment.json");
    std::fs::write(
        &experiment,
        serde_json::to_vec_pretty(&json!({ "fingerprint": s.fingerprint, "config": s.cfg }))?,
    )
    .with_context(|| format!("writing {}", experiment.display()))?;

    let images = s.images();
    let ctx = ProtocolContext {
        manifest: &s.manifest,
        images: &images,
        saliency: &saliency,
        embeddings: embeddings.as_ref(),
        training: s.cfg.training(),
        probe: s.cfg.probe.clone(),
        output_root: s.root(),
        fingerprint: s.fingerprint.clone(),
        cancel: Some(&CANCEL),
    };
    let outcome = run_protocol(&ctx, &pc)?;
    for f in &outcome.failures {
        tracing::error!(method = %f.method, attack = %f.held_out_attack, seed = f.seed, error = %f.message, "run failed");
    }
    let total = pc.methods.len() * pc.attacks.len() * pc.seeds.len();
    emit(json!({
        "runs": total,
        "executed": outcome.executed,
        "cached": outcome.cached,
        "cancelled": outcome.cancelled,
        "failed": outcome.failures.len(),
        "fingerprint": s.fingerprint,
    }));
    Ok(if outcome.is_complete() { 0 } else { EXIT_PARTIAL })
}

fn report(
    s: &Session,
    baseline: Method,
    format: viser_core::reporting::ReportFormat,
    only: &[Method],
    force: bool,
    output: Option<&Path>,
    roc: Option<&Path>,
) -> Result<u8> {
    let mut runs: Vec<RunResult> = load_all_runs(s.root())?;
    if !only.is_empty() {
        runs.retain(|r| r.method == baseline.name() || only.iter().any(|m| m.name() == r.method));
    }
    let foreign: BTreeSet<&str> = runs
        .iter()
        .filter(|r| r.fingerprint != s.fingerprint)
        .map(|r| r.fingerprint.as_str())
        .collect();
    if !foreign.is_empty() {
        let n = runs.iter().filter(|r| r.fingerprint != s.fingerprint).count();
        if !force {
            bail!(
                "{n} stored runs were produced under other config fingerprints ({}); rerun eval or pass --force",
                foreign.iter().map(|f| &f[..12.min(f.len())]).collect::<Vec<_>>().join(", ")
            );
        }
        tracing::warn!(runs = n, "including runs from other config fingerprints");
    }
    for r in &runs {
        r.verify()?;
    }
    if let Some(path) = roc {
        write_roc(path, &runs)?;
    }
    let seeds: BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
    let mut by_method: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    let base_runs = by_method
        .remove(&baseline.name())
        .ok_or_else(|| anyhow!("no stored runs for baseline {baseline}"))?;
    let base = aggregate_runs(&base_runs, Some(seeds.len()))?;
    // Canonical method order first, then anything unrecognised alphabetically.
    let mut order: Vec<String> = Method::all().iter().map(Method::name).filter(|m| by_method.contains_key(m)).collect();
    order.extend(by_method.keys().filter(|k| !order.contains(k)).cloned().collect::<Vec<_>>());
    let mut reports = Vec::new();
    for m in &order {
        reports.push(aggregate_runs(&by_method[m], Some(seeds.len()))?);
    }
    let mut table = delta_table(&base, &reports)?;
    for m in Method::all() {
        table.display_names.insert(m.name(), m.display_name());
    }
    let text = render_report(&table, format);
    match output {
        Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    if table.is_partial() {
        tracing::warn!("report contains incomplete cells");
    }
    Ok(0)
}

fn write_roc(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut out = String::from("method,attack_type,seed,threshold,apcer,bpcer\n");
    for r in runs {
        for p in roc_points(&r.scores)? {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.held_out_attack, r.seed, p.threshold, p.apcer, p.bpcer
            ));
        }
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
