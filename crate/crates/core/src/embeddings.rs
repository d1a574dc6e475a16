//! Foundation-model embeddings and the classical probes fitted on them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine as _;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{IrisSample, Label};
use crate::evaluation::ScoreRecord;
use crate::imageio::{self, ImageStore};
use crate::{Error, Grid, Result};

/// Why one extraction failed.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractFailure {
    /// The extractor could not be reached at all; aborts the batch.
    Unreachable(String),
    /// This sample failed; recorded as a gap.
    Sample(String),
}

pub trait Extractor: Send + Sync {
    /// Stable identifier used as the cache key.
    fn id(&self) -> String;
    fn extract(&self, sample: &IrisSample, image: &Grid) -> std::result::Result<Vec<f32>, ExtractFailure>;
}

/// Maps the mean intensity `m` of an image to `(m, 1 − m)`.
#[derive(Debug, Default)]
pub struct StubExtractor {
    calls: AtomicUsize,
}

impl StubExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Extractor for StubExtractor {
    fn id(&self) -> String {
        "stub-mean-intensity".into()
    }

    fn extract(&self, _sample: &IrisSample, image: &Grid) -> std::result::Result<Vec<f32>, ExtractFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let m = image.sum() / image.len() as f64;
        Ok(vec![m as f32, (1.0 - m) as f32])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub model_id: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/embed".into(),
            token_env: "VISER_EXTRACTOR_TOKEN".into(),
            model_id: "dinov2-base".into(),
            timeout_secs: 30.0,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

/// HTTP client for an embedding service.
///
/// Request: `POST endpoint` with `{"model", "sample_id", "image_png_b64"}`.
/// Response: `{"embedding": [f32, ...]}`.
pub struct RemoteExtractor {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    sample_id: &'a str,
    image_png_b64: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

impl RemoteExtractor {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Extractor(format!("http client: {e}")))?;
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Ok(Self {
            config,
            client,
            token,
        })
    }

    fn attempt(&self, body: &EmbedRequest<'_>) -> std::result::Result<Vec<f32>, (bool, String)> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        // The bool marks failures worth retrying.
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err((true, format!("status {status}")));
        }
        if !status.is_success() {
            return Err((false, format!("status {status}")));
        }
        let parsed: EmbedResponse = resp.json().map_err(|e| (false, format!("bad response: {e}")))?;
        Ok(parsed.embedding)
    }
}

impl Extractor for RemoteExtractor {
    fn id(&self) -> String {
        format!("remote-{}", self.config.model_id)
    }

    fn extract(&self, sample: &IrisSample, image: &Grid) -> std::result::Result<Vec<f32>, ExtractFailure> {
        let png = match std::fs::read(&sample.image_path) {
            Ok(bytes) => bytes,
            Err(_) => imageio::encode_gray_png(image).map_err(|e| ExtractFailure::Sample(e.to_string()))?,
        };
        let body = EmbedRequest {
            model: &self.config.model_id,
            sample_id: &sample.sample_id,
            image_png_b64: base64::engine::general_purpose::STANDARD.encode(png),
        };
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(8)));
            }
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err((true, msg)) => {
                    tracing::warn!(sample_id = %sample.sample_id, attempt, error = %msg, "extractor request failed");
                    last = msg;
                }
                Err((false, msg)) => return Err(ExtractFailure::Sample(msg)),
            }
        }
        Err(ExtractFailure::Unreachable(format!(
            "{} after {} attempts: {last}",
            self.config.endpoint,
            self.config.retries + 1
        )))
    }
}

/// Runs a local inference command once per image: `program args... <image_path>`,
/// expecting a JSON array of numbers on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandExtractor {
    pub id: String,
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Extractor for CommandExtractor {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn extract(&self, sample: &IrisSample, _image: &Grid) -> std::result::Result<Vec<f32>, ExtractFailure> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&sample.image_path)
            .output()
            .map_err(|e| ExtractFailure::Unreachable(format!("{}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(ExtractFailure::Sample(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| ExtractFailure::Sample(format!("bad output: {e}")))
    }
}

/// Embedding vectors of one extractor, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    pub extractor_id: String,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f32>>,
    pub gaps: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    extractor_id: String,
    dim: usize,
    count: usize,
    gaps: BTreeMap<String, String>,
}

const VECTORS_FILE: &str = "vectors.bin";
const INDEX_FILE: &str = "index.json";

impl EmbeddingStore {
    pub fn new(extractor_id: impl Into<String>) -> Self {
        Self {
            extractor_id: extractor_id.into(),
            ..Default::default()
        }
    }

    pub fn get(&self, sample_id: &str) -> Option<&[f32]> {
        self.vectors.get(sample_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dir(root: &Path, extractor_id: &str) -> PathBuf {
        let safe: String = extractor_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        root.join("embeddings").join(safe)
    }

    fn insert(&mut self, sample_id: String, values: Vec<f32>) -> Result<()> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Extractor(format!("{sample_id}: empty or non-finite embedding")));
        }
        if self.vectors.is_empty() && self.dim == 0 {
            self.dim = values.len();
        } else if values.len() != self.dim {
            return Err(Error::Extractor(format!(
                "{sample_id}: embedding length {} differs from store length {}",
                values.len(),
                self.dim
            )));
        }
        self.gaps.remove(&sample_id);
        self.vectors.insert(sample_id, values);
        Ok(())
    }

    /// Records: u32 id length, id bytes, u32 vector length, f32 values; all
    /// little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for (id, v) in &self.vectors {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
        let bad = || Error::Validation(format!("{}: truncated embedding record", path.display()));
        let mut out = BTreeMap::new();
        let mut pos = 0;
        fn take<'b>(bytes: &'b [u8], pos: &mut usize, n: usize) -> Option<&'b [u8]> {
            let s = bytes.get(*pos..*pos + n)?;
            *pos += n;
            Some(s)
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        while pos < bytes.len() {
            let n = u32_at(take(bytes, &mut pos, 4).ok_or_else(bad)?);
            let id = String::from_utf8(take(bytes, &mut pos, n).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
            let len = u32_at(take(bytes, &mut pos, 4).ok_or_else(bad)?);
            let v = take(bytes, &mut pos, len * 4)
                .ok_or_else(bad)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.insert(id, v);
        }
        Ok(out)
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = Self::dir(root, &self.extractor_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        imageio::write_atomic(&dir.join(VECTORS_FILE), &self.encode())?;
        let index = StoreIndex {
            extractor_id: self.extractor_id.clone(),
            dim: self.dim,
            count: self.vectors.len(),
            gaps: self.gaps.clone(),
        };
        imageio::write_atomic(&dir.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
        Ok(dir)
    }

    pub fn load(root: &Path, extractor_id: &str) -> Result<Self> {
        let dir = Self::dir(root, extractor_id);
        let ipath = dir.join(INDEX_FILE);
        let text = std::fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let index: StoreIndex = serde_json::from_slice(&text)?;
        let vpath = dir.join(VECTORS_FILE);
        let bytes = std::fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let vectors = Self::decode(&bytes, &vpath)?;
        if vectors.len() != index.count || vectors.values().any(|v| v.len() != index.dim) {
            return Err(Error::Validation(format!("{}: index does not match vectors", dir.display())));
        }
        Ok(Self {
            extractor_id: index.extractor_id,
            dim: index.dim,
            vectors,
            gaps: index.gaps,
        })
    }
}

/// Extracts embeddings for `samples`, reusing and extending the on-disk cache
/// under `cache_root` when given. Only samples missing from the cache reach the
/// extractor.
pub fn extract_embeddings(
    extractor: &dyn Extractor,
    samples: &[&IrisSample],
    images: &ImageStore,
    cache_root: Option<&Path>,
    parallelism: usize,
) -> Result<EmbeddingStore> {
    let id = extractor.id();
    let mut store = match cache_root {
        Some(root) if EmbeddingStore::dir(root, &id).join(INDEX_FILE).is_file() => EmbeddingStore::load(root, &id)?,
        _ => EmbeddingStore::new(&id),
    };
    let todo: Vec<&IrisSample> = samples
        .iter()
        .copied()
        .filter(|s| !store.vectors.contains_key(&s.sample_id))
        .collect();
    if todo.is_empty() {
        return Ok(store);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Extractor(format!("worker pool: {e}")))?;
    let results: Vec<(String, std::result::Result<Vec<f32>, ExtractFailure>)> = pool.install(|| {
        todo.par_iter()
            .map(|s| {
                let r = match images.get(&s.sample_id) {
                    Some(g) => extractor.extract(s, g),
                    None => Err(ExtractFailure::Sample("image not loaded".into())),
                };
                (s.sample_id.clone(), r)
            })
            .collect()
    });
    let mut unreachable = None;
    for (sid, r) in results {
        match r {
            Ok(v) => {
                if let Err(e) = store.insert(sid.clone(), v) {
                    store.gaps.insert(sid, e.to_string());
                }
            }
            Err(ExtractFailure::Sample(msg)) => {
                tracing::warn!(sample_id = %sid, error = %msg, "embedding gap");
                store.gaps.insert(sid, msg);
            }
            Err(ExtractFailure::Unreachable(msg)) => unreachable = Some(msg),
        }
    }
    // Whatever succeeded is cached even if the extractor went away mid-batch.
    if let Some(root) = cache_root {
        store.save(root)?;
    }
    if let Some(msg) = unreachable {
        return Err(Error::Extractor(format!("extractor unreachable: {msg}")));
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Logreg,
    SvmLinear,
    SvmRbf,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Logreg, ProbeKind::SvmLinear, ProbeKind::SvmRbf];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Logreg => "logreg",
            ProbeKind::SvmLinear => "svm_linear",
            ProbeKind::SvmRbf => "svm_rbf",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ProbeKind::Logreg => "LogReg",
            ProbeKind::SvmLinear => "SVM",
            ProbeKind::SvmRbf => "SVM-RBF",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownTag {
                kind: "probe",
                tag: s.to_string(),
                expected: "logreg, svm_linear, svm_rbf".into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    pub c: f64,
    /// RBF width; `None` uses 1 / (d · variance of the standardized data).
    pub gamma: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            max_iter: 1000,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProbeParameters {
    Linear { w: Vec<f64>, b: f64 },
    Kernel { gamma: f64, support: Vec<Vec<f64>>, coef: Vec<f64>, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub params: ProbeParameters,
    pub converged: bool,
    pub iterations: usize,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Signed distance-like value; positive means attack.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector length {} for a probe fitted on {}",
                x.len(),
                self.dim()
            )));
        }
        let z = self.standardize(x);
        Ok(match &self.params {
            ProbeParameters::Linear { w, b } => dot(w, &z) + b,
            ProbeParameters::Kernel { gamma, support, coef, b } => {
                support.iter().zip(coef).map(|(s, c)| c * rbf(s, &z, *gamma)).sum::<f64>() + b
            }
        })
    }

    /// Attack score in (0, 1): the logistic of the decision value.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(x)?))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Fits a probe on (vector, label) pairs. Features are standardized with
/// train statistics; constant features get unit scale.
pub fn fit_probe(vectors: &[Vec<f64>], labels: &[Label], kind: ProbeKind, params: &ProbeParams) -> Result<ProbeModel> {
    if vectors.len() != labels.len() {
        return Err(Error::Dimension(format!("{} vectors, {} labels", vectors.len(), labels.len())));
    }
    let n_at = labels.iter().filter(|&&l| l == Label::Attack).count();
    let n_bf = labels.len() - n_at;
    if n_at == 0 || n_bf == 0 {
        return Err(Error::SingleClass {
            bonafide: n_bf,
            attack: n_at,
        });
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension("probe vectors must share a non-zero length".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite probe features".into()));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = vectors.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect())
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l == Label::Attack { 1.0 } else { -1.0 }).collect();
    let (params_out, converged, iterations) = match kind {
        ProbeKind::Logreg => fit_logreg(&z, &y, params),
        ProbeKind::SvmLinear => fit_linear_svm(&z, &y, params),
        ProbeKind::SvmRbf => fit_rbf_svm(&z, &y, params),
    };
    if !converged {
        tracing::warn!(probe = %kind, iterations, "probe hit the iteration limit");
    }
    Ok(ProbeModel {
        kind,
        mean,
        scale,
        params: params_out,
        converged,
        iterations,
    })
}

/// L2-regularized logistic regression, `½‖w‖² + C Σ log(1 + e^{−y(w·x+b)})`,
/// by damped Newton steps. The intercept is not penalized.
fn fit_logreg(z: &[Vec<f64>], y: &[f64], p: &ProbeParams) -> (ProbeParameters, bool, usize) {
    let (n, d) = (z.len(), z[0].len());
    let objective = |theta: &DVector<f64>| -> f64 {
        let w = theta.rows(0, d);
        let mut f = 0.5 * w.norm_squared();
        for i in 0..n {
            let m = y[i] * (dot(w.as_slice(), &z[i]) + theta[d]);
            // log(1 + e^{−m}) without overflow.
            f += p.c * if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
        }
        f
    };
    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut f = objective(&theta);
    let mut converged = false;
    let mut it = 0;
    while it < p.max_iter {
        it += 1;
        let mut grad = DVector::<f64>::zeros(d + 1);
        let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
        for j in 0..d {
            grad[j] = theta[j];
            hess[(j, j)] = 1.0;
        }
        // A tiny ridge on the intercept keeps the Hessian invertible.
        hess[(d, d)] = 1e-10;
        for i in 0..n {
            let m = y[i] * (dot(&theta.as_slice()[..d], &z[i]) + theta[d]);
            let s = sigmoid(-m);
            let g = -p.c * y[i] * s;
            let h = p.c * s * (1.0 - s);
            for a in 0..=d {
                let xa = if a < d { z[i][a] } else { 1.0 };
                grad[a] += g * xa;
                for b in 0..=a {
                    let xb = if b < d { z[i][b] } else { 1.0 };
                    hess[(a, b)] += h * xa * xb;
                }
            }
        }
        for a in 0..=d {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        if grad.norm() < p.tol {
            converged = true;
            break;
        }
        let step = hess.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
        let mut t = 1.0;
        let slope = grad.dot(&step);
        loop {
            let cand = &theta - t * &step;
            let fc = objective(&cand);
            if fc <= f - 1e-4 * t * slope || t < 1e-12 {
                theta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    let w = theta.as_slice()[..d].to_vec();
    (ProbeParameters::Linear { w, b: theta[d] }, converged, it)
}

/// L1-loss linear SVM by dual coordinate descent; the bias is learned as the
/// weight of a constant feature.
fn fit_linear_svm(z: &[Vec<f64>], y: &[f64], p: &ProbeParams) -> (ProbeParameters, bool, usize) {
    let (n, d) = (z.len(), z[0].len());
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d + 1];
    let qii: Vec<f64> = z.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut converged = false;
    let mut it = 0;
    while it < p.max_iter {
        it += 1;
        order.shuffle(&mut rng);
        let mut max_pg = f64::NEG_INFINITY;
        let mut min_pg = f64::INFINITY;
        for &i in &order {
            let g = y[i] * (dot(&w[..d], &z[i]) + w[d]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == p.c {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg);
            min_pg = min_pg.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, p.c);
                let delta = (alpha[i] - old) * y[i];
                for (wj, xj) in w[..d].iter_mut().zip(&z[i]) {
                    *wj += delta * xj;
                }
                w[d] += delta;
            }
        }
        if max_pg - min_pg < p.tol.max(1e-3) {
            converged = true;
            break;
        }
    }
    let b = w[d];
    w.truncate(d);
    (ProbeParameters::Linear { w, b }, converged, it)
}

/// C-SVM with an RBF kernel by SMO with maximal-violating-pair selection.
fn fit_rbf_svm(z: &[Vec<f64>], y: &[f64], p: &ProbeParams) -> (ProbeParameters, bool, usize) {
    let n = z.len();
    let d = z[0].len();
    let gamma = p.gamma.unwrap_or_else(|| {
        let all: Vec<f64> = z.iter().flatten().copied().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / all.len() as f64;
        if var > 0.0 {
            1.0 / (d as f64 * var)
        } else {
            1.0
        }
    });
    let k: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| rbf(&z[i], &z[j], gamma)).collect())
        .collect();
    let mut alpha = vec![0.0; n];
    // Gradient of the dual objective ½αᵀQα − eᵀα, Q_ij = y_i y_j K_ij.
    let mut grad = vec![-1.0; n];
    let eps = p.tol.max(1e-3);
    let max_iter = p.max_iter.max(100) * n.max(1);
    let mut converged = false;
    let mut it = 0;
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < p.c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < p.c);
    while it < max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < eps {
            converged = true;
            break;
        }
        it += 1;
        let quad = (k[i][i] + k[j][j] - 2.0 * k[i][j]).max(1e-12);
        let (ai, aj) = (alpha[i], alpha[j]);
        // Move along y_i Δα_i = −y_j Δα_j within the box.
        let mut step = (gmax - gmin) / quad;
        let cap_i = if y[i] > 0.0 { p.c - ai } else { ai };
        let cap_j = if y[j] > 0.0 { aj } else { p.c - aj };
        step = step.min(cap_i).min(cap_j);
        alpha[i] = ai + y[i] * step;
        alpha[j] = aj - y[j] * step;
        let di = alpha[i] - ai;
        let dj = alpha[j] - aj;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[t][i] * di + y[j] * k[t][j] * dj);
        }
    }
    // Bias from free support vectors, else the midpoint of the feasible range.
    let mut sum = 0.0;
    let mut count = 0;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let v = -y[t] * grad[t];
        if alpha[t] > 1e-12 && alpha[t] < p.c - 1e-12 {
            sum += v;
            count += 1;
        } else if in_up(alpha[t], y[t]) {
            lb = lb.max(v);
        } else {
            ub = ub.min(v);
        }
    }
    let b = if count > 0 {
        sum / count as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if ub.is_finite() {
        ub
    } else {
        lb.max(0.0)
    };
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 1e-12 {
            support.push(z[t].clone());
            coef.push(alpha[t] * y[t]);
        }
    }
    (ProbeParameters::Kernel { gamma, support, coef, b }, converged, it)
}

/// Attack scores for labelled vectors.
pub fn probe_scores(model: &ProbeModel, sample_ids: &[String], vectors: &[Vec<f64>], labels: &[Label]) -> Result<Vec<ScoreRecord>> {
    if sample_ids.len() != vectors.len() || vectors.len() != labels.len() {
        return Err(Error::Dimension("ids, vectors and labels differ in length".into()));
    }
    sample_ids
        .iter()
        .zip(vectors)
        .zip(labels)
        .map(|((id, v), &label)| {
            Ok(ScoreRecord {
                sample_id: id.clone(),
                label,
                score: model.score(v)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::AttackType;

    fn sample(id: &str) -> IrisSample {
        IrisSample {
            sample_id: id.into(),
            image_path: PathBuf::from("/nonexistent.png"),
            label: Label::Bonafide,
            attack_type: AttackType::Bonafide,
            source_corpus: "c".into(),
        }
    }

    #[test]
    fn stub_maps_mean_intensity() {
        let x = StubExtractor::new();
        let g = Grid::from_vec(1, 4, vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(x.extract(&sample("a"), &g).unwrap(), vec![0.5, 0.5]);
        let g = Grid::filled(2, 2, 0.25);
        assert_eq!(x.extract(&sample("a"), &g).unwrap(), vec![0.25, 0.75]);
        assert_eq!(x.invocations(), 2);
    }

    #[test]
    fn store_encoding_round_trip() {
        let mut s = EmbeddingStore::new("x/y");
        s.insert("b".into(), vec![1.0, -2.5]).unwrap();
        s.insert("a".into(), vec![0.0, 3.0]).unwrap();
        assert!(s.insert("c".into(), vec![1.0]).is_err());
        let bytes = s.encode();
        assert_eq!(&bytes[..4], &1u32.to_le_bytes());
        assert_eq!(bytes[4], b'a');
        let back = EmbeddingStore::decode(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, s.vectors);
        assert!(EmbeddingStore::decode(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
    }

    #[test]
    fn linear_decision_sign() {
        let m = ProbeModel {
            kind: ProbeKind::SvmLinear,
            mean: vec![0.0, 0.0],
            scale: vec![1.0, 1.0],
            params: ProbeParameters::Linear { w: vec![1.0, 0.0], b: 0.0 },
            converged: true,
            iterations: 0,
        };
        let s = probe_scores(
            &m,
            &["p".into(), "n".into()],
            &[vec![2.0, 0.0], vec![-2.0, 0.0]],
            &[Label::Attack, Label::Bonafide],
        )
        .unwrap();
        assert!(s[0].score > 0.5 && s[1].score < 0.5);
        assert!(m.score(&[1.0]).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![vec![0.0], vec![1.0]];
        for k in ProbeKind::ALL {
            assert!(fit_probe(&xs, &[Label::Attack, Label::Attack], k, &ProbeParams::default()).is_err());
        }
    }

    #[test]
    fn constant_feature_tolerated() {
        let xs = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 3.0]];
        let ys = [Label::Bonafide, Label::Bonafide, Label::Attack, Label::Attack];
        for k in ProbeKind::ALL {
            let m = fit_probe(&xs, &ys, k, &ProbeParams::default()).unwrap();
            assert!(m.score(&[1.0, 3.0]).unwrap() > m.score(&[1.0, 0.0]).unwrap(), "{k}");
        }
    }
}
