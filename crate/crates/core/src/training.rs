//! Composite cross-entropy + CAM-alignment training.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{DatasetManifest, ImageSize, Label};
use crate::evaluation::{auroc, ScoreRecord, SplitPlan};
use crate::imageio::{self, ImageStore};
use crate::nn::{BackboneKind, Network, Tensor};
use crate::saliency::{SaliencySource, SaliencyStore};
use crate::{Error, Grid, Result};

/// A class activation map; `zero` marks an all-zero map before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub values: Grid,
    pub zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub saliency_mse: f64,
    pub n_samples_with_saliency: usize,
}

/// Per-axis linear interpolation taps (align_corners = false).
#[derive(Debug, Clone)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut t = Taps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            w_hi: Vec::with_capacity(dst),
        };
        for d in 0..dst {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            t.lo.push(lo);
            t.hi.push(hi);
            t.w_hi.push(if hi == lo { 0.0 } else { s - lo as f64 });
        }
        t
    }
}

fn upsample(src: &[f64], h: usize, w: usize, ty: &Taps, tx: &Taps) -> Vec<f64> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.w_hi[y]);
        for x in 0..ow {
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.w_hi[x]);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    debug_assert_eq!(src.len(), h * w);
    out
}

fn upsample_backward(grad: &[f64], h: usize, w: usize, ty: &Taps, tx: &Taps) -> Vec<f64> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; h * w];
    for y in 0..oh {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.w_hi[y]);
        for x in 0..ow {
            let g = grad[y * ow + x];
            if g == 0.0 {
                continue;
            }
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.w_hi[x]);
            out[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            out[y0 * w + x1] += g * (1.0 - fy) * fx;
            out[y1 * w + x0] += g * fy * (1.0 - fx);
            out[y1 * w + x1] += g * fy * fx;
        }
    }
    out
}

/// Intermediate values of one CAM evaluation, kept for backpropagation.
struct CamTrace {
    /// Weighted channel sum before rectification, h×w.
    pre: Vec<f64>,
    /// Rectified and upsampled, H×W.
    up: Vec<f64>,
    max: f64,
    argmax: usize,
}

fn cam_trace(features: &[f64], c: usize, h: usize, w: usize, weights: &[f64], ty: &Taps, tx: &Taps) -> CamTrace {
    let plane = h * w;
    let mut pre = vec![0.0; plane];
    for ch in 0..c {
        let wc = weights[ch];
        if wc == 0.0 {
            continue;
        }
        for (p, f) in pre.iter_mut().zip(&features[ch * plane..(ch + 1) * plane]) {
            *p += wc * f;
        }
    }
    let rect: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let up = upsample(&rect, h, w, ty, tx);
    let (mut max, mut argmax) = (0.0, 0);
    for (i, &v) in up.iter().enumerate() {
        if v > max {
            max = v;
            argmax = i;
        }
    }
    CamTrace { pre, up, max, argmax }
}

/// Class activation map: weighted channel sum, rectified, bilinearly upsampled
/// and max-normalized. `features` is C×h×w, row-major per channel.
pub fn compute_cam(
    features: &[Grid],
    classifier_weights: &[f64],
    upsample_to: ImageSize,
) -> Result<Cam> {
    if features.len() != classifier_weights.len() {
        return Err(Error::Dimension(format!(
            "{} classifier weights for {} feature channels",
            classifier_weights.len(),
            features.len()
        )));
    }
    if features.is_empty() || upsample_to.pixels() == 0 {
        return Err(Error::Dimension("empty feature maps or target size".into()));
    }
    let (h, w) = features[0].shape();
    let mut flat = Vec::with_capacity(features.len() * h * w);
    for f in features {
        f.ensure_shape((h, w))?;
        flat.extend_from_slice(f.as_slice());
    }
    let ty = Taps::new(h, upsample_to.height);
    let tx = Taps::new(w, upsample_to.width);
    let trace = cam_trace(&flat, features.len(), h, w, classifier_weights, &ty, &tx);
    Ok(cam_from_trace(&trace, upsample_to))
}

fn cam_from_trace(trace: &CamTrace, size: ImageSize) -> Cam {
    if trace.max <= 0.0 {
        return Cam {
            values: Grid::zeros(size.height, size.width),
            zero: true,
        };
    }
    let data = trace.up.iter().map(|v| v / trace.max).collect();
    Cam {
        values: Grid::from_vec(size.height, size.width, data).expect("sized buffer"),
        zero: false,
    }
}

/// Mean over pixels of `(cam − target)²`.
pub fn saliency_mse(cam: &Grid, target: &Grid) -> Result<f64> {
    target.ensure_shape(cam.shape())?;
    let n = cam.len() as f64;
    Ok(cam
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Two-class cross-entropy, computed stably.
pub fn cross_entropy(logits: [f64; 2], class: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[class]
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Per-sample composite loss. The saliency term is dropped when either map is
/// absent or the CAM is flagged zero.
pub fn combined_loss(
    logits: [f64; 2],
    label: Label,
    cam: Option<&Cam>,
    target: Option<&Grid>,
    alpha: f64,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, label.class_index());
    match (cam, target) {
        (Some(cam), Some(target)) if !cam.zero && alpha > 0.0 => {
            let mse = saliency_mse(&cam.values, target)?;
            Ok(LossBreakdown {
                total: (1.0 - alpha) * ce + alpha * mse,
                ce,
                saliency_mse: mse,
                n_samples_with_saliency: 1,
            })
        }
        _ => Ok(LossBreakdown {
            total: ce,
            ce,
            saliency_mse: 0.0,
            n_samples_with_saliency: 0,
        }),
    }
}

/// Converts grayscale images to a single-channel batch.
pub fn batch_tensor(images: &[&Grid]) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|g| g.shape())
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for g in images {
        g.ensure_shape((h, w))?;
        data.extend_from_slice(g.as_slice());
    }
    Ok(Tensor::from_vec(images.len(), 1, h, w, data))
}

/// Forward and backward pass of the batch-mean composite loss. Parameter
/// gradients accumulate into `net`; the caller zeroes them.
pub fn loss_and_backward(
    net: &mut Network,
    x: &Tensor,
    labels: &[Label],
    targets: &[Option<&Grid>],
    alpha: f64,
) -> Result<LossBreakdown> {
    let n = x.n;
    if labels.len() != n || targets.len() != n {
        return Err(Error::Dimension("batch labels/targets length".into()));
    }
    let use_saliency = alpha > 0.0 && targets.iter().any(Option::is_some);
    let pass = net.forward(x, true);
    let (c, h, w) = (pass.features.c, pass.features.h, pass.features.w);
    let plane = h * w;
    let (ty, tx) = (Taps::new(h, x.h), Taps::new(w, x.w));
    let pixels = (x.h * x.w) as f64;
    let inv_n = 1.0 / n as f64;

    let mut out = LossBreakdown::default();
    let mut d_logits = vec![[0.0; 2]; n];
    let mut d_features = pass.features.zeros_like();
    let mut d_class = vec![0.0; 2 * c];

    for s in 0..n {
        let class = labels[s].class_index();
        let logits = pass.logits[s];
        let ce = cross_entropy(logits, class);
        let mut ce_weight = 1.0;
        let mut total = ce;
        if let (true, Some(target)) = (use_saliency, targets[s]) {
            target.ensure_shape((x.h, x.w))?;
            let feats = pass.features.sample(s);
            let trace = cam_trace(feats, c, h, w, net.class_weights(class), &ty, &tx);
            if trace.max > 0.0 {
                let t = target.as_slice();
                let mut mse = 0.0;
                let mut d_norm = vec![0.0; trace.up.len()];
                for i in 0..trace.up.len() {
                    let diff = trace.up[i] / trace.max - t[i];
                    mse += diff * diff;
                    d_norm[i] = alpha * inv_n * 2.0 * diff / pixels;
                }
                mse /= pixels;
                total = (1.0 - alpha) * ce + alpha * mse;
                ce_weight = 1.0 - alpha;
                out.saliency_mse += mse;
                out.n_samples_with_saliency += 1;

                // Through the max-normalization M = U / U[argmax].
                let inv_max = 1.0 / trace.max;
                let mut d_up: Vec<f64> = d_norm.iter().map(|g| g * inv_max).collect();
                let through_max: f64 = d_norm
                    .iter()
                    .zip(&trace.up)
                    .map(|(g, u)| g * u)
                    .sum::<f64>()
                    * inv_max
                    * inv_max;
                d_up[trace.argmax] -= through_max;
                let mut d_pre = upsample_backward(&d_up, h, w, &ty, &tx);
                for (d, p) in d_pre.iter_mut().zip(&trace.pre) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
                let weights = net.class_weights(class).to_vec();
                let df = d_features.sample_mut(s);
                for ch in 0..c {
                    let fs = &feats[ch * plane..(ch + 1) * plane];
                    let mut acc = 0.0;
                    for (dp, f) in d_pre.iter().zip(fs) {
                        acc += dp * f;
                    }
                    d_class[class * c + ch] += acc;
                    let wc = weights[ch];
                    for (dfv, dp) in df[ch * plane..(ch + 1) * plane].iter_mut().zip(&d_pre) {
                        *dfv += wc * dp;
                    }
                }
            }
        }
        out.ce += ce;
        out.total += total;
        let p = softmax2(logits);
        for k in 0..2 {
            let onehot = if k == class { 1.0 } else { 0.0 };
            d_logits[s][k] = ce_weight * inv_n * (p[k] - onehot);
        }
    }

    for (g, d) in net.classifier.grad.iter_mut().zip(&d_class) {
        *g += d;
    }
    net.backward(&pass, &d_logits, d_features);
    out.ce *= inv_n;
    out.total *= inv_n;
    if out.n_samples_with_saliency > 0 {
        out.saliency_mse /= out.n_samples_with_saliency as f64;
    }
    Ok(out)
}

/// Loss value only, in training mode (used by gradient checks).
pub fn loss_value(
    net: &mut Network,
    x: &Tensor,
    labels: &[Label],
    targets: &[Option<&Grid>],
    alpha: f64,
) -> Result<f64> {
    let pass = net.forward(x, true);
    let (c, h, w) = (pass.features.c, pass.features.h, pass.features.w);
    let (ty, tx) = (Taps::new(h, x.h), Taps::new(w, x.w));
    let size = ImageSize::new(x.h, x.w);
    let mut total = 0.0;
    for s in 0..x.n {
        let class = labels[s].class_index();
        let cam = if alpha > 0.0 && targets[s].is_some() {
            let trace = cam_trace(pass.features.sample(s), c, h, w, net.class_weights(class), &ty, &tx);
            Some(cam_from_trace(&trace, size))
        } else {
            None
        };
        total += combined_loss(pass.logits[s], labels[s], cam.as_ref(), targets[s], alpha)?.total;
    }
    Ok(total / x.n as f64)
}

/// Evaluation-mode CAM of one image for a given class.
pub fn image_cam(net: &mut Network, image: &Grid, class: usize) -> Result<Cam> {
    let x = batch_tensor(&[image])?;
    let pass = net.forward(&x, false);
    let (c, h, w) = (pass.features.c, pass.features.h, pass.features.w);
    let (ty, tx) = (Taps::new(h, x.h), Taps::new(w, x.w));
    let trace = cam_trace(pass.features.sample(0), c, h, w, net.class_weights(class), &ty, &tx);
    Ok(cam_from_trace(&trace, ImageSize::new(x.h, x.w)))
}

/// Share of CAM mass that falls inside a {0,1} region mask.
pub fn cam_mass_fraction(cam: &Cam, region: &Grid) -> Result<f64> {
    region.ensure_shape(cam.values.shape())?;
    let total = cam.values.sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = cam
        .values
        .as_slice()
        .iter()
        .zip(region.as_slice())
        .map(|(v, m)| v * m)
        .sum();
    Ok(inside / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Step { every: usize, gamma: f64 },
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub saliency_source: Option<SaliencySource>,
    pub image_size: ImageSize,
    pub backbone: BackboneKind,
    /// Fraction of the train partition held out for the per-epoch validation
    /// AUROC. Zero evaluates on the train partition itself.
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epochs: 50,
            batch_size: 20,
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            seed: 0,
            saliency_source: None,
            image_size: ImageSize::new(224, 224),
            backbone: BackboneKind::Densenet121,
            val_fraction: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("training.alpha must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("training.learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("training.momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("training.val_fraction must lie in [0, 1)");
        }
        if self.image_size.pixels() == 0 {
            return bad("training.image_size must be positive");
        }
        if let BackboneKind::Tiny { channels } = self.backbone {
            if channels == 0 {
                return bad("training.backbone.channels must be positive");
            }
            if !self.image_size.height.is_multiple_of(2) || !self.image_size.width.is_multiple_of(2) {
                return bad("tiny backbone needs even image dimensions");
            }
        }
        Ok(())
    }

    /// alpha = 0 and no saliency source describe the same (XENT) run.
    pub fn canonical(&self) -> TrainingConfig {
        let mut c = self.clone();
        if c.alpha == 0.0 || c.saliency_source.is_none() {
            c.alpha = 0.0;
            c.saliency_source = None;
        }
        c
    }

    pub fn is_xent(&self) -> bool {
        self.canonical().saliency_source.is_none()
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub saliency_mse: f64,
    pub total: f64,
    pub val_auroc: Option<f64>,
}

pub struct TrainedModel {
    pub network: Network,
    pub config: TrainingConfig,
    pub fingerprint: String,
    pub log: Vec<EpochLog>,
    /// Train samples without a readable image.
    pub skipped: Vec<String>,
}

#[derive(Clone, Copy)]
struct Example<'a> {
    sample_id: &'a str,
    image: &'a Grid,
    label: Label,
    target: Option<&'a Grid>,
}

/// Trains one model on the split's train partition.
pub fn train_model(
    split: &SplitPlan,
    manifest: &DatasetManifest,
    images: &ImageStore,
    saliency: Option<&SaliencyStore>,
    config: &TrainingConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let config = config.canonical();
    let store = match config.saliency_source {
        Some(source) => {
            let store = saliency.ok_or_else(|| {
                Error::InvalidArgument(format!("saliency store for {source} not provided"))
            })?;
            if store.source.is_some_and(|s| s != source) {
                return Err(Error::InvalidArgument(format!(
                    "saliency store holds {} maps, config asks for {source}",
                    store.source.map(|s| s.as_str()).unwrap_or("?")
                )));
            }
            store.check_shape(config.image_size)?;
            Some(store)
        }
        None => None,
    };

    let index = manifest.index();
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for id in &split.train {
        let sample = index
            .get(id.as_str())
            .ok_or_else(|| Error::Validation(format!("split references unknown sample {id}")))?;
        let Some(image) = images.get(id) else {
            tracing::warn!(sample_id = %id, "no image, skipping train sample");
            skipped.push(id.clone());
            continue;
        };
        image.ensure_shape((config.image_size.height, config.image_size.width))?;
        examples.push(Example {
            sample_id: id.as_str(),
            image,
            label: sample.label,
            target: store.and_then(|s| s.target(id)).map(|m| &m.values),
        });
    }
    let count = |l: Label| examples.iter().filter(|e| e.label == l).count();
    let (n_bf, n_at) = (count(Label::Bonafide), count(Label::Attack));
    if n_bf == 0 || n_at == 0 {
        return Err(Error::SingleClass {
            bonafide: n_bf,
            attack: n_at,
        });
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f72_6465_7273);
    let (train, val) = hold_out(examples, config.val_fraction, &mut order_rng);

    let mut net = Network::new(config.backbone, config.seed);
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let lr = config.schedule.rate(config.learning_rate, epoch, config.epochs);
        let mut sums = LossBreakdown::default();
        let mut mse_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let x = batch_tensor(&batch.iter().map(|e| e.image).collect::<Vec<_>>())?;
            let labels: Vec<Label> = batch.iter().map(|e| e.label).collect();
            let targets: Vec<Option<&Grid>> = batch.iter().map(|e| e.target).collect();
            net.zero_grad();
            let b = loss_and_backward(&mut net, &x, &labels, &targets, config.alpha)?;
            let k = batch.len() as f64;
            sums.ce += b.ce * k;
            sums.total += b.total * k;
            mse_sum += b.saliency_mse * b.n_samples_with_saliency as f64;
            sums.n_samples_with_saliency += b.n_samples_with_saliency;
            for (p, v) in net.params().into_iter().zip(velocity.iter_mut()) {
                for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                    let g = g + config.weight_decay * *w;
                    *vel = config.momentum * *vel + g;
                    *w -= lr * *vel;
                }
            }
        }
        let n = train.len() as f64;
        let val_set: &[Example] = if val.is_empty() { &train } else { &val };
        let val_auroc = predict(&mut net, val_set.iter().map(|e| (e.sample_id, e.image, e.label)))
            .ok()
            .and_then(|scores| auroc(&scores).ok());
        let entry = EpochLog {
            epoch,
            ce: sums.ce / n,
            saliency_mse: if sums.n_samples_with_saliency > 0 {
                mse_sum / sums.n_samples_with_saliency as f64
            } else {
                0.0
            },
            total: sums.total / n,
            val_auroc,
        };
        tracing::debug!(epoch, ce = entry.ce, total = entry.total, "epoch done");
        log.push(entry);
    }

    Ok(TrainedModel {
        network: net,
        fingerprint: config.fingerprint(),
        config,
        log,
        skipped,
    })
}

fn hold_out<'a>(
    examples: Vec<Example<'a>>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Example<'a>>, Vec<Example<'a>>) {
    if fraction <= 0.0 {
        return (examples, Vec::new());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [Label::Bonafide, Label::Attack] {
        let mut group: Vec<Example> = examples.iter().filter(|e| e.label == label).copied().collect();
        group.shuffle(rng);
        // Keep at least one example of each class for training.
        let k = ((group.len() as f64 * fraction).round() as usize).min(group.len() - 1);
        val.extend(group.drain(..k));
        train.extend(group);
    }
    (train, val)
}

/// Attack-class probabilities in evaluation mode.
pub fn predict<'a>(
    net: &mut Network,
    samples: impl IntoIterator<Item = (&'a str, &'a Grid, Label)>,
) -> Result<Vec<ScoreRecord>> {
    const CHUNK: usize = 32;
    let samples: Vec<_> = samples.into_iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let x = batch_tensor(&chunk.iter().map(|s| s.1).collect::<Vec<_>>())?;
        let pass = net.forward(&x, false);
        for (s, logits) in chunk.iter().zip(pass.logits) {
            out.push(ScoreRecord {
                sample_id: s.0.to_string(),
                label: s.2,
                score: softmax2(logits)[1],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub descriptor: String,
    pub backbone: BackboneKind,
    pub fingerprint: String,
    pub seed: u64,
    pub n_values: usize,
    pub config: TrainingConfig,
}

pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Writes descriptor, parameter blob and training log into `dir`.
pub fn save_checkpoint(dir: &Path, model: &mut TrainedModel) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = model.network.state_vec();
    let mut blob = Vec::with_capacity(state.len() * 8);
    for v in &state {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    imageio::write_atomic(&dir.join(CHECKPOINT_PARAMS), &blob)?;
    let meta = CheckpointMeta {
        descriptor: model.network.descriptor(),
        backbone: model.config.backbone,
        fingerprint: model.fingerprint.clone(),
        seed: model.config.seed,
        n_values: state.len(),
        config: model.config.clone(),
    };
    imageio::write_atomic(&dir.join(CHECKPOINT_META), &serde_json::to_vec_pretty(&meta)?)?;
    let mut log = Vec::new();
    for entry in &model.log {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n").expect("vec write");
    }
    imageio::write_atomic(&dir.join(TRAIN_LOG), &log)?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, CheckpointMeta)> {
    let meta_path = dir.join(CHECKPOINT_META);
    let text = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&text)?;
    let blob_path = dir.join(CHECKPOINT_PARAMS);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != meta.n_values * 8 {
        return Err(Error::Validation(format!(
            "{}: expected {} values",
            blob_path.display(),
            meta.n_values
        )));
    }
    let state: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mut net = Network::new(meta.backbone, meta.seed);
    if !net.load_state_vec(&state) {
        return Err(Error::Validation(format!(
            "{}: parameter count does not match {}",
            blob_path.display(),
            meta.descriptor
        )));
    }
    Ok((net, meta))
}
