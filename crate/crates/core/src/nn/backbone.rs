use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{AvgPool2d, BatchNorm2d, Conv2d, DenseConcat, Layer, MaxPool2d, Param, Relu, Sequential};
use super::tensor::Tensor;

/// Registered backbone configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneKind {
    /// conv3x3 → ReLU → avgpool2 → conv3x3 → ReLU; features at half resolution.
    Tiny { channels: usize },
    /// DenseNet-121 (growth 32, blocks 6/12/24/16) on single-channel input.
    Densenet121,
}

impl Default for BackboneKind {
    fn default() -> Self {
        BackboneKind::Tiny { channels: 4 }
    }
}

impl BackboneKind {
    pub fn descriptor(&self) -> String {
        match self {
            BackboneKind::Tiny { channels } => format!("tiny-cnn(c={channels})"),
            BackboneKind::Densenet121 => {
                "densenet121(growth=32,blocks=6-12-24-16,init=64,bn_size=4,in=1)".into()
            }
        }
    }
}

const DENSENET121_BLOCKS: [usize; 4] = [6, 12, 24, 16];

fn relu() -> Relu {
    Relu::default()
}

fn dense_layer(rng: &mut ChaCha8Rng, cin: usize, growth: usize, bn_size: usize) -> DenseConcat {
    let mut inner = Sequential::new();
    inner.push(BatchNorm2d::new(cin));
    inner.push(relu());
    inner.push(Conv2d::new(rng, cin, bn_size * growth, 1, 1, 0, false));
    inner.push(BatchNorm2d::new(bn_size * growth));
    inner.push(relu());
    inner.push(Conv2d::new(rng, bn_size * growth, growth, 3, 1, 1, false));
    DenseConcat::new(cin, inner)
}

/// Feature extractor of DenseNet-121 ending in norm5 + ReLU. Returns the stack
/// and its output channel count.
pub fn densenet121_features(rng: &mut ChaCha8Rng, in_channels: usize) -> (Sequential, usize) {
    let (growth, bn_size, init) = (32, 4, 64);
    let mut seq = Sequential::new();
    seq.push(Conv2d::new(rng, in_channels, init, 7, 2, 3, false));
    seq.push(BatchNorm2d::new(init));
    seq.push(relu());
    seq.push(MaxPool2d::new(3, 2, 1));
    let mut c = init;
    for (i, &n) in DENSENET121_BLOCKS.iter().enumerate() {
        for _ in 0..n {
            seq.push(dense_layer(rng, c, growth, bn_size));
            c += growth;
        }
        if i + 1 < DENSENET121_BLOCKS.len() {
            seq.push(BatchNorm2d::new(c));
            seq.push(relu());
            seq.push(Conv2d::new(rng, c, c / 2, 1, 1, 0, false));
            seq.push(AvgPool2d::new(2));
            c /= 2;
        }
    }
    seq.push(BatchNorm2d::new(c));
    seq.push(relu());
    (seq, c)
}

fn tiny_features(rng: &mut ChaCha8Rng, channels: usize) -> Sequential {
    let mut seq = Sequential::new();
    seq.push(Conv2d::new(rng, 1, channels, 3, 1, 1, true));
    seq.push(relu());
    seq.push(AvgPool2d::new(2));
    seq.push(Conv2d::new(rng, channels, channels, 3, 1, 1, false));
    seq.push(BatchNorm2d::new(channels));
    seq.push(relu());
    seq
}

/// Convolutional feature stack plus a global-average-pool linear classifier
/// over two classes (bonafide = 0, attack = 1).
pub struct Network {
    pub kind: BackboneKind,
    pub features: Sequential,
    pub channels: usize,
    /// Row-major `[2 × channels]`.
    pub classifier: Param,
    pub bias: Param,
}

/// Cached forward pass of a batch.
pub struct ForwardPass {
    pub features: Tensor,
    pub pooled: Vec<f64>,
    pub logits: Vec<[f64; 2]>,
}

impl Network {
    pub fn new(kind: BackboneKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (features, channels) = match kind {
            BackboneKind::Tiny { channels } => (tiny_features(&mut rng, channels), channels),
            BackboneKind::Densenet121 => densenet121_features(&mut rng, 1),
        };
        let bound = 1.0 / (channels as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let classifier = Param::new((0..2 * channels).map(|_| u.sample(&mut rng)).collect());
        Self {
            kind,
            features,
            channels,
            classifier,
            bias: Param::zeros(2),
        }
    }

    pub fn descriptor(&self) -> String {
        self.kind.descriptor()
    }

    /// Classifier weights of one class, one per feature channel.
    pub fn class_weights(&self, class: usize) -> &[f64] {
        &self.classifier.value[class * self.channels..(class + 1) * self.channels]
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> ForwardPass {
        let features = self.features.forward(x, train);
        assert_eq!(features.c, self.channels);
        let plane = features.plane() as f64;
        let mut pooled = vec![0.0; features.n * self.channels];
        for s in 0..features.n {
            for ch in 0..self.channels {
                let start = (s * self.channels + ch) * features.plane();
                pooled[s * self.channels + ch] =
                    features.data[start..start + features.plane()].iter().sum::<f64>() / plane;
            }
        }
        let logits = (0..features.n)
            .map(|s| {
                let p = &pooled[s * self.channels..(s + 1) * self.channels];
                let mut out = [0.0; 2];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = self.bias.value[k]
                        + self
                            .class_weights(k)
                            .iter()
                            .zip(p)
                            .map(|(w, v)| w * v)
                            .sum::<f64>();
                }
                out
            })
            .collect();
        ForwardPass {
            features,
            pooled,
            logits,
        }
    }

    /// Backpropagates `d_logits` (per sample) plus an extra gradient on the
    /// feature maps. Gradients accumulate into every parameter.
    pub fn backward(&mut self, pass: &ForwardPass, d_logits: &[[f64; 2]], mut d_features: Tensor) {
        let c = self.channels;
        let plane = pass.features.plane();
        for (s, dl) in d_logits.iter().enumerate() {
            let p = &pass.pooled[s * c..(s + 1) * c];
            for k in 0..2 {
                self.bias.grad[k] += dl[k];
                for ch in 0..c {
                    self.classifier.grad[k * c + ch] += dl[k] * p[ch];
                }
            }
            for ch in 0..c {
                let dp = (dl[0] * self.classifier.value[ch] + dl[1] * self.classifier.value[c + ch])
                    / plane as f64;
                if dp == 0.0 {
                    continue;
                }
                let start = (s * c + ch) * plane;
                for v in &mut d_features.data[start..start + plane] {
                    *v += dp;
                }
            }
        }
        self.features.backward(&d_features);
    }

    /// All trainable parameters: features first, then classifier weights and bias.
    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut v = self.features.params();
        v.push(&mut self.classifier);
        v.push(&mut self.bias);
        v
    }

    pub fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Parameters followed by buffers, flattened.
    pub fn state_vec(&mut self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params().iter().flat_map(|p| p.value.iter().copied()).collect();
        for b in self.features.buffers() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn load_state_vec(&mut self, state: &[f64]) -> bool {
        let total: usize = self.params().iter().map(|p| p.len()).sum::<usize>()
            + self.features.buffers().iter().map(|b| b.len()).sum::<usize>();
        if total != state.len() {
            return false;
        }
        let mut off = 0;
        for p in self.params() {
            let n = p.len();
            p.value.copy_from_slice(&state[off..off + n]);
            off += n;
        }
        for b in self.features.buffers() {
            let n = b.len();
            b.copy_from_slice(&state[off..off + n]);
            off += n;
        }
        true
    }
}
