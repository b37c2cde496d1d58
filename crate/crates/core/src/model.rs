//! The split classifier: a small convolutional network with a designated tap
//! layer dividing it into a feature extractor and a head.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{NoGradGuard, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, x: &Var) -> Var {
        match self {
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub stride: usize,
}

/// Layout of a split classifier. The tap sits at the raw output of the last
/// convolution; the head is activation, global average pooling and a linear
/// layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub blocks: Vec<ConvBlock>,
    pub activation: Activation,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl Architecture {
    /// Four 3×3 conv blocks, stride-2 downsampling at blocks 2 and 4, 64
    /// channels at the tap.
    pub fn toy(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self::with_widths(input_shape, num_classes, [16, 32, 32, 64])
    }

    pub fn with_widths(input_shape: [usize; 3], num_classes: usize, widths: [usize; 4]) -> Self {
        Self {
            input_shape,
            blocks: widths
                .iter()
                .enumerate()
                .map(|(i, &channels)| ConvBlock {
                    channels,
                    stride: if i % 2 == 1 { 2 } else { 1 },
                })
                .collect(),
            activation: Activation::Silu,
            num_classes,
            bias: true,
        }
    }

    pub fn descriptor(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}s{}", b.channels, b.stride))
            .collect();
        format!(
            "in{}x{}x{}-conv3x3[{}]-{:?}-gap-linear{}-bias{}",
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
            blocks.join(","),
            self.activation,
            self.num_classes,
            self.bias
        )
        .to_lowercase()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.descriptor().as_bytes()))
    }

    pub fn tap_channels(&self) -> usize {
        self.blocks.last().map(|b| b.channels).unwrap_or(0)
    }

    /// Spatial size of the tap feature map.
    pub fn tap_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for b in &self.blocks {
            h = (h + 2 - 3) / b.stride + 1;
            w = (w + 2 - 3) / b.stride + 1;
        }
        (h, w)
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::contract("architecture needs at least one conv block"));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("need at least two classes"));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(Error::contract("conv blocks need positive channels and stride"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    },
    Act(Activation),
    GlobalAvgPool,
    Linear {
        /// `[in, out]`
        weight: Tensor,
        bias: Option<Tensor>,
    },
}

/// A classifier `f = head ∘ extractor` with the split at `tap_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitClassifier {
    arch: Architecture,
    layers: Vec<Layer>,
    tap_index: usize,
    param_version: u64,
}

impl fmt::Display for SplitClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (tap {}, version {})",
            self.arch.descriptor(),
            self.tap_index,
            self.param_version
        )
    }
}

impl SplitClassifier {
    /// Builds a network with He-normal initialised weights.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = arch.input_shape[0];
        for (i, b) in arch.blocks.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let weight = Tensor::from_parts(
                vec![b.channels, cin, 3, 3],
                (0..b.channels * cin * 9).map(|_| normal.sample(&mut rng)).collect(),
            );
            layers.push(Layer::Conv {
                weight,
                bias: arch.bias.then(|| Tensor::zeros(&[b.channels])),
                stride: b.stride,
                pad: 1,
            });
            if i + 1 < arch.blocks.len() {
                layers.push(Layer::Act(arch.activation));
            }
            cin = b.channels;
        }
        let tap_index = layers.len() - 1;
        layers.push(Layer::Act(arch.activation));
        layers.push(Layer::GlobalAvgPool);
        let normal = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("valid std");
        layers.push(Layer::Linear {
            weight: Tensor::from_parts(
                vec![cin, arch.num_classes],
                (0..cin * arch.num_classes).map(|_| normal.sample(&mut rng)).collect(),
            ),
            bias: arch.bias.then(|| Tensor::zeros(&[arch.num_classes])),
        });
        Ok(Self {
            arch,
            layers,
            tap_index,
            param_version: 0,
        })
    }

    /// Assembles a classifier from explicit layers. `tap_index` must address
    /// a convolution.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer>, tap_index: usize) -> Result<Self> {
        arch.validate()?;
        match layers.get(tap_index) {
            Some(Layer::Conv { .. }) => {}
            _ => return Err(Error::contract("tap_index must address a conv layer")),
        }
        Ok(Self {
            arch,
            layers,
            tap_index,
            param_version: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn tap_index(&self) -> usize {
        self.tap_index
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn tap_channels(&self) -> usize {
        match &self.layers[self.tap_index] {
            Layer::Conv { weight, .. } => weight.shape()[0],
            _ => unreachable!("tap is a conv layer"),
        }
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    /// All parameter tensors in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Applies `update(index, param)` to every parameter and bumps the
    /// version counter.
    pub fn update_params(&mut self, mut update: impl FnMut(usize, &mut Tensor)) {
        for (i, p) in self.params_mut().into_iter().enumerate() {
            update(i, p);
        }
        self.param_version += 1;
    }

    /// Binds parameters as graph leaves. With `trainable` the leaves accept
    /// gradient requests.
    pub fn bind(&self, trainable: bool) -> Bound<'_> {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    Var::param(p.clone())
                } else {
                    Var::constant(p.clone())
                }
            })
            .collect();
        Bound { model: self, vars }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.arch.input_shape {
            return Err(Error::shape(format!(
                "input {:?} does not match model input (N, {:?})",
                s, self.arch.input_shape
            )));
        }
        Ok(())
    }

    pub fn check_feature(&self, z: &Tensor) -> Result<()> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.tap_channels() {
            return Err(Error::shape(format!(
                "feature map {:?} does not have {} channels",
                s,
                self.tap_channels()
            )));
        }
        Ok(())
    }

    /// Value-only extractor pass.
    pub fn forward_to_tap(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let _g = NoGradGuard::new();
        let b = self.bind(false);
        Ok(b.forward_to_tap(&Var::constant(x.clone())).value().clone())
    }

    /// Value-only head pass.
    pub fn forward_from_tap(&self, z: &Tensor) -> Result<Tensor> {
        self.check_feature(z)?;
        let _g = NoGradGuard::new();
        let b = self.bind(false);
        Ok(b.forward_from_tap(&Var::constant(z.clone())).value().clone())
    }

    /// Value-only full pass, evaluated in chunks to bound memory.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let _g = NoGradGuard::new();
        let b = self.bind(false);
        let n = x.batch_len();
        let chunk = 256;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            parts.push(b.forward(&Var::constant(x.select_rows(&idx))).value().clone());
            start += chunk;
        }
        Tensor::concat_rows(&parts)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }
}

/// A model whose parameters are bound to graph leaves.
pub struct Bound<'a> {
    model: &'a SplitClassifier,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn params(&self) -> &[Var] {
        &self.vars
    }

    pub fn model(&self) -> &SplitClassifier {
        self.model
    }

    fn run(&self, layers: std::ops::Range<usize>, x: &Var, mut pi: usize) -> Var {
        let mut h = x.clone();
        for layer in &self.model.layers[layers] {
            match layer {
                Layer::Conv {
                    stride, pad, bias, ..
                } => {
                    h = h.conv2d(&self.vars[pi], *stride, *pad);
                    pi += 1;
                    if bias.is_some() {
                        let c = self.vars[pi].shape()[0];
                        h = h.add_bcast(&self.vars[pi].reshape(&[1, c, 1, 1]));
                        pi += 1;
                    }
                }
                Layer::Act(a) => h = a.apply(&h),
                Layer::GlobalAvgPool => h = h.spatial_mean(),
                Layer::Linear { bias, .. } => {
                    h = h.matmul(&self.vars[pi]);
                    pi += 1;
                    if bias.is_some() {
                        let k = self.vars[pi].shape()[0];
                        h = h.add_bcast(&self.vars[pi].reshape(&[1, k]));
                        pi += 1;
                    }
                }
            }
        }
        h
    }

    fn head_param_offset(&self) -> usize {
        self.model.layers[..=self.model.tap_index]
            .iter()
            .map(|l| match l {
                Layer::Conv { bias, .. } | Layer::Linear { bias, .. } => 1 + bias.is_some() as usize,
                _ => 0,
            })
            .sum()
    }

    /// `z = f_l(x)`
    pub fn forward_to_tap(&self, x: &Var) -> Var {
        self.run(0..self.model.tap_index + 1, x, 0)
    }

    /// `f_{l+}(z)`
    pub fn forward_from_tap(&self, z: &Var) -> Var {
        self.run(
            self.model.tap_index + 1..self.model.layers.len(),
            z,
            self.head_param_offset(),
        )
    }

    pub fn forward(&self, x: &Var) -> Var {
        self.forward_from_tap(&self.forward_to_tap(x))
    }

    /// Pooled representation `[n, C]` of a tap map: the head up to and
    /// including its global average pool.
    pub fn pool_tap(&self, z: &Var) -> Var {
        let start = self.model.tap_index + 1;
        match self.model.layers[start..].iter().position(|l| matches!(l, Layer::GlobalAvgPool)) {
            Some(p) => self.run(start..start + p + 1, z, self.head_param_offset()),
            None => z.spatial_mean(),
        }
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    (0..logits.batch_len())
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Index of the largest logit other than `y` in each row.
pub fn runner_up(logits: &Tensor, y: &[usize]) -> Vec<usize> {
    let k = logits.shape()[1];
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = usize::MAX;
            for j in 0..k {
                if j != yi && (best == usize::MAX || row[j] > row[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Margin loss `c · max(max_{i≠y} f_i − f_y + κ, 0)`. Minimizing it favours
/// the correct class.
///
/// `confidence = Some(κ)` places the hinge at margin `−κ`; `None` drops the
/// hinge and yields the raw scaled margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseLoss {
    pub c: f64,
    pub confidence: Option<f64>,
}

impl Default for BaseLoss {
    fn default() -> Self {
        Self {
            c: 1.0,
            confidence: Some(0.0),
        }
    }
}

impl BaseLoss {
    pub fn hinge(c: f64) -> Self {
        Self {
            c,
            confidence: Some(0.0),
        }
    }

    pub fn margin(c: f64) -> Self {
        Self { c, confidence: None }
    }

    /// Per-example loss, `[n]`.
    pub fn per_sample(&self, logits: &Var, y: &[usize]) -> Var {
        let other = runner_up(logits.value(), y);
        let margin = logits.gather(&other).sub(&logits.gather(y));
        let shaped = match self.confidence {
            Some(k) => margin.add_scalar(k).relu(),
            None => margin,
        };
        shaped.scale(self.c)
    }

    /// Batch mean.
    pub fn loss(&self, logits: &Var, y: &[usize]) -> Var {
        self.per_sample(logits, y).mean()
    }
}

/// `c · max(max_{i≠y} logits_i − logits_y, 0)` averaged over the batch.
pub fn base_loss(logits: &Tensor, y: &[usize], c: f64) -> Result<f64> {
    check_labels(logits, y)?;
    if c <= 0.0 {
        return Err(Error::contract("base loss scale c must be positive"));
    }
    let _g = NoGradGuard::new();
    Ok(BaseLoss::hinge(c)
        .loss(&Var::constant(logits.clone()), y)
        .item())
}

pub(crate) fn check_labels(logits: &Tensor, y: &[usize]) -> Result<()> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != y.len() {
        return Err(Error::shape(format!(
            "logits {:?} vs {} labels",
            s,
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|&&l| l >= s[1]) {
        return Err(Error::contract(format!("label {bad} out of range 0..{}", s[1])));
    }
    Ok(())
}

/// Per-example softmax cross-entropy, `[n]`.
pub fn cross_entropy_per_sample(logits: &Var, y: &[usize]) -> Var {
    logits.logsumexp_rows().sub(&logits.gather(y))
}

pub fn cross_entropy(logits: &Var, y: &[usize]) -> Var {
    cross_entropy_per_sample(logits, y).mean()
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"RPCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    descriptor: String,
    arch_hash: String,
    architecture: Architecture,
    tap_index: usize,
    param_version: u64,
    param_shapes: Vec<Vec<usize>>,
    rng_state: Option<RngState>,
}

/// Position of a seeded ChaCha stream, so resumed runs draw the same numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub fn save_checkpoint(model: &SplitClassifier, path: &Path) -> Result<()> {
    save_checkpoint_with_rng(model, None, path)
}

/// Layout: magic, u32 format version, u32 header length, JSON header, then
/// every parameter as little-endian `f64`.
pub fn save_checkpoint_with_rng(
    model: &SplitClassifier,
    rng_state: Option<RngState>,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        descriptor: model.arch.descriptor(),
        arch_hash: model.arch.hash(),
        architecture: model.arch.clone(),
        tap_index: model.tap_index,
        param_version: model.param_version,
        param_shapes: model.params().iter().map(|p| p.shape().to_vec()).collect(),
        rng_state,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SplitClassifier> {
    load_checkpoint_with_rng(path).map(|(m, _)| m)
}

pub fn load_checkpoint_with_rng(path: &Path) -> Result<(SplitClassifier, Option<RngState>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12 + hlen;
    if bytes.len() < header_end {
        return Err(Error::format("truncated checkpoint header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;
    if header.arch_hash != header.architecture.hash() || header.descriptor != header.architecture.descriptor() {
        return Err(Error::format(format!(
            "architecture hash mismatch: file says {}, architecture hashes to {}",
            header.arch_hash,
            header.architecture.hash()
        )));
    }
    let mut model = SplitClassifier::new(header.architecture.clone(), 0)?;
    if model.tap_index != header.tap_index {
        return Err(Error::format("tap index does not match architecture"));
    }
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    if shapes != header.param_shapes {
        return Err(Error::format("parameter shapes do not match architecture"));
    }
    let expected = header_end + 8 * shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "checkpoint payload is {} bytes, expected {}",
            bytes.len(),
            expected
        )));
    }
    let mut off = header_end;
    model.update_params(|_, p| {
        for v in p.data_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    });
    model.param_version = header.param_version;
    Ok((model, header.rng_state))
}

/// Loads a checkpoint and checks it was produced for `arch`.
pub fn load_checkpoint_for(path: &Path, arch: &Architecture) -> Result<SplitClassifier> {
    let model = load_checkpoint(path)?;
    if model.arch.hash() != arch.hash() {
        return Err(Error::format(format!(
            "checkpoint architecture `{}` does not match expected `{}`",
            model.arch.descriptor(),
            arch.descriptor()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SplitClassifier {
        SplitClassifier::new(Architecture::with_widths([3, 8, 8], 4, [4, 6, 6, 8]), 7).unwrap()
    }

    #[test]
    fn base_loss_examples() {
        let l = |v: [f64; 2], c| {
            base_loss(&Tensor::new(vec![1, 2], v.to_vec()).unwrap(), &[1], c).unwrap()
        };
        assert_eq!(l([2.0, 5.0], 1.0), 0.0);
        assert_eq!(l([5.0, 2.0], 1.0), 3.0);
        assert_eq!(l([5.0, 2.0], 2.0), 6.0);
        // tie → zero
        assert_eq!(l([4.0, 4.0], 1.0), 0.0);
    }

    #[test]
    fn base_loss_rejects_bad_inputs() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(base_loss(&logits, &[2], 1.0).is_err());
        assert!(base_loss(&logits, &[0], 0.0).is_err());
        assert!(base_loss(&logits, &[0, 1], 1.0).is_err());
    }

    #[test]
    fn shapes_propagate_to_tap() {
        let m = SplitClassifier::new(Architecture::toy([3, 32, 32], 10), 1).unwrap();
        let z = m.forward_to_tap(&Tensor::zeros(&[4, 3, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[4, 64, 8, 8]);
        assert_eq!(m.tap_channels(), 64);
    }

    #[test]
    fn zero_input_bias_free_gives_zero_features() {
        let mut arch = Architecture::with_widths([3, 8, 8], 4, [4, 6, 6, 8]);
        arch.bias = false;
        arch.activation = Activation::Relu;
        let m = SplitClassifier::new(arch, 3).unwrap();
        let z = m.forward_to_tap(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_identity_is_exact() {
        let m = toy();
        let x = Tensor::new(
            vec![3, 3, 8, 8],
            (0..192 * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect(),
        )
        .unwrap();
        let full = m.forward(&x).unwrap();
        let split = m.forward_from_tap(&m.forward_to_tap(&x).unwrap()).unwrap();
        assert_eq!(full.max_abs_diff(&split), 0.0);
    }

    #[test]
    fn input_contract_errors() {
        let m = toy();
        assert!(m.forward_to_tap(&Tensor::zeros(&[1, 3, 9, 8])).is_err());
        assert!(m.forward_from_tap(&Tensor::zeros(&[1, 5, 2, 2])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = toy();
        m.update_params(|_, p| p.data_mut()[0] += 0.25);
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.param_version(), 1);

        let other = Architecture::with_widths([3, 8, 8], 4, [4, 6, 6, 12]);
        assert!(load_checkpoint_for(&path, &other).is_err());

        // Corrupt the stored hash.
        let mut bytes = fs::read(&path).unwrap();
        let pos = bytes
            .windows(9)
            .position(|w| w == b"arch_hash")
            .unwrap();
        let hash_start = pos + 12;
        bytes[hash_start] = if bytes[hash_start] == b'0' { b'1' } else { b'0' };
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
