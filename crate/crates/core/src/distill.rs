//! Robust / non-robust channel distillation.
//!
//! For each image, a per-channel noise scale σ is optimized so that the
//! head still predicts the label when `σ · ε` is added to the tap feature,
//! while a KL term keeps the noisy feature close to the channel's empirical
//! marginal `N(μ_z, σ_z²)`. Channels whose optimized `σ²` exceeds
//! `T = max_c σ_z,c²` tolerate more noise than any channel naturally varies
//! and are labelled robust.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, NoGradGuard, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_per_sample, Bound, SplitClassifier};
use crate::rng::rng;
use crate::tensor::Tensor;

/// Floor applied to σ and σ_z before logs and divisions.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Per-channel statistics of tap activations over a reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `max_c sigma_c²`
    pub threshold: f64,
    pub source: String,
}

impl ChannelProfile {
    /// Builds a profile from raw statistics, deriving the threshold.
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::shape("profile mean and std must have equal, non-zero length"));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::contract("profile std must be non-negative"));
        }
        let threshold = sigma.iter().map(|s| s * s).fold(0.0, f64::max);
        Ok(Self {
            mu,
            sigma,
            threshold,
            source: source.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and (population) std of every tap channel, pooled over images and
/// spatial positions. Two-pass, fixed reduction order.
pub fn estimate_channel_profile(model: &SplitClassifier, reference: &[ImageBatch]) -> Result<ChannelProfile> {
    let total: usize = reference.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::contract("reference set is empty"));
    }
    let feats: Vec<Tensor> = reference
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| model.forward_to_tap(&b.pixels))
        .collect::<Result<_>>()?;
    profile_from_features(&feats, format!("{total} reference images"))
}

/// Profile of already-extracted feature maps `[n, c, h, w]`.
pub fn profile_from_features(feats: &[Tensor], source: String) -> Result<ChannelProfile> {
    let first = feats.first().ok_or_else(|| Error::contract("reference set is empty"))?;
    let c = first.shape()[1];
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for f in feats {
        let (n, hw) = (f.shape()[0], f.shape()[2] * f.shape()[3]);
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * hw;
                sum[ch] += f.data()[start..start + hw].iter().sum::<f64>();
            }
        }
        count += n * hw;
    }
    let mu: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; c];
    for f in feats {
        let (n, hw) = (f.shape()[0], f.shape()[2] * f.shape()[3]);
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * hw;
                sq[ch] += f.data()[start..start + hw]
                    .iter()
                    .map(|v| (v - mu[ch]) * (v - mu[ch]))
                    .sum::<f64>();
            }
        }
    }
    let sigma = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    ChannelProfile::new(mu, sigma, source)
}

/// Hyperparameters of the noise-scale optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub beta: f64,
    pub steps: usize,
    /// Adam step size on the softplus pre-activation of σ.
    pub lr: f64,
    pub noise_draws: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            steps: 200,
            lr: 0.05,
            noise_draws: 4,
            seed: 0,
        }
    }
}

/// Optimized per-image, per-channel noise scales, `[n, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVariance {
    pub sigma: Tensor,
    /// Objective value at each step (batch sum).
    pub trace: Vec<f64>,
}

fn inv_softplus(y: f64) -> f64 {
    // y > 0
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Closed-form `KL(N(z, σ²) ‖ N(μ_z, σ_z²))` averaged over the channels and
/// spatial positions of one feature map `[c, h, w]`.
pub fn kl_term(sigma: &[f64], z: &Tensor, profile: &ChannelProfile) -> Result<f64> {
    let s = z.shape();
    let (c, hw) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => return Err(Error::shape(format!("kl_term expects one feature map, got {s:?}"))),
    };
    if sigma.len() != c || profile.channels() != c {
        return Err(Error::shape(format!(
            "sigma has {} channels, feature {c}, profile {}",
            sigma.len(),
            profile.channels()
        )));
    }
    let mut acc = 0.0;
    for ch in 0..c {
        let sz = profile.sigma[ch].max(VARIANCE_FLOOR);
        let sg = sigma[ch].max(VARIANCE_FLOOR);
        for v in &z.data()[ch * hw..(ch + 1) * hw] {
            let d = v - profile.mu[ch];
            acc += (sz / sg).ln() + (sg * sg + d * d) / (2.0 * sz * sz) - 0.5;
        }
    }
    Ok(acc / (c * hw) as f64)
}

/// Differentiable batch KL, `[n]`, with σ given as `[n, c]`.
fn kl_batch(sigma: &Var, z: &Tensor, profile: &ChannelProfile) -> Var {
    let (n, c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let sz: Vec<f64> = profile.sigma.iter().map(|s| s.max(VARIANCE_FLOOR)).collect();
    // Constant part per image: mean over elements of (z-μ)²/(2σ_z²) + ln σ_z − ½.
    let mut constant = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for ch in 0..c {
            let start = (i * c + ch) * h * w;
            for v in &z.data()[start..start + h * w] {
                let d = v - profile.mu[ch];
                acc += d * d / (2.0 * sz[ch] * sz[ch]) + sz[ch].ln() - 0.5;
            }
        }
        constant[i] = acc / (c * h * w) as f64;
    }
    // σ-dependent part, identical at every spatial position: mean over
    // channels of σ²/(2σ_z²) − ln σ.
    let inv2 = Tensor::from_parts(
        vec![n, c],
        (0..n * c).map(|i| 1.0 / (2.0 * sz[i % c] * sz[i % c])).collect(),
    );
    let s = sigma.clamp(VARIANCE_FLOOR, f64::INFINITY);
    let per_channel = s.mul(&s).mask_mul(&inv2).sub(&s.ln());
    per_channel
        .sum_to(&[n, 1])
        .reshape(&[n])
        .scale(1.0 / c as f64)
        .add(&Var::constant(Tensor::from_parts(vec![n], constant)))
}

/// Minimizes `E_ε[CE(f_{l+}(z + σ·ε), y)] + β·KL` over one σ per image and
/// channel, with the reparameterization ε ~ N(0, I) redrawn every step.
pub fn ib_optimize_sigma(
    model: &SplitClassifier,
    batch: &ImageBatch,
    profile: &ChannelProfile,
    cfg: &DistillConfig,
) -> Result<NoiseVariance> {
    if cfg.beta < 0.0 {
        return Err(Error::contract("beta must be non-negative"));
    }
    if cfg.noise_draws == 0 || cfg.steps == 0 {
        return Err(Error::contract("distillation needs at least one step and one noise draw"));
    }
    let z = model.forward_to_tap(&batch.pixels)?;
    if z.shape()[1] != profile.channels() {
        return Err(Error::shape("profile channel count does not match the tap"));
    }
    ib_optimize_sigma_on_features(model, &z, &batch.labels, profile, cfg)
}

/// Same as [`ib_optimize_sigma`] for precomputed tap features.
pub fn ib_optimize_sigma_on_features(
    model: &SplitClassifier,
    z: &Tensor,
    labels: &[usize],
    profile: &ChannelProfile,
    cfg: &DistillConfig,
) -> Result<NoiseVariance> {
    let (n, c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let bound = model.bind(false);
    let zc = Var::constant(z.clone());
    let mut u = Tensor::from_parts(
        vec![n, c],
        (0..n * c)
            .map(|i| inv_softplus(profile.sigma[i % c].max(VARIANCE_FLOOR)))
            .collect(),
    );
    let mut adam = Adam::new(u.shape(), cfg.lr);
    let mut r = rng(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let uv = Var::param(u.clone());
        let noise: Vec<Tensor> = (0..cfg.noise_draws)
            .map(|_| {
                Tensor::from_parts(
                    vec![n, c, h, w],
                    (0..n * c * h * w).map(|_| StandardNormal.sample(&mut r)).collect(),
                )
            })
            .collect();
        let objective = ib_objective(&bound, &zc, labels, &uv.softplus(), &noise, profile, cfg.beta).sum();
        let value = objective.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("information-bottleneck objective is {value}"),
            });
        }
        trace.push(value);
        let g = grad(&objective, &[&uv], false).remove(0);
        adam.step(&mut u, g.value());
    }
    let _ng = NoGradGuard::new();
    let sigma = Var::constant(u).softplus().value().clone();
    Ok(NoiseVariance { sigma, trace })
}

/// Per-image `mean_ε CE(f_{l+}(z + σ·ε), y) + β·KL` for fixed noise draws,
/// `[n]`, with σ given as `[n, c]`.
pub fn ib_objective(
    bound: &Bound,
    z: &Var,
    labels: &[usize],
    sigma: &Var,
    noise: &[Tensor],
    profile: &ChannelProfile,
    beta: f64,
) -> Var {
    let s = z.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let sigma_map = sigma.reshape(&[n, c, 1, 1]).broadcast(&[n, c, h, w]);
    let mut ce = Var::constant(Tensor::zeros(&[n]));
    for eps in noise {
        let logits = bound.forward_from_tap(&z.add(&sigma_map.mask_mul(eps)));
        ce = ce.add(&cross_entropy_per_sample(&logits, labels));
    }
    ce.scale(1.0 / noise.len().max(1) as f64)
        .add(&kl_batch(sigma, z.value(), profile).scale(beta))
}

/// Plain Adam on one tensor.
pub(crate) struct Adam {
    lr: f64,
    m: Tensor,
    v: Tensor,
    t: i32,
}

impl Adam {
    pub(crate) fn new(shape: &[usize], lr: f64) -> Self {
        Self {
            lr,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, x: &mut Tensor, g: &Tensor) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..x.numel() {
            let gi = g.data()[i];
            let m = B1 * self.m.data()[i] + (1.0 - B1) * gi;
            let v = B2 * self.v.data()[i] + (1.0 - B2) * gi * gi;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            x.data_mut()[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + 1e-8);
        }
    }
}

/// Robust / non-robust channel indicator for one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub robust: Vec<bool>,
    pub sigma_snapshot: Vec<f64>,
    pub threshold_used: f64,
}

impl ChannelMask {
    pub fn channels(&self) -> usize {
        self.robust.len()
    }

    /// `i_r`
    pub fn i_r(&self) -> Vec<f64> {
        self.robust.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect()
    }

    /// `i_nr = 1 − i_r`
    pub fn i_nr(&self) -> Vec<f64> {
        self.robust.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect()
    }

    pub fn robust_count(&self) -> usize {
        self.robust.iter().filter(|&&r| r).count()
    }

    pub fn all(channels: usize, robust: bool) -> Self {
        Self {
            robust: vec![robust; channels],
            sigma_snapshot: Vec::new(),
            threshold_used: f64::NAN,
        }
    }

    /// `"1"` for robust, `"0"` for non-robust, one char per channel.
    pub fn bitmap(&self) -> String {
        self.robust.iter().map(|&r| if r { '1' } else { '0' }).collect()
    }
}

/// A channel is robust iff `σ_c² > T` (strict).
pub fn build_mask(sigma: &[f64], profile: &ChannelProfile) -> Result<ChannelMask> {
    if sigma.len() != profile.channels() {
        return Err(Error::shape(format!(
            "sigma has {} channels, profile {}",
            sigma.len(),
            profile.channels()
        )));
    }
    Ok(ChannelMask {
        robust: sigma.iter().map(|s| s * s > profile.threshold).collect(),
        sigma_snapshot: sigma.to_vec(),
        threshold_used: profile.threshold,
    })
}

fn channel_factor(shape: &[usize], per_channel: &[f64]) -> Result<Tensor> {
    if shape.len() != 4 || shape[1] != per_channel.len() {
        return Err(Error::shape(format!(
            "feature {:?} vs mask of {} channels",
            shape,
            per_channel.len()
        )));
    }
    let hw = shape[2] * shape[3];
    let c = shape[1];
    Ok(Tensor::from_parts(
        shape.to_vec(),
        (0..shape.iter().product::<usize>())
            .map(|i| per_channel[(i / hw) % c])
            .collect(),
    ))
}

/// `(z ⊙ i_r, z ⊙ i_nr)`, broadcast over batch and spatial positions.
pub fn split_feature(z: &Tensor, mask: &ChannelMask) -> Result<(Tensor, Tensor)> {
    let ir = channel_factor(z.shape(), &mask.i_r())?;
    let inr = channel_factor(z.shape(), &mask.i_nr())?;
    Ok((z.zip_map(&ir, |a, m| a * m), z.zip_map(&inr, |a, m| a * m)))
}

/// Per-image masks for a batch, aligned with example ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub ids: Vec<u64>,
    pub masks: Vec<ChannelMask>,
    pub beta: f64,
    pub param_version: u64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// The same mask for every id.
    pub fn uniform(ids: &[u64], mask: ChannelMask, param_version: u64) -> Self {
        Self {
            ids: ids.to_vec(),
            masks: vec![mask; ids.len()],
            beta: f64::NAN,
            param_version,
        }
    }

    pub fn get(&self, id: u64) -> Option<&ChannelMask> {
        self.ids.iter().position(|&i| i == id).map(|p| &self.masks[p])
    }

    /// Masks for the given ids in order.
    pub fn for_ids(&self, ids: &[u64]) -> Result<Vec<ChannelMask>> {
        ids.iter()
            .map(|id| {
                self.get(*id)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("no channel mask for example {id}")))
            })
            .collect()
    }

    /// `i_nr` rows for the given ids, `[n, c]`.
    pub fn nonrobust_matrix(&self, ids: &[u64]) -> Result<Tensor> {
        let masks = self.for_ids(ids)?;
        let c = masks.first().map(|m| m.channels()).unwrap_or(0);
        Ok(Tensor::from_parts(
            vec![masks.len(), c],
            masks.iter().flat_map(|m| m.i_nr()).collect(),
        ))
    }

    pub fn robust_matrix(&self, ids: &[u64]) -> Result<Tensor> {
        let masks = self.for_ids(ids)?;
        let c = masks.first().map(|m| m.channels()).unwrap_or(0);
        Ok(Tensor::from_parts(
            vec![masks.len(), c],
            masks.iter().flat_map(|m| m.i_r()).collect(),
        ))
    }

    /// Majority vote per channel over all masks.
    pub fn majority(&self) -> Result<ChannelMask> {
        let first = self
            .masks
            .first()
            .ok_or_else(|| Error::contract("majority vote over an empty mask set"))?;
        let c = first.channels();
        let robust = (0..c)
            .map(|ch| 2 * self.masks.iter().filter(|m| m.robust[ch]).count() > self.masks.len())
            .collect();
        Ok(ChannelMask {
            robust,
            sigma_snapshot: Vec::new(),
            threshold_used: first.threshold_used,
        })
    }

    pub fn mean_robust_count(&self) -> f64 {
        if self.masks.is_empty() {
            return 0.0;
        }
        self.masks.iter().map(|m| m.robust_count() as f64).sum::<f64>() / self.masks.len() as f64
    }

    pub fn extend(&mut self, other: MaskSet) {
        self.ids.extend(other.ids);
        self.masks.extend(other.masks);
    }
}

/// Runs the σ optimization over `batch` in chunks and thresholds the result.
pub fn distill_masks(
    model: &SplitClassifier,
    batch: &ImageBatch,
    profile: &ChannelProfile,
    cfg: &DistillConfig,
) -> Result<MaskSet> {
    let chunk = 128;
    let mut masks = Vec::with_capacity(batch.len());
    let idx: Vec<usize> = (0..batch.len()).collect();
    for (ci, part) in idx.chunks(chunk).enumerate() {
        let sub = batch.select(part);
        let mut c = cfg.clone();
        c.seed = crate::rng::derive_seed(cfg.seed, &format!("chunk-{ci}"));
        let nv = ib_optimize_sigma(model, &sub, profile, &c)?;
        for i in 0..sub.len() {
            masks.push(build_mask(nv.sigma.row(i), profile)?);
        }
    }
    Ok(MaskSet {
        ids: batch.ids.clone(),
        masks,
        beta: cfg.beta,
        param_version: model.param_version(),
    })
}

// ---- archive ----

const MASK_FORMAT: &str = "robust-proxy/channel-masks";
const MASK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    example_id: u64,
    sigma: Vec<f64>,
    robust: String,
    threshold: f64,
    beta: f64,
    param_version: u64,
}

#[derive(Serialize, Deserialize)]
struct MaskArchive {
    format: String,
    version: u32,
    records: Vec<MaskRecord>,
}

pub fn save_masks(set: &MaskSet, path: &Path) -> Result<()> {
    let archive = MaskArchive {
        format: MASK_FORMAT.into(),
        version: MASK_VERSION,
        records: set
            .ids
            .iter()
            .zip(&set.masks)
            .map(|(&id, m)| MaskRecord {
                example_id: id,
                sigma: m.sigma_snapshot.clone(),
                robust: m.bitmap(),
                threshold: m.threshold_used,
                beta: set.beta,
                param_version: set.param_version,
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec_pretty(&archive)?)?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    let archive: MaskArchive = serde_json::from_slice(&fs::read(path)?)?;
    if archive.format != MASK_FORMAT || archive.version != MASK_VERSION {
        return Err(Error::format(format!(
            "unsupported mask archive {} v{}",
            archive.format, archive.version
        )));
    }
    let beta = archive.records.first().map(|r| r.beta).unwrap_or(f64::NAN);
    let param_version = archive.records.first().map(|r| r.param_version).unwrap_or(0);
    let mut ids = Vec::new();
    let mut masks = Vec::new();
    for r in archive.records {
        let robust = r
            .robust
            .chars()
            .map(|ch| match ch {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::format(format!("bad mask bit `{other}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        ids.push(r.example_id);
        masks.push(ChannelMask {
            robust,
            sigma_snapshot: r.sigma,
            threshold_used: r.threshold,
        });
    }
    Ok(MaskSet {
        ids,
        masks,
        beta,
        param_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(mu: Vec<f64>, sigma: Vec<f64>) -> ChannelProfile {
        ChannelProfile::new(mu, sigma, "test").unwrap()
    }

    #[test]
    fn profile_hand_arithmetic() {
        // two samples, one channel, 1×1 spatial: values 0 and 2
        let f = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let p = profile_from_features(&[f], "hand".into()).unwrap();
        assert_eq!(p.mu, vec![1.0]);
        assert_eq!(p.sigma, vec![1.0]);
        assert_eq!(p.threshold, 1.0);
    }

    #[test]
    fn constant_channel_has_zero_std() {
        let f = Tensor::new(vec![3, 2, 1, 2], vec![5.0, 5.0, 1.0, 2.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0, 0.0, 9.0]).unwrap();
        let p = profile_from_features(&[f], "c".into()).unwrap();
        assert_eq!(p.sigma[0], 0.0);
        assert!(p.sigma[1] > 0.0);
        assert_eq!(p.threshold, p.sigma[1] * p.sigma[1]);
    }

    #[test]
    fn kl_examples() {
        let p = profile(vec![0.0, 0.0], vec![1.0, 1.0]);
        let z_mu = Tensor::zeros(&[2, 3, 3]);
        assert_eq!(kl_term(&[1.0, 1.0], &z_mu, &p).unwrap(), 0.0);
        let z2 = Tensor::full(&[2, 3, 3], 2.0);
        assert!((kl_term(&[1.0, 1.0], &z2, &p).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_batch_matches_closed_form() {
        let p = profile(vec![0.3, -0.2], vec![0.7, 1.4]);
        let z = Tensor::new(vec![2, 2, 1, 2], vec![0.1, 0.5, -1.0, 2.0, 0.0, 0.3, 0.2, -0.4]).unwrap();
        let sigma = Tensor::new(vec![2, 2], vec![0.5, 2.0, 1.1, 0.9]).unwrap();
        let kl = kl_batch(&Var::constant(sigma.clone()), &z, &p);
        for i in 0..2 {
            let zi = z.select_rows(&[i]);
            let expect = kl_term(sigma.row(i), &zi, &p).unwrap();
            assert!((kl.value().data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_rules() {
        let p = profile(vec![0.0, 0.0], vec![1.0, 2.0]); // T = 4
        let t = p.threshold;
        let m = build_mask(&[(t + 1.0).sqrt(), (t - 1.0).sqrt()], &p).unwrap();
        assert_eq!(m.i_r(), vec![1.0, 0.0]);
        assert_eq!(m.i_nr(), vec![0.0, 1.0]);
        let all = build_mask(&[3.0, 3.0], &p).unwrap();
        assert_eq!(all.i_r(), vec![1.0, 1.0]);
        assert_eq!(all.i_nr(), vec![0.0, 0.0]);
        let boundary = build_mask(&[2.0, 0.5], &p).unwrap();
        assert_eq!(boundary.robust, vec![false, false]);
        assert!(build_mask(&[1.0], &p).is_err());
    }

    #[test]
    fn split_examples() {
        let z = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let mask = ChannelMask {
            robust: vec![true, false],
            sigma_snapshot: vec![],
            threshold_used: 0.0,
        };
        let (zr, znr) = split_feature(&z, &mask).unwrap();
        assert_eq!(zr.data(), &[3.0, 0.0]);
        assert_eq!(znr.data(), &[0.0, 4.0]);
        let (zr, znr) = split_feature(&z, &ChannelMask::all(2, true)).unwrap();
        assert_eq!(zr, z);
        assert!(znr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn archive_round_trip() {
        let set = MaskSet {
            ids: vec![4, 9],
            masks: vec![
                ChannelMask {
                    robust: vec![true, false, true],
                    sigma_snapshot: vec![1.0, 0.1, 2.0],
                    threshold_used: 0.5,
                },
                ChannelMask {
                    robust: vec![false, false, true],
                    sigma_snapshot: vec![0.2, 0.1, 2.0],
                    threshold_used: 0.5,
                },
            ],
            beta: 10.0,
            param_version: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_masks(&set, &path).unwrap();
        assert_eq!(load_masks(&path).unwrap(), set);
        assert_eq!(set.majority().unwrap().robust, vec![false, false, true]);
        assert_eq!(set.nonrobust_matrix(&[9]).unwrap().data(), &[1.0, 1.0, 0.0]);
        assert!(set.nonrobust_matrix(&[5]).is_err());
    }
}
