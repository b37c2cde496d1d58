//! Measurements behind the figures: gradient-norm and similarity
//! distributions, masked-prediction ablations, feature inversion and
//! feature export.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::data::{Dataset, ImageBatch};
use crate::distill::{build_mask, ib_optimize_sigma, ChannelMask, ChannelProfile, DistillConfig, MaskSet};
use crate::error::{Error, Result};
use crate::model::{accuracy, argmax_rows, BaseLoss, SplitClassifier};
use crate::perturb::{apply_crp, expand_channel_mask, nonrobust_gradient_norms, CrpSet};
use crate::proxy::{cosine_distance, pooled_with_crp};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            n,
            mean: if n == 0 { f64::NAN } else { mean },
            std: if n == 0 { f64::NAN } else { var.sqrt() },
            min: sorted.first().copied().unwrap_or(f64::NAN),
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            max: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }
}

/// A labelled sample of scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub label: String,
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl Distribution {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        let summary = Summary::of(&values);
        Self {
            label: label.into(),
            values,
            summary,
        }
    }

    pub fn mean(&self) -> f64 {
        self.summary.mean
    }

    pub fn std(&self) -> f64 {
        self.summary.std
    }

    /// `condition,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,value\n");
        for v in &self.values {
            s.push_str(&format!("{},{v:e}\n", self.label));
        }
        s
    }
}

/// Percentile bootstrap interval for `mean(a_i − b_i)` over paired samples.
pub fn paired_bootstrap_ci(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("paired bootstrap needs two equal, non-empty samples"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut r = rng(seed);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..d.len()).map(|_| d[r.random_range(0..d.len())]).sum::<f64>() / d.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// `‖G_nr‖₂` per image, without and (optionally) with CRPs applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientNormReport {
    pub without_crp: Distribution,
    pub with_crp: Option<Distribution>,
}

pub fn gradient_norm_distribution(
    model: &SplitClassifier,
    batch: &ImageBatch,
    masks: &MaskSet,
    crps: Option<&CrpSet>,
    loss: &BaseLoss,
) -> Result<GradientNormReport> {
    let mut without = Vec::with_capacity(batch.len());
    let mut with = Vec::new();
    let idx: Vec<usize> = (0..batch.len()).collect();
    for part in idx.chunks(128) {
        let b = batch.select(part);
        without.extend(nonrobust_gradient_norms(model, &b, masks, loss)?);
        if let Some(c) = crps {
            with.extend(nonrobust_gradient_norms(model, &apply_crp(&b, c)?, masks, loss)?);
        }
    }
    Ok(GradientNormReport {
        without_crp: Distribution::new("without_crp", without),
        with_crp: crps.map(|_| Distribution::new("with_crp", with)),
    })
}

/// Seeded same-class index pairs `(i, j)`, `i ≠ j`.
pub fn same_class_pairs(ds: &Dataset, pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let classes: Vec<usize> = (0..ds.num_classes)
        .filter(|&k| ds.class_positions(k).len() >= 2)
        .collect();
    if classes.is_empty() {
        return Err(Error::contract("no class has two examples to pair"));
    }
    let mut r = rng(derive_seed(seed, "pairs"));
    Ok((0..pairs)
        .map(|_| {
            let pos = ds.class_positions(classes[r.random_range(0..classes.len())]);
            let a = r.random_range(0..pos.len());
            let mut b = r.random_range(0..pos.len() - 1);
            if b >= a {
                b += 1;
            }
            (pos[a], pos[b])
        })
        .collect())
}

/// Cosine similarity of pooled tap features over seeded same-class pairs.
pub fn positive_similarity_distribution(
    model: &SplitClassifier,
    ds: &Dataset,
    crps: Option<&CrpSet>,
    pairs: usize,
    seed: u64,
) -> Result<Distribution> {
    let pairs = same_class_pairs(ds, pairs, seed)?;
    let mut used: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    used.sort_unstable();
    used.dedup();
    let feats = pooled_with_crp(model, &ds.batch(&used), crps)?;
    let row = |p: usize| feats.row(used.binary_search(&p).expect("position was collected"));
    let values = pairs
        .iter()
        .map(|&(a, b)| cosine_distance(row(a), row(b)).map(|d| 1.0 - d))
        .collect::<Result<Vec<f64>>>()?;
    let label = if crps.is_some() { "with_crp" } else { "without_crp" };
    Ok(Distribution::new(label, values))
}

/// Which tap channels survive in a masked prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    Robust,
    NonRobust,
    Both,
}

/// Accuracy of `f_{l+}(z ⊙ i_keep)`.
pub fn masked_accuracy(model: &SplitClassifier, batch: &ImageBatch, masks: &MaskSet, keep: Keep) -> Result<f64> {
    let z = model.forward_to_tap(&batch.pixels)?;
    let z = match keep {
        Keep::Both => z,
        Keep::Robust => z.zip_map(&expand_channel_mask(&masks.robust_matrix(&batch.ids)?, z.shape())?, |a, m| a * m),
        Keep::NonRobust => z.zip_map(&expand_channel_mask(&masks.nonrobust_matrix(&batch.ids)?, z.shape())?, |a, m| a * m),
    };
    let pred = argmax_rows(&model.forward_from_tap(&z)?);
    Ok(accuracy(&pred, &batch.labels))
}

/// Masked accuracies across a β sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub betas: Vec<f64>,
    pub robust_only: Vec<f64>,
    pub nonrobust_only: Vec<f64>,
    pub mean_robust_channels: Vec<f64>,
}

impl AblationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta,robust_only,nonrobust_only,mean_robust_channels\n");
        for i in 0..self.betas.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.betas[i], self.robust_only[i], self.nonrobust_only[i], self.mean_robust_channels[i]
            ));
        }
        s
    }
}

/// Distills masks at every β (same noise seed) and scores both masked
/// predictions.
pub fn beta_ablation(
    model: &SplitClassifier,
    batch: &ImageBatch,
    profile: &ChannelProfile,
    base: &DistillConfig,
    betas: &[f64],
) -> Result<AblationCurve> {
    let mut curve = AblationCurve {
        betas: betas.to_vec(),
        robust_only: Vec::new(),
        nonrobust_only: Vec::new(),
        mean_robust_channels: Vec::new(),
    };
    for &beta in betas {
        let cfg = DistillConfig { beta, ..base.clone() };
        let masks = crate::distill::distill_masks(model, batch, profile, &cfg)?;
        curve.robust_only.push(masked_accuracy(model, batch, &masks, Keep::Robust)?);
        curve.nonrobust_only.push(masked_accuracy(model, batch, &masks, Keep::NonRobust)?);
        curve.mean_robust_channels.push(masks.mean_robust_count());
    }
    Ok(curve)
}

/// Number of adjacent pairs `(v_i, v_{i+1})` with `v_{i+1} ≤ v_i`
/// (or `≥` when `increasing`).
pub fn monotone_pairs(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] >= w[0] } else { w[1] <= w[0] })
        .count()
}

/// Result of [`invert_feature`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub image: Tensor,
    /// `‖(f_l(img) − target) ⊙ i_keep‖₂` before every step and at the end.
    pub residuals: Vec<f64>,
}

/// Gradient descent on `½‖(f_l(img) − target) ⊙ i_keep‖²` from a seeded
/// uniform image (or `start`), clipping to `[0, 1]` after every step.
pub fn invert_feature(
    model: &SplitClassifier,
    target: &Tensor,
    mask: &ChannelMask,
    keep: Keep,
    steps: usize,
    lr: f64,
    seed: u64,
    start: Option<&Tensor>,
) -> Result<Inversion> {
    model.check_feature(target)?;
    if target.shape()[0] != 1 {
        return Err(Error::shape("inversion targets one feature map"));
    }
    let [c, h, w] = model.input_shape();
    let mut img = match start {
        Some(s) => {
            model.check_input(s)?;
            s.clone()
        }
        None => {
            let mut r = rng(seed);
            Tensor::from_parts(vec![1, c, h, w], (0..c * h * w).map(|_| r.random::<f64>()).collect())
        }
    };
    let per_channel = match keep {
        Keep::Robust => mask.i_r(),
        Keep::NonRobust => mask.i_nr(),
        Keep::Both => vec![1.0; mask.channels()],
    };
    let m = Tensor::from_parts(vec![1, per_channel.len()], per_channel);
    let m = expand_channel_mask(&m, target.shape())?;
    let bound = model.bind(false);
    let tv = Var::constant(target.clone());
    let mut residuals = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let x = Var::param(img.clone());
        let diff = bound.forward_to_tap(&x).sub(&tv).mask_mul(&m);
        let sq = diff.mul(&diff).sum();
        let res = sq.item().sqrt();
        if !res.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("inversion residual is {res}; trace {residuals:?}"),
            });
        }
        residuals.push(res);
        if step == steps {
            break;
        }
        let g = grad(&sq.scale(0.5), &[&x], false).remove(0);
        for (p, gi) in img.data_mut().iter_mut().zip(g.value().data()) {
            *p = (*p - lr * gi).clamp(0.0, 1.0);
        }
    }
    Ok(Inversion { image: img, residuals })
}

// ---- feature export ----

const FEATURE_MAGIC: &[u8; 6] = b"RPFEAT";
const FEATURE_VERSION: u8 = 1;

/// One exported pooled feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub example_id: u64,
    pub label: u32,
    pub vector: Vec<f64>,
}

/// Writes `(id, label, pooled feature)` for every example. Layout: magic,
/// version byte, then records of `u32` payload length followed by the
/// payload `u64 id, u32 label, u32 dim, dim × f64`, all little-endian.
pub fn export_features(model: &SplitClassifier, ds: &Dataset, crps: Option<&CrpSet>, out: &Path) -> Result<usize> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    let mut count = 0;
    for b in ds.sequential_batches(256) {
        let feats = pooled_with_crp(model, &b, crps)?;
        for i in 0..b.len() {
            let v = feats.row(i);
            let payload_len = 8 + 4 + 4 + 8 * v.len();
            buf.extend_from_slice(&(payload_len as u32).to_le_bytes());
            buf.extend_from_slice(&b.ids[i].to_le_bytes());
            buf.extend_from_slice(&(b.labels[i] as u32).to_le_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            count += 1;
        }
    }
    let mut f = fs::File::create(out)?;
    f.write_all(&buf)?;
    Ok(count)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 7 || &bytes[..6] != FEATURE_MAGIC {
        return Err(Error::format("not a feature export (bad magic)"));
    }
    if bytes[6] != FEATURE_VERSION {
        return Err(Error::format(format!("unsupported feature export version {}", bytes[6])));
    }
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::format("truncated feature record"))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 7;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let end = pos + len;
        let id = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
        let label = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
        let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        if 16 + 8 * dim != len {
            return Err(Error::format("feature record length disagrees with its dimension"));
        }
        let vector = (0..dim)
            .map(|_| take(&mut pos, 8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(pos, end);
        out.push(FeatureRecord {
            example_id: id,
            label,
            vector,
        });
    }
    Ok(out)
}

/// Per-image masks from one σ optimization, for callers that only need
/// masks for a single batch.
pub fn masks_for_batch(
    model: &SplitClassifier,
    batch: &ImageBatch,
    profile: &ChannelProfile,
    cfg: &DistillConfig,
) -> Result<MaskSet> {
    let nv = ib_optimize_sigma(model, batch, profile, cfg)?;
    let masks = (0..batch.len())
        .map(|i| build_mask(nv.sigma.row(i), profile))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        ids: batch.ids.clone(),
        masks,
        beta: cfg.beta,
        param_version: model.param_version(),
    })
}
