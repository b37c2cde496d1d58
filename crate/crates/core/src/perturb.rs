//! Non-robust gradient suppression.
//!
//! A robust perturbation `r` for an image minimizes
//! `L_base(f(x+r), y) + ‖G_nr(x+r)‖ + ‖r‖`, where `G_nr` is the gradient of
//! the base loss with respect to the tap feature restricted to the
//! non-robust channels. A class-wise robust perturbation (CRP) shares one
//! `r^k` across the images of class `k` and drops the `‖r‖` term.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::Engine as _;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::data::{Dataset, ImageBatch};
use crate::distill::MaskSet;
use crate::error::{Error, Result};
use crate::model::{BaseLoss, Bound, SplitClassifier};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

/// Expands `[n, c]` channel indicators to a feature shape `[n, c, h, w]`.
pub fn expand_channel_mask(mask: &Tensor, feature_shape: &[usize]) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 || feature_shape.len() != 4 || s[0] != feature_shape[0] || s[1] != feature_shape[1] {
        return Err(Error::shape(format!(
            "channel mask {s:?} does not fit feature {feature_shape:?}"
        )));
    }
    let hw = feature_shape[2] * feature_shape[3];
    let total: usize = feature_shape.iter().product();
    Ok(Tensor::from_parts(
        feature_shape.to_vec(),
        (0..total).map(|i| mask.data()[i / hw]).collect(),
    ))
}

/// Differentiable `G_nr = i_nr ⊙ ∂L_base/∂z`, `[n, c, h, w]`.
///
/// `L_base` is taken per image, so row `i` only depends on image `i`. With
/// `create_graph` the result can itself be differentiated with respect to
/// `x_aug` or the model parameters.
pub fn nonrobust_gradient_var(
    bound: &Bound,
    x_aug: &Var,
    y: &[usize],
    i_nr: &Tensor,
    loss: &BaseLoss,
    create_graph: bool,
) -> Result<Var> {
    let z = bound.forward_to_tap(x_aug);
    let z = if z.requires_grad() {
        z
    } else {
        Var::param(z.value().clone())
    };
    let mask = expand_channel_mask(i_nr, z.shape())?;
    let l = loss.per_sample(&bound.forward_from_tap(&z), y).sum();
    let g = grad(&l, &[&z], create_graph).remove(0);
    Ok(g.mask_mul(&mask))
}

/// Value of `G_nr` for a batch, using the masks recorded for its ids.
pub fn nonrobust_gradient(
    model: &SplitClassifier,
    x_aug: &ImageBatch,
    masks: &MaskSet,
    loss: &BaseLoss,
) -> Result<Tensor> {
    model.check_input(&x_aug.pixels)?;
    let i_nr = masks.nonrobust_matrix(&x_aug.ids)?;
    if i_nr.shape()[1] != model.tap_channels() {
        return Err(Error::shape("mask channel count does not match the tap"));
    }
    let bound = model.bind(false);
    let x = Var::constant(x_aug.pixels.clone());
    Ok(nonrobust_gradient_var(&bound, &x, &x_aug.labels, &i_nr, loss, false)?
        .value()
        .clone())
}

/// `‖G_nr‖₂` per image.
pub fn nonrobust_gradient_norms(
    model: &SplitClassifier,
    x_aug: &ImageBatch,
    masks: &MaskSet,
    loss: &BaseLoss,
) -> Result<Vec<f64>> {
    let g = nonrobust_gradient(model, x_aug, masks, loss)?;
    Ok((0..g.batch_len())
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Step counts and rates for perturbation optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: BaseLoss,
    /// Weight of `‖r‖₂` in the per-image objective; CEO has no such term.
    #[serde(default = "one")]
    pub r_norm_weight: f64,
    /// Images per CEO step; ignored for per-image perturbations.
    pub batch_size: usize,
    /// Size of the class subset the CEO minibatches are drawn from.
    pub samples_per_class: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

/// Hinge confidence used by the perturbation objectives. At zero the hinge
/// and its feature gradient vanish on every correctly classified image.
pub const PERTURB_CONFIDENCE: f64 = 10.0;

impl Default for PerturbOptConfig {
    fn default() -> Self {
        Self::ceo_default()
    }
}

impl PerturbOptConfig {
    fn default_loss() -> BaseLoss {
        BaseLoss {
            c: 1.0,
            confidence: Some(PERTURB_CONFIDENCE),
        }
    }

    pub fn rp_default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            loss: Self::default_loss(),
            r_norm_weight: 1.0,
            batch_size: 0,
            samples_per_class: 0,
            seed: 0,
        }
    }

    pub fn ceo_default() -> Self {
        Self {
            steps: 400,
            lr: 0.01,
            loss: Self::default_loss(),
            r_norm_weight: 1.0,
            batch_size: 64,
            samples_per_class: 500,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("perturbation optimization needs at least one step"));
        }
        if !(self.lr > 0.0) || !(self.loss.c > 0.0) {
            return Err(Error::contract("learning rate and base-loss scale must be positive"));
        }
        if !(self.r_norm_weight >= 0.0) {
            return Err(Error::contract("perturbation norm weight must be non-negative"));
        }
        Ok(())
    }
}

/// Per-image robust perturbations for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustPerturbations {
    /// `[n, C, H, W]`, with `x + r ∈ [0, 1]`.
    pub r: Tensor,
    pub ids: Vec<u64>,
    pub final_base_loss: Vec<f64>,
    pub final_gnr_norm: Vec<f64>,
    pub final_r_norm: Vec<f64>,
}

impl RobustPerturbations {
    /// The batch with `r` added.
    pub fn apply(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        if batch.ids != self.ids {
            return Err(Error::contract("perturbations were optimized for different images"));
        }
        Ok(batch.with_pixels(batch.pixels.zip_map(&self.r, |a, b| (a + b).clamp(0.0, 1.0))))
    }
}

/// Gradient descent on `L_base + ‖G_nr‖ + w·‖r‖` with `x + r` re-clipped to
/// `[0, 1]` after every step. The model is read-only.
pub fn optimize_rp(
    model: &SplitClassifier,
    batch: &ImageBatch,
    masks: &MaskSet,
    cfg: &PerturbOptConfig,
) -> Result<RobustPerturbations> {
    cfg.validate()?;
    model.check_input(&batch.pixels)?;
    batch.validate(model.num_classes())?;
    let i_nr = masks.nonrobust_matrix(&batch.ids)?;
    let bound = model.bind(false);
    let x = &batch.pixels;
    let mut r = Tensor::zeros(x.shape());
    let mut last = (Vec::new(), Vec::new(), Vec::new());
    for step in 0..=cfg.steps {
        let rv = Var::param(r.clone());
        let x_aug = Var::constant(x.clone()).add(&rv);
        let z = bound.forward_to_tap(&x_aug);
        let mask = expand_channel_mask(&i_nr, z.shape())?;
        let lb = cfg.loss.per_sample(&bound.forward_from_tap(&z), &batch.labels);
        let g = grad(&lb.sum(), &[&z], true).remove(0).mask_mul(&mask);
        let gnorm = g.row_l2_norm();
        let rnorm = rv.row_l2_norm();
        let total = lb.add(&gnorm).add(&rnorm.scale(cfg.r_norm_weight)).sum();
        if !total.item().is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "robust-perturbation objective is not finite".into(),
            });
        }
        last = (
            lb.value().data().to_vec(),
            gnorm.value().data().to_vec(),
            rnorm.value().data().to_vec(),
        );
        if step == cfg.steps {
            break;
        }
        let dr = grad(&total, &[&rv], false).remove(0);
        for i in 0..r.numel() {
            let xi = x.data()[i];
            let next = (xi + r.data()[i] - cfg.lr * dr.value().data()[i]).clamp(0.0, 1.0);
            r.data_mut()[i] = next - xi;
        }
    }
    Ok(RobustPerturbations {
        r,
        ids: batch.ids.clone(),
        final_base_loss: last.0,
        final_gnr_norm: last.1,
        final_r_norm: last.2,
    })
}

/// One class-wise robust perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPerturbation {
    pub class: usize,
    /// `[C, H, W]`
    pub r: Tensor,
    pub param_version: u64,
    pub trace: Vec<f64>,
}

/// `CRP` for every class, with the provenance needed to detect staleness.
#[derive(Clone, Debug, PartialEq)]
pub struct CrpSet {
    pub perturbations: BTreeMap<usize, ClassPerturbation>,
    pub config_hash: String,
    pub samples_per_class: usize,
}

impl CrpSet {
    pub fn get(&self, class: usize) -> Result<&ClassPerturbation> {
        self.perturbations
            .get(&class)
            .ok_or_else(|| Error::contract(format!("no class perturbation for class {class}")))
    }

    pub fn param_version(&self) -> Option<u64> {
        self.perturbations.values().next().map(|p| p.param_version)
    }
}

/// Adds `r^{y_i}` to every image and clips to `[0, 1]`.
pub fn apply_crp(batch: &ImageBatch, crps: &CrpSet) -> Result<ImageBatch> {
    let row = batch.pixels.row_len();
    let mut out = batch.pixels.clone();
    for (i, &y) in batch.labels.iter().enumerate() {
        let p = crps.get(y)?;
        if p.r.numel() != row {
            return Err(Error::shape(format!(
                "class perturbation {:?} does not fit images of {} values",
                p.r.shape(),
                row
            )));
        }
        for (o, d) in out.row_mut(i).iter_mut().zip(p.r.data()) {
            *o = (*o + d).clamp(0.0, 1.0);
        }
    }
    Ok(batch.with_pixels(out))
}

/// Class-wise embedding optimization: minimizes
/// `mean_i [L_base(f(x_i + r^k), k) + ‖G_nr,i‖]` over a shared `r^k`,
/// drawing a minibatch from a fixed class subset each step.
pub fn ceo_optimize_crp(
    model: &SplitClassifier,
    subset: &ImageBatch,
    class: usize,
    masks: &MaskSet,
    cfg: &PerturbOptConfig,
) -> Result<ClassPerturbation> {
    cfg.validate()?;
    if subset.is_empty() {
        return Err(Error::contract(format!("class {class} has no examples")));
    }
    if subset.labels.iter().any(|&l| l != class) {
        return Err(Error::contract("class subset contains other labels"));
    }
    model.check_input(&subset.pixels)?;
    let i_nr_all = masks.nonrobust_matrix(&subset.ids)?;
    let bound = model.bind(false);
    let shape = model.input_shape();
    let mut r = Tensor::zeros(&shape);
    let bs = if cfg.batch_size == 0 {
        subset.len()
    } else {
        cfg.batch_size.min(subset.len())
    };
    let mut rg = rng(derive_seed(cfg.seed, &format!("ceo-{class}")));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample(&mut rg, subset.len(), bs).into_vec();
        let x = subset.pixels.select_rows(&idx);
        let i_nr = i_nr_all.select_rows(&idx);
        let y = vec![class; bs];
        let rv = Var::param(r.clone());
        let mut full = vec![bs];
        full.extend_from_slice(&shape);
        let x_aug = Var::constant(x)
            .add(&rv.reshape(&[1, shape[0], shape[1], shape[2]]).broadcast(&full))
            .clamp(0.0, 1.0);
        let z = bound.forward_to_tap(&x_aug);
        let mask = expand_channel_mask(&i_nr, z.shape())?;
        let lb = cfg.loss.per_sample(&bound.forward_from_tap(&z), &y);
        let g = grad(&lb.sum(), &[&z], true).remove(0).mask_mul(&mask);
        let objective = lb.add(&g.row_l2_norm()).mean();
        let value = objective.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("class {class} objective is {value}"),
            });
        }
        trace.push(value);
        let dr = grad(&objective, &[&rv], false).remove(0);
        for (ri, gi) in r.data_mut().iter_mut().zip(dr.value().data()) {
            *ri = (*ri - cfg.lr * gi).clamp(-1.0, 1.0);
        }
    }
    Ok(ClassPerturbation {
        class,
        r,
        param_version: model.param_version(),
        trace,
    })
}

/// Runs CEO for every class of `ds`. `masks` must cover each class subset.
pub fn ceo_all_classes(
    model: &SplitClassifier,
    subsets: &[ImageBatch],
    masks: &MaskSet,
    cfg: &PerturbOptConfig,
) -> Result<CrpSet> {
    let mut perturbations = BTreeMap::new();
    for (k, subset) in subsets.iter().enumerate() {
        perturbations.insert(k, ceo_optimize_crp(model, subset, k, masks, cfg)?);
    }
    Ok(CrpSet {
        perturbations,
        config_hash: config_hash(cfg),
        samples_per_class: cfg.samples_per_class,
    })
}

/// Fixed class subsets of size `samples_per_class` (or the whole class).
pub fn class_subsets(ds: &Dataset, num_classes: usize, samples_per_class: usize, seed: u64) -> Result<Vec<ImageBatch>> {
    (0..num_classes)
        .map(|k| {
            let avail = ds.class_positions(k).len();
            let n = if samples_per_class == 0 { avail } else { samples_per_class.min(avail) };
            crate::data::sample_class_subset(ds, k, n, derive_seed(seed, &format!("subset-{k}")))
        })
        .collect()
}

fn config_hash(cfg: &PerturbOptConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

// ---- archive ----

const CRP_FORMAT: &str = "robust-proxy/class-perturbations";
const CRP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CrpRecord {
    class: usize,
    shape: Vec<usize>,
    /// base64 of little-endian f64 values
    data: String,
    param_version: u64,
}

#[derive(Serialize, Deserialize)]
struct CrpArchive {
    format: String,
    version: u32,
    config_hash: String,
    samples_per_class: usize,
    records: Vec<CrpRecord>,
}

pub(crate) fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format("payload is not a whole number of f64 values"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn save_crps(set: &CrpSet, path: &Path) -> Result<()> {
    let archive = CrpArchive {
        format: CRP_FORMAT.into(),
        version: CRP_VERSION,
        config_hash: set.config_hash.clone(),
        samples_per_class: set.samples_per_class,
        records: set
            .perturbations
            .values()
            .map(|p| CrpRecord {
                class: p.class,
                shape: p.r.shape().to_vec(),
                data: encode_f64(p.r.data()),
                param_version: p.param_version,
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec_pretty(&archive)?)?;
    Ok(())
}

pub fn load_crps(path: &Path) -> Result<CrpSet> {
    let archive: CrpArchive = serde_json::from_slice(&fs::read(path)?)?;
    if archive.format != CRP_FORMAT || archive.version != CRP_VERSION {
        return Err(Error::format(format!(
            "unsupported perturbation archive {} v{}",
            archive.format, archive.version
        )));
    }
    let mut perturbations = BTreeMap::new();
    for rec in archive.records {
        let r = Tensor::new(rec.shape, decode_f64(&rec.data)?)?;
        perturbations.insert(
            rec.class,
            ClassPerturbation {
                class: rec.class,
                r,
                param_version: rec.param_version,
                trace: Vec::new(),
            },
        );
    }
    Ok(CrpSet {
        perturbations,
        config_hash: archive.config_hash,
        samples_per_class: archive.samples_per_class,
    })
}
