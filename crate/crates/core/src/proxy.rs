//! Robust proxies and the pull/push proxy loss.
//!
//! A proxy for class `k` is the unit-normalized pooled tap feature (head
//! activation, then global average pool) of one class-`k` training image with the class perturbation
//! `r^k` added. During fine-tuning every pooled feature is pulled toward the
//! proxy of its own class and pushed from the proxies of the other classes.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{NoGradGuard, Var};
use crate::data::{Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::model::SplitClassifier;
use crate::perturb::{apply_crp, CrpSet};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

/// How proxies are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    /// One CRP-augmented image per class.
    #[default]
    Robust,
    /// One image per class, without CRP.
    Plain,
    /// Mean pooled feature of every CRP-augmented image of the class.
    ClassMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proxy {
    pub class_id: usize,
    pub vector: Vec<f64>,
    /// `None` for class-mean proxies.
    pub source_example_id: Option<u64>,
    /// Model parameter version the CRP was optimized against.
    pub crp_version: Option<u64>,
    pub epoch_built: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyBank {
    pub proxies: BTreeMap<usize, Proxy>,
    pub refresh_period: usize,
    pub built_at: u64,
    pub epoch: usize,
}

impl ProxyBank {
    pub fn num_classes(&self) -> usize {
        self.proxies.len()
    }

    /// Proxy vectors as rows of a `[K, C]` matrix, ordered by class id.
    pub fn matrix(&self) -> Tensor {
        let c = self.proxies.values().next().map(|p| p.vector.len()).unwrap_or(0);
        Tensor::from_parts(
            vec![self.proxies.len(), c],
            self.proxies.values().flat_map(|p| p.vector.iter().copied()).collect(),
        )
    }

    /// Whether a bank should be rebuilt at `epoch`.
    pub fn due(epoch: usize, refresh_period: usize) -> bool {
        refresh_period > 0 && epoch % refresh_period == 0
    }
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::contract("cannot normalize a zero feature vector"));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Pooled tap features `[n, C]` as the head sees them after its activation.
pub fn pooled_features(model: &SplitClassifier, pixels: &Tensor) -> Result<Tensor> {
    model.check_input(pixels)?;
    let _g = NoGradGuard::new();
    let b = model.bind(false);
    Ok(b.pool_tap(&b.forward_to_tap(&Var::constant(pixels.clone()))).value().clone())
}

/// Builds the class-`k` proxy from one seeded random class-`k` image.
pub fn build_proxy(model: &SplitClassifier, ds: &Dataset, crps: &CrpSet, k: usize, seed: u64) -> Result<Proxy> {
    build_proxy_of_kind(model, ds, Some(crps), k, seed, ProxyKind::Robust)
}

pub fn build_proxy_of_kind(
    model: &SplitClassifier,
    ds: &Dataset,
    crps: Option<&CrpSet>,
    k: usize,
    seed: u64,
    kind: ProxyKind,
) -> Result<Proxy> {
    let pos = ds.class_positions(k);
    if pos.is_empty() {
        return Err(Error::contract(format!("class {k} has no training examples")));
    }
    let needs_crp = kind != ProxyKind::Plain;
    let crp_version = match (needs_crp, crps) {
        (true, Some(c)) => Some(c.get(k)?.param_version),
        (true, None) => return Err(Error::contract(format!("no class perturbation for class {k}"))),
        (false, _) => None,
    };
    let (batch, source) = match kind {
        ProxyKind::ClassMean => (ds.batch(pos), None),
        _ => {
            let pick = pos[rng(derive_seed(seed, &format!("proxy-{k}"))).random_range(0..pos.len())];
            let b = ds.batch(&[pick]);
            let id = b.ids[0];
            (b, Some(id))
        }
    };
    let batch = match (needs_crp, crps) {
        (true, Some(c)) => apply_crp(&batch, c)?,
        _ => batch,
    };
    let feats = pooled_features(model, &batch.pixels)?;
    let c = feats.shape()[1];
    let mut mean = vec![0.0; c];
    for i in 0..feats.batch_len() {
        for (m, v) in mean.iter_mut().zip(feats.row(i)) {
            *m += v / feats.batch_len() as f64;
        }
    }
    Ok(Proxy {
        class_id: k,
        vector: unit(mean)?,
        source_example_id: source,
        crp_version,
        epoch_built: 0,
    })
}

/// One proxy per class.
pub fn refresh_bank(
    model: &SplitClassifier,
    ds: &Dataset,
    crps: &CrpSet,
    epoch: usize,
    seed: u64,
    refresh_period: usize,
) -> Result<ProxyBank> {
    refresh_bank_of_kind(model, ds, Some(crps), epoch, seed, refresh_period, ProxyKind::Robust)
}

pub fn refresh_bank_of_kind(
    model: &SplitClassifier,
    ds: &Dataset,
    crps: Option<&CrpSet>,
    epoch: usize,
    seed: u64,
    refresh_period: usize,
    kind: ProxyKind,
) -> Result<ProxyBank> {
    let classes = model.num_classes();
    if kind != ProxyKind::Plain {
        let missing: Vec<usize> = (0..classes)
            .filter(|k| crps.map_or(true, |c| !c.perturbations.contains_key(k)))
            .collect();
        if !missing.is_empty() {
            return Err(Error::contract(format!(
                "class perturbations missing for classes {missing:?}"
            )));
        }
    }
    let mut proxies = BTreeMap::new();
    for k in 0..classes {
        let mut p = build_proxy_of_kind(model, ds, crps, k, derive_seed(seed, &format!("epoch-{epoch}")), kind)?;
        p.epoch_built = epoch;
        proxies.insert(k, p);
    }
    Ok(ProxyBank {
        proxies,
        refresh_period,
        built_at: model.param_version(),
        epoch,
    })
}

/// `1 − a·b / (‖a‖‖b‖)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine distance of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Number of feature/proxy distances `proxy_loss` evaluates for a batch.
pub fn distance_evaluation_count(batch_size: usize, num_classes: usize) -> usize {
    batch_size * num_classes
}

thread_local! {
    static DISTANCE_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Running total of distances evaluated by [`proxy_loss`] on this thread.
pub fn distance_evaluations() -> u64 {
    DISTANCE_EVALUATIONS.with(|c| c.get())
}

pub fn reset_distance_evaluations() {
    DISTANCE_EVALUATIONS.with(|c| c.set(0));
}

/// Pull/push loss on pooled features `[n, C]`:
///
/// `(1/|P⁺|) Σ_{p∈P⁺} Σ_{z∈z⁺_p} (d(z,p) − m) − (1/|P|) Σ_{p∈P} Σ_{z∈z⁻_p} (d(z,p) + m)`
///
/// where `P⁺` holds the proxies of classes present in the batch. All
/// `n × |P|` distances come from one matrix product.
pub fn proxy_loss(features: &Var, labels: &[usize], bank: &ProxyBank, margin: f64) -> Result<Var> {
    let s = features.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!("pooled features must be [n, C], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::contract("proxy loss of an empty batch"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{n} features vs {} labels", labels.len())));
    }
    let classes: Vec<usize> = bank.proxies.keys().copied().collect();
    let col_of = |y: usize| classes.iter().position(|&k| k == y);
    let cols: Vec<usize> = labels
        .iter()
        .map(|&y| col_of(y).ok_or_else(|| Error::contract(format!("no proxy for class {y}"))))
        .collect::<Result<_>>()?;
    let k = classes.len();
    let proxies = bank.matrix();
    if proxies.shape()[1] != c {
        return Err(Error::shape(format!(
            "features have {c} channels, proxies {}",
            proxies.shape()[1]
        )));
    }
    // d = 1 − cos(z, p); proxies are already unit length.
    let norms = features.row_l2_norm().reshape(&[n, 1]).broadcast(&[n, k]);
    let dots = features.matmul(&Var::constant(proxies.transpose2()));
    let dist = dots.mul(&norms.safe_recip()).neg().add_scalar(1.0);
    DISTANCE_EVALUATIONS.with(|cnt| cnt.set(cnt.get() + (n * k) as u64));

    let present: std::collections::BTreeSet<usize> = cols.iter().copied().collect();
    let mut pull_w = vec![0.0; n * k];
    let mut push_w = vec![0.0; n * k];
    for (i, &col) in cols.iter().enumerate() {
        for j in 0..k {
            if j == col {
                pull_w[i * k + j] = 1.0 / present.len() as f64;
            } else {
                push_w[i * k + j] = 1.0 / k as f64;
            }
        }
    }
    let pull_w = Tensor::from_parts(vec![n, k], pull_w);
    let push_w = Tensor::from_parts(vec![n, k], push_w);
    let pull = dist.add_scalar(-margin).mask_mul(&pull_w).sum();
    let push = dist.add_scalar(margin).mask_mul(&push_w).sum();
    Ok(pull.sub(&push))
}

// ---- snapshot ----

const BANK_FORMAT: &str = "robust-proxy/proxy-bank";
const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    bank: ProxyBank,
}

pub fn save_bank(bank: &ProxyBank, path: &Path) -> Result<()> {
    let file = BankFile {
        format: BANK_FORMAT.into(),
        version: BANK_VERSION,
        bank: bank.clone(),
    };
    fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<ProxyBank> {
    let file: BankFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.format != BANK_FORMAT || file.version != BANK_VERSION {
        return Err(Error::format(format!(
            "unsupported proxy bank {} v{}",
            file.format, file.version
        )));
    }
    Ok(file.bank)
}

/// Pooled features of a batch with CRPs applied, for analysis.
pub fn pooled_with_crp(model: &SplitClassifier, batch: &ImageBatch, crps: Option<&CrpSet>) -> Result<Tensor> {
    match crps {
        Some(c) => pooled_features(model, &apply_crp(batch, c)?.pixels),
        None => pooled_features(model, &batch.pixels),
    }
}
