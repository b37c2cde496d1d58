//! White-box and transfer attacks.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::data::{Dataset, ImageBatch};
use crate::distill::MaskSet;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, cross_entropy_per_sample, BaseLoss, Bound, SplitClassifier};
use crate::perturb::nonrobust_gradient_var;
use crate::rng::{derive_seed, rng, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Threat model and step schedule of an iterative attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::linf(8.0 / 255.0, 20)
    }
}

impl AttackConfig {
    /// L∞ PGD with step `ε/10` and a random start.
    pub fn linf(epsilon: f64, steps: usize) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            steps,
            step_size: epsilon / 10.0,
            random_start: true,
            seed: 0,
        }
    }

    /// L2 PGD with step `ε/10` and a random start.
    pub fn l2(epsilon: f64, steps: usize) -> Self {
        Self {
            norm: Norm::L2,
            ..Self::linf(epsilon, steps)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::contract("attack radius and step size must be non-negative"));
        }
        Ok(())
    }
}

/// Attack output for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub adversarial: ImageBatch,
    /// Model prediction on each adversarial image differs from its label.
    pub success: Vec<bool>,
    /// Perturbation size under the attack norm.
    pub norms: Vec<f64>,
}

impl AdvBatch {
    /// Accuracy of the attacked model on the adversarial images.
    pub fn robust_accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| !s).count() as f64 / self.success.len() as f64
    }
}

fn perturbation_norms(x: &Tensor, adv: &Tensor, norm: Norm) -> Vec<f64> {
    (0..x.batch_len())
        .map(|i| {
            let d = x.row(i).iter().zip(adv.row(i)).map(|(a, b)| b - a);
            match norm {
                Norm::Linf => d.fold(0.0, |m, v| f64::max(m, v.abs())),
                Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .collect()
}

fn project(x: &Tensor, adv: &mut Tensor, norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => {
            for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
                *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            for i in 0..x.batch_len() {
                let n = x.row(i).iter().zip(adv.row(i)).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
                let f = if n > eps { eps / n } else { 1.0 };
                let xr = x.row(i).to_vec();
                for (a, o) in adv.row_mut(i).iter_mut().zip(xr) {
                    *a = (o + (*a - o) * f).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn random_start(x: &Tensor, norm: Norm, eps: f64, r: &mut Rng) -> Tensor {
    let mut adv = x.clone();
    match norm {
        Norm::Linf => {
            for v in adv.data_mut() {
                *v += r.random_range(-eps..=eps);
            }
        }
        Norm::L2 => {
            let row = x.row_len();
            for i in 0..x.batch_len() {
                let dir: Vec<f64> = (0..row).map(|_| StandardNormal.sample(r)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let radius = eps * r.random::<f64>();
                for (a, d) in adv.row_mut(i).iter_mut().zip(dir) {
                    *a += radius * d / n;
                }
            }
        }
    }
    project(x, &mut adv, norm, eps);
    adv
}

/// Projected ascent on a per-batch scalar objective built by `objective`.
pub(crate) fn projected_ascent(
    x: &Tensor,
    cfg: &AttackConfig,
    r: &mut Rng,
    objective: impl FnMut(&Var) -> Result<Var>,
) -> Result<Tensor> {
    ascend(x, cfg, r, objective, None)
}

/// [`projected_ascent`] that keeps, per image, the first iterate `model`
/// misclassifies, so later steps cannot undo a success.
fn tracked_ascent(
    model: &SplitClassifier,
    batch: &ImageBatch,
    cfg: &AttackConfig,
    r: &mut Rng,
    objective: impl FnMut(&Var) -> Result<Var>,
) -> Result<Tensor> {
    ascend(&batch.pixels, cfg, r, objective, Some((model, &batch.labels)))
}

fn ascend(
    x: &Tensor,
    cfg: &AttackConfig,
    r: &mut Rng,
    mut objective: impl FnMut(&Var) -> Result<Var>,
    track: Option<(&SplitClassifier, &[usize])>,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut adv = if cfg.random_start && cfg.epsilon > 0.0 {
        random_start(x, cfg.norm, cfg.epsilon, r)
    } else {
        x.clone()
    };
    let n = x.batch_len();
    let mut best = adv.clone();
    let mut fooled = vec![false; n];
    let record = |adv: &Tensor, best: &mut Tensor, fooled: &mut [bool]| -> Result<()> {
        if let Some((model, y)) = track {
            let pred = model.predict(adv)?;
            for i in 0..n {
                if !fooled[i] {
                    best.row_mut(i).copy_from_slice(adv.row(i));
                    fooled[i] = pred[i] != y[i];
                }
            }
        }
        Ok(())
    };
    record(&adv, &mut best, &mut fooled)?;
    for _ in 0..cfg.steps {
        if track.is_some() && fooled.iter().all(|&f| f) {
            break;
        }
        let v = Var::param(adv.clone());
        let obj = objective(&v)?;
        let g = grad(&obj, &[&v], false).remove(0);
        let g = g.value();
        match cfg.norm {
            Norm::Linf => {
                for (a, gi) in adv.data_mut().iter_mut().zip(g.data()) {
                    *a += cfg.step_size * gi.signum() * (*gi != 0.0) as u8 as f64;
                }
            }
            Norm::L2 => {
                for i in 0..n {
                    let norm = g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for (a, gi) in adv.row_mut(i).iter_mut().zip(g.row(i)) {
                            *a += cfg.step_size * gi / norm;
                        }
                    }
                }
            }
        }
        project(x, &mut adv, cfg.norm, cfg.epsilon);
        record(&adv, &mut best, &mut fooled)?;
    }
    Ok(if track.is_some() { best } else { adv })
}

fn finish(model: &SplitClassifier, batch: &ImageBatch, adv: Tensor, norm: Norm) -> Result<AdvBatch> {
    let pred = model.predict(&adv)?;
    let norms = perturbation_norms(&batch.pixels, &adv, norm);
    Ok(AdvBatch {
        success: pred.iter().zip(&batch.labels).map(|(p, y)| p != y).collect(),
        adversarial: batch.with_pixels(adv),
        norms,
    })
}

pub(crate) fn batch_rng(cfg: &AttackConfig, batch: &ImageBatch, label: &str) -> Rng {
    let first = batch.ids.first().copied().unwrap_or(0);
    rng(derive_seed(cfg.seed, &format!("{label}-{first}-{}", batch.len())))
}

fn prepare(model: &SplitClassifier, batch: &ImageBatch) -> Result<()> {
    model.check_input(&batch.pixels)?;
    batch.validate(model.num_classes())
}

/// Single signed-gradient step of size ε on the cross-entropy.
pub fn fgsm(model: &SplitClassifier, batch: &ImageBatch, epsilon: f64) -> Result<AdvBatch> {
    prepare(model, batch)?;
    let cfg = AttackConfig {
        norm: Norm::Linf,
        epsilon,
        steps: 1,
        step_size: epsilon,
        random_start: false,
        seed: 0,
    };
    let bound = model.bind(false);
    let adv = projected_ascent(&batch.pixels, &cfg, &mut rng(0), |v| {
        Ok(cross_entropy_per_sample(&bound.forward(v), &batch.labels).sum())
    })?;
    finish(model, batch, adv, Norm::Linf)
}

/// Projected gradient ascent on the cross-entropy. An image counts as broken
/// if any iterate is misclassified.
pub fn pgd(model: &SplitClassifier, batch: &ImageBatch, cfg: &AttackConfig) -> Result<AdvBatch> {
    prepare(model, batch)?;
    let bound = model.bind(false);
    let adv = tracked_ascent(model, batch, cfg, &mut batch_rng(cfg, batch, "pgd"), |v| {
        Ok(cross_entropy_per_sample(&bound.forward(v), &batch.labels).sum())
    })?;
    finish(model, batch, adv, cfg.norm)
}

/// PGD on the logit margin `max_{i≠y} f_i − f_y` (no hinge).
pub fn cw_linf(model: &SplitClassifier, batch: &ImageBatch, cfg: &AttackConfig) -> Result<AdvBatch> {
    prepare(model, batch)?;
    let bound = model.bind(false);
    let margin = BaseLoss::margin(1.0);
    let adv = tracked_ascent(model, batch, cfg, &mut batch_rng(cfg, batch, "cw"), |v| {
        Ok(margin.per_sample(&bound.forward(v), &batch.labels).sum())
    })?;
    finish(model, batch, adv, cfg.norm)
}

/// Default radius of the adaptive attack.
pub const ADAPTIVE_EPSILON: f64 = 0.03;

/// Ascends `L_base + ‖G_nr‖ − ‖p‖`, i.e. minimizes the negated objective,
/// so the perturbation both breaks the prediction and re-opens the
/// non-robust gradient path.
pub fn adaptive_nonrobust_attack(
    model: &SplitClassifier,
    batch: &ImageBatch,
    masks: &MaskSet,
    loss: &BaseLoss,
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    prepare(model, batch)?;
    let i_nr = masks.nonrobust_matrix(&batch.ids)?;
    let bound = model.bind(false);
    let x = Var::constant(batch.pixels.clone());
    let adv = tracked_ascent(model, batch, cfg, &mut batch_rng(cfg, batch, "adaptive"), |v| {
        adaptive_objective(&bound, v, &x, &batch.labels, &i_nr, loss)
    })?;
    finish(model, batch, adv, cfg.norm)
}

fn adaptive_objective(bound: &Bound, v: &Var, x: &Var, y: &[usize], i_nr: &Tensor, loss: &BaseLoss) -> Result<Var> {
    let lb = loss.per_sample(&bound.forward(v), y);
    let g = nonrobust_gradient_var(bound, v, y, i_nr, loss, true)?;
    let p = v.sub(x).row_l2_norm();
    Ok(lb.add(&g.row_l2_norm()).sub(&p).sum())
}

/// Crafts PGD examples on `source` and scores them on `target`.
pub fn transfer_attack(
    source: &SplitClassifier,
    target: &SplitClassifier,
    batch: &ImageBatch,
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    if source.input_shape() != target.input_shape() {
        return Err(Error::shape(format!(
            "source expects {:?}, target {:?}",
            source.input_shape(),
            target.input_shape()
        )));
    }
    let crafted = pgd(source, batch, cfg)?;
    finish(target, batch, crafted.adversarial.pixels, cfg.norm)
}

/// Which attack to run when evaluating a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Clean,
    Fgsm { epsilon: f64 },
    Pgd(AttackConfig),
    CwLinf(AttackConfig),
}

impl AttackKind {
    pub fn name(&self) -> String {
        match self {
            AttackKind::Clean => "clean".into(),
            AttackKind::Fgsm { .. } => "fgsm".into(),
            AttackKind::Pgd(c) => format!("pgd{}-{:?}", c.steps, c.norm).to_lowercase(),
            AttackKind::CwLinf(c) => format!("cw{}", c.steps),
        }
    }

    pub fn run(&self, model: &SplitClassifier, batch: &ImageBatch) -> Result<Vec<bool>> {
        Ok(match self {
            AttackKind::Clean => {
                prepare(model, batch)?;
                let pred = model.predict(&batch.pixels)?;
                pred.iter().zip(&batch.labels).map(|(p, y)| p != y).collect()
            }
            AttackKind::Fgsm { epsilon } => fgsm(model, batch, *epsilon)?.success,
            AttackKind::Pgd(c) => pgd(model, batch, c)?.success,
            AttackKind::CwLinf(c) => cw_linf(model, batch, c)?.success,
        })
    }
}

/// Accuracy under an attack over a dataset, in chunks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub examples: usize,
    pub accuracy: f64,
}

pub fn evaluate(model: &SplitClassifier, ds: &Dataset, kind: &AttackKind, chunk: usize) -> Result<AttackResult> {
    let mut correct = 0usize;
    for b in ds.sequential_batches(chunk.max(1)) {
        correct += kind.run(model, &b)?.iter().filter(|&&s| !s).count();
    }
    Ok(AttackResult {
        attack: kind.name(),
        examples: ds.len(),
        accuracy: if ds.is_empty() { 0.0 } else { correct as f64 / ds.len() as f64 },
    })
}

/// Labels predicted at the given pixels, as a convenience for reports.
pub fn predictions(model: &SplitClassifier, pixels: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.forward(pixels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn setup(n: usize) -> (SplitClassifier, ImageBatch) {
        let arch = Architecture::with_widths([3, 8, 8], 3, [4, 4, 6, 6]);
        let m = SplitClassifier::new(arch, 9).unwrap();
        let mut r = rng(2);
        let px = Tensor::from_parts(vec![n, 3, 8, 8], (0..n * 192).map(|_| r.random::<f64>()).collect());
        let b = ImageBatch::new(px, (0..n).map(|i| i % 3).collect(), (0..n as u64).collect()).unwrap();
        (m, b)
    }

    #[test]
    fn zero_radius_is_identity() {
        let (m, b) = setup(4);
        for norm in [Norm::Linf, Norm::L2] {
            let cfg = AttackConfig {
                norm,
                epsilon: 0.0,
                ..AttackConfig::default()
            };
            let adv = pgd(&m, &b, &cfg).unwrap();
            assert_eq!(adv.adversarial.pixels, b.pixels);
        }
    }

    #[test]
    fn pgd_stays_in_ball_and_box() {
        let (m, b) = setup(4);
        let cfg = AttackConfig::linf(8.0 / 255.0, 5);
        let adv = pgd(&m, &b, &cfg).unwrap();
        assert!(adv.norms.iter().all(|&n| n <= cfg.epsilon + 1e-12));
        assert!(adv.adversarial.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let cfg = AttackConfig::l2(0.5, 5);
        let adv = pgd(&m, &b, &cfg).unwrap();
        assert!(adv.norms.iter().all(|&n| n <= 0.5 + 1e-9));
    }

    #[test]
    fn pgd_is_deterministic() {
        let (m, b) = setup(3);
        let cfg = AttackConfig::linf(0.03, 3).with_seed(4);
        assert_eq!(pgd(&m, &b, &cfg).unwrap(), pgd(&m, &b, &cfg).unwrap());
    }

    #[test]
    fn fgsm_and_transfer_shape_checks() {
        let (m, b) = setup(2);
        let adv = fgsm(&m, &b, 0.1).unwrap();
        assert!(adv.norms.iter().all(|&n| n <= 0.1 + 1e-12));
        let other = SplitClassifier::new(Architecture::with_widths([3, 16, 16], 3, [4, 4, 6, 6]), 1).unwrap();
        assert!(transfer_attack(&m, &other, &b, &AttackConfig::default()).is_err());
        let mut bad = b.clone();
        bad.labels[0] = 7;
        assert!(pgd(&m, &bad, &AttackConfig::default()).is_err());
    }
}
