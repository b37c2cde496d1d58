//! Adversarial training baselines and proxy fine-tuning.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::attack::{batch_rng, evaluate, pgd, projected_ascent, AttackConfig, AttackKind};
use crate::autograd::{grad, Var};
use crate::data::{Dataset, ImageBatch};
use crate::distill::{distill_masks, estimate_channel_profile, ChannelProfile, DistillConfig, MaskSet};
use crate::error::{Error, Result};
use crate::model::{cross_entropy_per_sample, runner_up, Bound, SplitClassifier};
use crate::perturb::{ceo_all_classes, class_subsets, CrpSet, PerturbOptConfig};
use crate::proxy::{distance_evaluations, proxy_loss, refresh_bank_of_kind, ProxyBank, ProxyKind};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Adversarial-training loss family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase", deny_unknown_fields)]
pub enum ATMethod {
    Madry,
    Trades { beta: f64 },
    Mart { lambda: f64 },
}

impl ATMethod {
    pub fn trades() -> Self {
        ATMethod::Trades { beta: 6.0 }
    }

    pub fn mart() -> Self {
        ATMethod::Mart { lambda: 5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ATMethod::Trades { beta } if !(beta >= 0.0) => Err(Error::contract("trades beta must be non-negative")),
            ATMethod::Mart { lambda } if !(lambda >= 0.0) => Err(Error::contract("mart lambda must be non-negative")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ATMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ATMethod::Madry => write!(f, "madry"),
            ATMethod::Trades { beta } => write!(f, "trades(beta={beta})"),
            ATMethod::Mart { lambda } => write!(f, "mart(lambda={lambda})"),
        }
    }
}

impl FromStr for ATMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "madry" | "pgd" => Ok(ATMethod::Madry),
            "trades" => Ok(ATMethod::trades()),
            "mart" => Ok(ATMethod::mart()),
            other => Err(Error::contract(format!(
                "unknown adversarial-training variant `{other}` (expected madry, trades or mart)"
            ))),
        }
    }
}

/// Training objective of [`pretrain`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Standard,
    Adversarial(ATMethod),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Inner maximization.
    pub attack: AttackConfig,
    /// Proxy margin `m`.
    pub margin: f64,
    /// Proxy refresh period `T` in epochs.
    pub refresh_period: usize,
    pub proxy_weight: f64,
    /// Adds the proxy loss on clean features as well.
    pub clean_proxy_term: bool,
    /// Evaluate every this many epochs (0: after the last epoch only).
    pub eval_every: usize,
    pub eval_examples: usize,
    pub eval_attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            attack: AttackConfig {
                step_size: 2.0 / 255.0,
                ..AttackConfig::linf(8.0 / 255.0, 10)
            },
            margin: 1.0,
            refresh_period: 5,
            proxy_weight: 1.0,
            clean_proxy_term: false,
            eval_every: 0,
            eval_examples: 200,
            eval_attack: AttackConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::contract("proxy margin must be non-negative"));
        }
        if self.refresh_period == 0 {
            return Err(Error::contract("refresh period must be at least one epoch"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + (PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &SplitClassifier, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Tensor>) -> Result<()> {
        if v.len() != self.velocity.len() || v.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("optimizer state does not match the model parameters"));
        }
        self.velocity = v;
        Ok(())
    }

    pub fn step(&mut self, model: &mut SplitClassifier, grads: &[Var], lr: f64) {
        let (mom, wd) = (self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        model.update_params(|i, p| {
            let g = grads[i].value().data();
            let v = vel[i].data_mut();
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mom * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        });
    }
}

/// `KL(p_a ‖ p_b)` per row, from logits.
pub fn kl_rows(logits_a: &Var, logits_b: &Var) -> Var {
    let la = logits_a.log_softmax_rows();
    let lb = logits_b.log_softmax_rows();
    let n = logits_a.shape()[0];
    la.exp().mul(&la.sub(&lb)).sum_to(&[n, 1]).reshape(&[n])
}

/// The adversarial-training loss and the features it was computed from.
pub struct AtLoss {
    pub loss: Var,
    pub adversarial: Tensor,
    /// Tap features of the adversarial batch.
    pub adv_features: Var,
    /// Tap features of the clean batch, when the method evaluates them.
    pub clean_features: Option<Var>,
}

/// Inner maximization for `method`: PGD on the cross-entropy, or on
/// `KL(p_adv ‖ p_nat)` for TRADES.
pub fn inner_maximize(method: &ATMethod, model: &SplitClassifier, batch: &ImageBatch, cfg: &AttackConfig) -> Result<Tensor> {
    match method {
        ATMethod::Madry | ATMethod::Mart { .. } => Ok(pgd(model, batch, cfg)?.adversarial.pixels),
        ATMethod::Trades { .. } => {
            let bound = model.bind(false);
            let nat = Var::constant(model.forward(&batch.pixels)?);
            projected_ascent(&batch.pixels, cfg, &mut batch_rng(cfg, batch, "trades"), |v| {
                Ok(kl_rows(&bound.forward(v), &nat).sum())
            })
        }
    }
}

/// Adversarial-training loss at `bound`'s parameters.
///
/// * madry: `CE(f(x+δ*), y)`
/// * trades: `CE(f(x), y) + β·KL(f(x+δ*) ‖ f(x))`
/// * mart: `BCE(f(x+δ*), y) + λ·(1 − f_y(x))·KL(f(x+δ*) ‖ f(x))`
///
/// where `BCE = CE − log(1 − max_{k≠y} p_k)`. All terms are batch means.
pub fn at_loss(method: &ATMethod, bound: &Bound, batch: &ImageBatch, attack: &AttackConfig) -> Result<AtLoss> {
    method.validate()?;
    let adversarial = inner_maximize(method, bound.model(), batch, attack)?;
    at_loss_at(method, bound, batch, adversarial)
}

/// [`at_loss`] with a given adversarial batch.
pub fn at_loss_at(method: &ATMethod, bound: &Bound, batch: &ImageBatch, adversarial: Tensor) -> Result<AtLoss> {
    let y = &batch.labels;
    let za = bound.forward_to_tap(&Var::constant(adversarial.clone()));
    let la = bound.forward_from_tap(&za);
    let (loss, clean_features) = match *method {
        ATMethod::Madry => (cross_entropy_per_sample(&la, y).mean(), None),
        ATMethod::Trades { beta } => {
            let zn = bound.forward_to_tap(&Var::constant(batch.pixels.clone()));
            let ln = bound.forward_from_tap(&zn);
            let l = cross_entropy_per_sample(&ln, y)
                .mean()
                .add(&kl_rows(&la, &ln).mean().scale(beta));
            (l, Some(zn))
        }
        ATMethod::Mart { lambda } => {
            let zn = bound.forward_to_tap(&Var::constant(batch.pixels.clone()));
            let ln = bound.forward_from_tap(&zn);
            let pa = la.softmax_rows();
            let other = runner_up(pa.value(), y);
            let margin_term = pa.gather(&other).neg().add_scalar(1.0 + 1e-12).ln().neg();
            let bce = cross_entropy_per_sample(&la, y).add(&margin_term);
            let weight = ln.softmax_rows().gather(y).neg().add_scalar(1.0);
            let l = bce.mean().add(&kl_rows(&la, &ln).mul(&weight).mean().scale(lambda));
            (l, Some(zn))
        }
    };
    Ok(AtLoss {
        loss,
        adversarial,
        adv_features: za,
        clean_features,
    })
}

/// One row of training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub proxy_loss: Option<f64>,
    pub refreshed: bool,
    pub param_version: u64,
    pub distance_evaluations: u64,
    pub clean_accuracy: Option<f64>,
    pub pgd_accuracy: Option<f64>,
}

fn evaluate_pair(model: &SplitClassifier, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Option<f64>, Option<f64>)> {
    let Some(ds) = eval else { return Ok((None, None)) };
    let ds = if cfg.eval_examples > 0 && cfg.eval_examples < ds.len() {
        ds.take(cfg.eval_examples)?
    } else {
        ds.clone()
    };
    let clean = evaluate(model, &ds, &AttackKind::Clean, 256)?.accuracy;
    let robust = evaluate(model, &ds, &AttackKind::Pgd(cfg.eval_attack.clone()), 128)?.accuracy;
    Ok((Some(clean), Some(robust)))
}

fn should_eval(epoch: usize, cfg: &TrainConfig) -> bool {
    epoch + 1 == cfg.epochs || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)
}

fn check_finite(v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("training loss is {v}"),
        })
    }
}

/// Standard or adversarial training from the model's current parameters.
pub fn pretrain(
    mut model: SplitClassifier,
    train: &Dataset,
    eval: Option<&Dataset>,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<(SplitClassifier, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = cfg.lr;
        for (bi, batch) in train.epoch_batches(cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            lr = cfg.lr_at(step, total);
            let bound = model.bind(true);
            let loss = match objective {
                Objective::Standard => cross_entropy_per_sample(&bound.forward(&Var::constant(batch.pixels.clone())), &batch.labels).mean(),
                Objective::Adversarial(m) => {
                    let atk = cfg
                        .attack
                        .clone()
                        .with_seed(derive_seed(cfg.seed, &format!("attack-{epoch}-{bi}")));
                    at_loss(m, &bound, batch, &atk)?.loss
                }
            };
            let v = loss.item();
            check_finite(v, step)?;
            sum += v * batch.len() as f64;
            let params: Vec<&Var> = bound.params().iter().collect();
            let grads = grad(&loss, &params, false);
            drop(bound);
            opt.step(&mut model, &grads, lr);
            step += 1;
        }
        let (clean, robust) = if should_eval(epoch, cfg) {
            evaluate_pair(&model, eval, cfg)?
        } else {
            (None, None)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: sum / train.len() as f64,
            proxy_loss: None,
            refreshed: false,
            param_version: model.param_version(),
            distance_evaluations: 0,
            clean_accuracy: clean,
            pgd_accuracy: robust,
        };
        info!("pretrain epoch {epoch}: loss {:.4} clean {clean:?} pgd {robust:?}", rec.train_loss);
        history.push(rec);
    }
    Ok((model, history))
}

/// Settings for the refresh step of fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshConfig {
    pub distill: DistillConfig,
    pub ceo: PerturbOptConfig,
    /// Use one majority-vote mask per class instead of per-image masks.
    pub class_majority_masks: bool,
    /// Training images used for the channel profile (0: all).
    pub profile_examples: usize,
    pub proxy_kind: ProxyKind,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        Self {
            distill: DistillConfig::default(),
            ceo: PerturbOptConfig::ceo_default(),
            class_majority_masks: false,
            profile_examples: 1000,
            proxy_kind: ProxyKind::Robust,
        }
    }
}

/// Artifacts of one refresh.
#[derive(Clone, Debug)]
pub struct Refresh {
    pub masks: MaskSet,
    pub crps: CrpSet,
    pub bank: ProxyBank,
}

/// Profile, class subsets and their masks, the first half of a refresh.
#[derive(Clone, Debug)]
pub struct DistilledSubsets {
    pub profile: ChannelProfile,
    pub subsets: Vec<ImageBatch>,
    pub masks: MaskSet,
}

/// Re-estimates the channel profile and distills per-image masks over fixed
/// class subsets of `train`.
pub fn refresh_masks(
    model: &SplitClassifier,
    train: &Dataset,
    cfg: &RefreshConfig,
    epoch: usize,
    seed: u64,
) -> Result<DistilledSubsets> {
    let reference = if cfg.profile_examples > 0 && cfg.profile_examples < train.len() {
        train.take(cfg.profile_examples)?.all()
    } else {
        train.all()
    };
    let profile = estimate_channel_profile(model, &[reference])?;
    let subsets = class_subsets(train, model.num_classes(), cfg.ceo.samples_per_class, seed)?;
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = derive_seed(seed, &format!("distill-{epoch}"));
    let mut masks: Option<MaskSet> = None;
    for s in &subsets {
        let mut m = distill_masks(model, s, &profile, &dcfg)?;
        if cfg.class_majority_masks {
            m = MaskSet::uniform(&m.ids, m.majority()?, m.param_version);
        }
        match masks.as_mut() {
            Some(all) => all.extend(m),
            None => masks = Some(m),
        }
    }
    let masks = masks.ok_or_else(|| Error::contract("dataset has no classes"))?;
    Ok(DistilledSubsets {
        profile,
        subsets,
        masks,
    })
}

/// CEO over the distilled class subsets, the second half of a refresh.
pub fn refresh_crps(
    model: &SplitClassifier,
    distilled: &DistilledSubsets,
    cfg: &RefreshConfig,
    epoch: usize,
    seed: u64,
) -> Result<CrpSet> {
    let mut ccfg = cfg.ceo.clone();
    ccfg.seed = derive_seed(seed, &format!("ceo-{epoch}"));
    ceo_all_classes(model, &distilled.subsets, &distilled.masks, &ccfg)
}

/// Re-estimates the channel profile, distills per-image masks over fixed
/// class subsets, optimizes CRPs and rebuilds the proxy bank, all on the
/// frozen current model.
pub fn refresh(
    model: &SplitClassifier,
    train: &Dataset,
    cfg: &RefreshConfig,
    epoch: usize,
    refresh_period: usize,
    seed: u64,
) -> Result<Refresh> {
    let distilled = refresh_masks(model, train, cfg, epoch, seed)?;
    let crps = refresh_crps(model, &distilled, cfg, epoch, seed)?;
    let bank = refresh_bank_of_kind(model, train, Some(&crps), epoch, seed, refresh_period, cfg.proxy_kind)?;
    info!(
        "refresh at epoch {epoch}: mean robust channels {:.2}",
        distilled.masks.mean_robust_count()
    );
    Ok(Refresh {
        masks: distilled.masks,
        crps,
        bank,
    })
}

/// Seed that [`finetune_with_proxy`] passes to [`refresh`].
pub fn refresh_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, "refresh")
}

/// Mutable state of the fine-tuning loop.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub param_version: u64,
    pub bank: Option<ProxyBank>,
    pub crps: Option<CrpSet>,
    pub history: Vec<EpochRecord>,
}

pub struct FinetuneOutcome {
    pub model: SplitClassifier,
    pub state: TrainState,
    pub last_refresh: Option<Refresh>,
}

/// `L_total = L_AT + w·L_proxy` on a batch, with the proxy term taken on
/// the adversarial batch's pooled tap features.
pub fn total_loss(
    method: &ATMethod,
    bound: &Bound,
    batch: &ImageBatch,
    adversarial: Tensor,
    bank: &ProxyBank,
    cfg: &TrainConfig,
) -> Result<(Var, Var, Var)> {
    let at = at_loss_at(method, bound, batch, adversarial)?;
    let mut lp = proxy_loss(&bound.pool_tap(&at.adv_features), &batch.labels, bank, cfg.margin)?;
    if cfg.clean_proxy_term {
        let zn = match at.clean_features {
            Some(z) => z,
            None => bound.forward_to_tap(&Var::constant(batch.pixels.clone())),
        };
        lp = lp.add(&proxy_loss(&bound.pool_tap(&zn), &batch.labels, bank, cfg.margin)?);
    }
    let total = at.loss.add(&lp.scale(cfg.proxy_weight));
    Ok((total, at.loss, lp))
}

/// Fine-tunes an adversarially trained model with the proxy loss. CRPs and
/// proxies are rebuilt at epochs `0, T, 2T, …`; no perturbation is added
/// at inference.
pub fn finetune_with_proxy(
    model: SplitClassifier,
    train: &Dataset,
    eval: Option<&Dataset>,
    method: &ATMethod,
    cfg: &TrainConfig,
    refresh_cfg: &RefreshConfig,
) -> Result<FinetuneOutcome> {
    finetune_from(model, train, eval, method, cfg, refresh_cfg, None, None)
}

/// Where a resumed fine-tuning run picks up.
pub struct Resume {
    pub start_epoch: usize,
    pub bank: Option<ProxyBank>,
    pub crps: Option<CrpSet>,
    pub velocity: Option<Vec<Tensor>>,
    pub history: Vec<EpochRecord>,
    /// The bank was built on the parameters being resumed, so a refresh due
    /// at `start_epoch` is skipped.
    pub bank_fresh: bool,
}

/// Called after every epoch with the model, state and optimizer.
pub type EpochHook<'a> = dyn FnMut(&SplitClassifier, &TrainState, &Sgd) -> Result<()> + 'a;

/// [`finetune_with_proxy`] with resumption and a per-epoch hook.
///
/// A resumed run reproduces the uninterrupted one when `resume` carries the
/// bank, CRPs and optimizer velocity saved at the end of the previous epoch.
pub fn finetune_from(
    mut model: SplitClassifier,
    train: &Dataset,
    eval: Option<&Dataset>,
    method: &ATMethod,
    cfg: &TrainConfig,
    refresh_cfg: &RefreshConfig,
    resume: Option<Resume>,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    method.validate()?;
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let resume = resume.unwrap_or(Resume {
        start_epoch: 0,
        bank: None,
        crps: None,
        velocity: None,
        history: Vec::new(),
        bank_fresh: false,
    });
    if let Some(v) = resume.velocity {
        opt.set_velocity(v)?;
    }
    let start_epoch = resume.start_epoch;
    let bank_fresh = resume.bank_fresh && resume.bank.is_some();
    let mut state = TrainState {
        epoch: start_epoch,
        param_version: model.param_version(),
        bank: resume.bank,
        crps: resume.crps,
        history: resume.history,
    };
    let mut hook = hook;
    let mut last_refresh = None;
    for epoch in start_epoch..cfg.epochs {
        let skip = bank_fresh && epoch == start_epoch;
        let rebuild = state.bank.is_none() || (ProxyBank::due(epoch, cfg.refresh_period) && !skip);
        let refreshed = rebuild || skip;
        if rebuild {
            let r = refresh(&model, train, refresh_cfg, epoch, cfg.refresh_period, refresh_seed(cfg))?;
            state.bank = Some(r.bank.clone());
            state.crps = Some(r.crps.clone());
            last_refresh = Some(r);
        }
        let bank = state.bank.as_ref().expect("bank built above");
        let evals_before = distance_evaluations();
        let (mut sum, mut psum) = (0.0, 0.0);
        let mut lr = cfg.lr;
        for (bi, batch) in train.epoch_batches(cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let step = epoch * steps_per_epoch + bi;
            lr = cfg.lr_at(step, total);
            let atk = cfg
                .attack
                .clone()
                .with_seed(derive_seed(cfg.seed, &format!("attack-{epoch}-{bi}")));
            let adversarial = inner_maximize(method, &model, batch, &atk)?;
            let bound = model.bind(true);
            let (loss, _, lp) = total_loss(method, &bound, batch, adversarial, bank, cfg)?;
            let v = loss.item();
            check_finite(v, step)?;
            sum += v * batch.len() as f64;
            psum += lp.item() * batch.len() as f64;
            let params: Vec<&Var> = bound.params().iter().collect();
            let grads = grad(&loss, &params, false);
            drop(bound);
            opt.step(&mut model, &grads, lr);
        }
        let (clean, robust) = if should_eval(epoch, cfg) {
            evaluate_pair(&model, eval, cfg)?
        } else {
            (None, None)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: sum / train.len() as f64,
            proxy_loss: Some(psum / train.len() as f64),
            refreshed,
            param_version: model.param_version(),
            distance_evaluations: distance_evaluations() - evals_before,
            clean_accuracy: clean,
            pgd_accuracy: robust,
        };
        info!(
            "finetune epoch {epoch}: loss {:.4} proxy {:.4} clean {clean:?} pgd {robust:?}",
            rec.train_loss,
            rec.proxy_loss.unwrap_or(f64::NAN)
        );
        state.history.push(rec);
        state.epoch = epoch + 1;
        state.param_version = model.param_version();
        if let Some(h) = hook.as_mut() {
            h(&model, &state, &opt)?;
        }
    }
    Ok(FinetuneOutcome {
        model,
        state,
        last_refresh,
    })
}

/// Mean proxy loss of `ds` under a fixed bank, on PGD examples crafted
/// with `attack` (or on clean inputs when `attack` is `None`).
pub fn evaluate_proxy_loss(
    model: &SplitClassifier,
    ds: &Dataset,
    bank: &ProxyBank,
    margin: f64,
    attack: Option<&AttackConfig>,
) -> Result<f64> {
    let mut sum = 0.0;
    for b in ds.sequential_batches(128) {
        let px = match attack {
            Some(cfg) => pgd(model, &b, cfg)?.adversarial.pixels,
            None => b.pixels.clone(),
        };
        let bound = model.bind(false);
        let z = bound.forward_to_tap(&Var::constant(px));
        sum += proxy_loss(&bound.pool_tap(&z), &b.labels, bank, margin)?.item() * b.len() as f64;
    }
    Ok(sum / ds.len().max(1) as f64)
}
