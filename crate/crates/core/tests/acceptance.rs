//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 10 read the artifacts of the desk experiment
//! (`configs/desk.toml`) for root seeds 0, 1 and 2. The runs go to a
//! temporary directory unless `ACCEPTANCE_RUN_DIR` names a persistent one,
//! in which case cached stages are reused.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use robust_proxy::attack::{adaptive_nonrobust_attack, cw_linf, fgsm, pgd, transfer_attack, AttackConfig, Norm};
use robust_proxy::distill::{
    distill_masks, estimate_channel_profile, ib_objective, kl_term, load_masks, split_feature, ChannelProfile,
    DistillConfig,
};
use robust_proxy::harness::{write_report, AttackRow, ExperimentConfig, MetricsReport, Pipeline, Stage};
use robust_proxy::model::{base_loss, BaseLoss};
use robust_proxy::perturb::{expand_channel_mask, nonrobust_gradient_norms, nonrobust_gradient_var, optimize_rp};
use robust_proxy::proxy::{
    distance_evaluation_count, distance_evaluations, proxy_loss, reset_distance_evaluations,
};
use robust_proxy::rng::rng;
use robust_proxy::train::{finetune_from, ATMethod, EpochHook, RefreshConfig, Sgd, TrainState};
use robust_proxy::{grad, SplitClassifier, Tensor, Var};

use common::*;

const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Desk {
    runs: Vec<(u64, Pipeline, MetricsReport)>,
    _tmp: Option<tempfile::TempDir>,
}

impl Desk {
    fn build() -> Result<Self, Box<dyn std::error::Error>> {
        let (root, tmp) = match std::env::var_os("ACCEPTANCE_RUN_DIR") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let mut runs = Vec::new();
        for seed in SEEDS {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.seed = seed;
            cfg.name = format!("desk-seed{seed}");
            cfg.output_dir = root.clone();
            let mut p = Pipeline::new(cfg, false)?;
            let t = Instant::now();
            p.run_all()?;
            let report = write_report(&p)?;
            println!("  desk run seed {seed}: {:.0}s ({})", t.elapsed().as_secs_f64(), p.run_dir().display());
            runs.push((seed, p, report));
        }
        Ok(Self { runs, _tmp: tmp })
    }

    fn primary(&self) -> &(u64, Pipeline, MetricsReport) {
        &self.runs[0]
    }
}

fn row<'a>(rows: &'a [AttackRow], model: &str, condition: &str, prefix: &str) -> Result<&'a AttackRow, String> {
    rows.iter()
        .find(|r| r.model == model && r.condition == condition && r.attack.starts_with(prefix))
        .ok_or_else(|| format!("no {model}/{condition}/{prefix}* row"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 1
fn split_and_masked_gradient_identity() -> Outcome {
    let m = toy(1);
    let x = uniform(&[4, 2, 6, 6], 0.0, 1.0, 2);
    let whole = m.forward(&x)?;
    let composed = m.forward_from_tap(&m.forward_to_tap(&x)?)?;
    let split_exact = whole == composed;

    let y = [0, 1, 2, 1];
    let i_nr = Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    let loss = BaseLoss { c: 1.0, confidence: Some(10.0) };
    let b = m.bind(false);
    let masked = nonrobust_gradient_var(&b, &Var::constant(x.clone()), &y, &i_nr, &loss, false)?;
    // backprop through z_nr + stop_grad(z_r): only non-robust channels carry gradient
    let z = m.forward_to_tap(&x)?;
    let mask = expand_channel_mask(&i_nr, z.shape())?;
    let zv = Var::param(z.clone());
    let robust_part = Tensor::new(z.shape().to_vec(), z.data().iter().zip(mask.data()).map(|(v, k)| v * (1.0 - k)).collect())?;
    let routed = zv.mask_mul(&mask).add(&Var::constant(robust_part));
    let l = loss.per_sample(&b.forward_from_tap(&routed), &y).sum();
    let path = grad(&l, &[&zv], false).remove(0);
    let err = masked
        .value()
        .data()
        .iter()
        .zip(path.value().data())
        .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    Ok((split_exact && err <= 1e-10, format!("split exact {split_exact}, masked-gradient max error {err:.2e} (tol 1e-10)")))
}

// 2
fn gradient_oracles() -> Outcome {
    let mut worst_first = 0.0f64;
    let mut worst_second = 0.0f64;

    let logits = Tensor::new(vec![3, 3], vec![0.2, 1.5, -0.7, 2.0, 0.1, 0.4, -1.0, 0.3, 0.9])?;
    let y = [0, 0, 1];
    let lv = Var::param(logits.clone());
    let auto = grad(&BaseLoss::hinge(2.0).loss(&lv, &y), &[&lv], false).remove(0);
    let fd = central_diff(&logits, 1e-6, |t| base_loss(t, &y, 2.0).unwrap());
    worst_first = worst_first.max(rel_err(auto.value().data(), &fd));

    let mut r = rng(5);
    let vecs: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let bk = bank(&vecs);
    let feats = uniform(&[9, 6], -1.0, 1.0, 6);
    let labels = [0, 1, 1, 3, 0, 2, 3, 3, 1];
    let fv = Var::param(feats.clone());
    let auto = grad(&proxy_loss(&fv, &labels, &bk, 0.4)?, &[&fv], false).remove(0);
    let fd = central_diff(&feats, 1e-6, |t| proxy_loss_oracle(t, &labels, &bk, 0.4));
    worst_first = worst_first.max(rel_err(auto.value().data(), &fd));

    let m = toy(3);
    let x = uniform(&[2, 2, 6, 6], 0.2, 0.8, 4);
    let yy = [1, 2];
    let i_nr = Tensor::new(vec![2, 5], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0])?;
    let loss = BaseLoss { c: 1.0, confidence: Some(10.0) };
    let r0 = uniform(&[2, 2, 6, 6], -0.05, 0.05, 9);
    let b = m.bind(false);
    let rv = Var::param(r0.clone());
    let g = nonrobust_gradient_var(&b, &Var::constant(x.clone()).add(&rv), &yy, &i_nr, &loss, true)?;
    let auto = grad(&g.row_l2_norm().sum(), &[&rv], false).remove(0);
    let fd = central_diff(&r0, 1e-5, |rr| gnr_norm_sum(&m, &x.zip_map(rr, |a, c| a + c), &yy, &i_nr, &loss));
    worst_second = worst_second.max(rel_err(auto.value().data(), &fd));

    let z = m.forward_to_tap(&x)?;
    let profile = ChannelProfile::new(vec![0.1, -0.2, 0.0, 0.3, 0.05], vec![0.5, 0.8, 0.3, 1.1, 0.6], "toy")?;
    let noise: Vec<Tensor> = (0..3).map(|d| gaussian(z.shape(), 30 + d)).collect();
    let sigma = uniform(&[2, 5], 0.2, 1.2, 23);
    let sv = Var::param(sigma.clone());
    let obj = ib_objective(&b, &Var::constant(z.clone()), &yy, &sv, &noise, &profile, 10.0).sum();
    let auto = grad(&obj, &[&sv], false).remove(0);
    let fd = central_diff(&sigma, 1e-6, |s| ib_oracle(&m, &z, &yy, s, &noise, &profile, 10.0));
    worst_first = worst_first.max(rel_err(auto.value().data(), &fd));

    Ok((
        worst_first < FIRST_ORDER_TOL && worst_second < SECOND_ORDER_TOL,
        format!(
            "first-order max rel err {worst_first:.2e} (tol {FIRST_ORDER_TOL:.0e}), second-order {worst_second:.2e} (tol {SECOND_ORDER_TOL:.0e})"
        ),
    ))
}

// 3
fn kl_monte_carlo_agreement() -> Outcome {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let c = 3;
        let mu: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let sz: Vec<f64> = (0..c).map(|_| r.random_range(0.3..2.0)).collect();
        let sigma: Vec<f64> = (0..c).map(|_| r.random_range(0.1..2.5)).collect();
        let z = Tensor::new(vec![c, 2, 2], (0..c * 4).map(|_| r.random_range(-2.0..2.0)).collect())?;
        let profile = ChannelProfile::new(mu, sz, "random")?;
        let exact = kl_term(&sigma, &z, &profile)?;
        let mc = kl_monte_carlo(&sigma, &z, &profile, 100_000, 7 + case);
        worst = worst.max((mc - exact).abs() / exact);
    }
    Ok((worst <= 0.01, format!("20 instances x 1e5 draws, max relative gap {worst:.4} (tol 0.01)")))
}

// 4
fn robust_perturbation_suppresses_gradient(desk: &Desk) -> Outcome {
    let (_, p, _) = desk.primary();
    let cfg = p.config();
    let model = p.model("adversarial")?;
    let masks = load_masks(&p.record(Stage::Distill)?.dir.join("masks_eval.json"))?;
    let batch = p.eval_set()?.take(100)?.all();
    let before = nonrobust_gradient_norms(&model, &batch, &masks, &cfg.rp.loss)?;
    let rp = optimize_rp(&model, &batch, &masks, &cfg.rp)?;
    let after = nonrobust_gradient_norms(&model, &rp.apply(&batch)?, &masks, &cfg.rp.loss)?;
    let ratio = mean(&after) / mean(&before);
    Ok((
        ratio <= 0.5,
        format!("mean |G_nr| {:.4} -> {:.4} over 100 images, ratio {ratio:.3} (need <= 0.5)", mean(&before), mean(&after)),
    ))
}

// 5
fn perturbed_inputs_resist_pgd(desk: &Desk) -> Outcome {
    let (_, _, report) = desk.primary();
    let rows = &report.perturbation_rows;
    let x = row(rows, "adversarial", "x", "pgd")?.accuracy;
    let xr = row(rows, "adversarial", "x+r", "pgd")?.accuracy;
    let xrk = row(rows, "adversarial", "x+r^k", "pgd")?.accuracy;
    Ok((
        xr - x >= 0.10 && xrk - x >= 0.10,
        format!("PGD-20 on x {:.1}%, x+r {:.1}%, x+r^k {:.1}% (need +10 points each)", 100.0 * x, 100.0 * xr, 100.0 * xrk),
    ))
}

// 6
fn proxy_finetuning_improves_pgd(desk: &Desk) -> Outcome {
    let mut gains = Vec::new();
    let mut drops = Vec::new();
    let mut per_seed = Vec::new();
    for (seed, _, report) in &desk.runs {
        let base = row(&report.rows, "adversarial", "x", "pgd20")?.accuracy;
        let tuned = row(&report.rows, "proxy", "x", "pgd20")?.accuracy;
        let base_clean = row(&report.rows, "adversarial", "x", "clean")?.accuracy;
        let tuned_clean = row(&report.rows, "proxy", "x", "clean")?.accuracy;
        gains.push(tuned - base);
        drops.push(base_clean - tuned_clean);
        per_seed.push(format!("seed {seed}: {:.1}% -> {:.1}%", 100.0 * base, 100.0 * tuned));
    }
    let (g, d) = (mean(&gains), mean(&drops));
    Ok((
        g >= 0.01 && d <= 0.02,
        format!(
            "PGD-20 gain {:+.2} points, clean drop {:.2} points, 3-seed mean (need >= +1.0, <= 2.0); {}",
            100.0 * g,
            100.0 * d,
            per_seed.join(", ")
        ),
    ))
}

// 7
fn proxy_finetuning_resists_adaptive_attack(desk: &Desk) -> Outcome {
    let mut base = Vec::new();
    let mut tuned = Vec::new();
    for (_, _, report) in &desk.runs {
        base.push(row(&report.rows, "adversarial", "x", "adaptive")?.accuracy);
        tuned.push(row(&report.rows, "proxy", "x", "adaptive")?.accuracy);
    }
    let (b, t) = (mean(&base), mean(&tuned));
    Ok((
        t > b,
        format!("adaptive attack (eps 0.03) accuracy {:.2}% -> {:.2}%, 3-seed mean (need strictly higher)", 100.0 * b, 100.0 * t),
    ))
}

// 8
fn crp_tightens_positive_pairs(desk: &Desk) -> Outcome {
    let (_, _, report) = desk.primary();
    let a = report.analysis.as_ref().ok_or("no analysis")?;
    let (lo, hi) = a.similarity_difference_ci;
    let pass = a.similarity_with_crp.mean > a.similarity_without_crp.mean
        && lo > 0.0
        && a.similarity_with_crp.std < a.similarity_without_crp.std;
    Ok((
        pass,
        format!(
            "mean {:.4} -> {:.4}, std {:.4} -> {:.4}, 95% CI of difference [{lo:.4}, {hi:.4}]",
            a.similarity_without_crp.mean, a.similarity_with_crp.mean, a.similarity_without_crp.std, a.similarity_with_crp.std
        ),
    ))
}

// 9
fn beta_ablation_trend(desk: &Desk) -> Outcome {
    let (_, _, report) = desk.primary();
    let a = report.analysis.as_ref().ok_or("no analysis")?;
    let c = &a.ablation;
    let pairs = c.betas.len().saturating_sub(1);
    let r = a.robust_only_nonincreasing_pairs;
    let n = a.nonrobust_only_nondecreasing_pairs;
    Ok((
        c.betas == [0.1, 1.0, 10.0, 100.0] && r >= 3 && n >= 3,
        format!(
            "robust-only {:?} ({r}/{pairs} non-increasing), nonrobust-only {:?} ({n}/{pairs} non-decreasing)",
            c.robust_only, c.nonrobust_only
        ),
    ))
}

// 10
fn no_gradient_obfuscation(desk: &Desk) -> Outcome {
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut models = BTreeMap::new();
    for (seed, _, report) in &desk.runs {
        for s in &report.sanity {
            checks += 1;
            *models.entry(s.model.clone()).or_insert(0) += 1;
            if !s.pass {
                failures.push(format!("seed {seed} {} {} ({:.3} vs {:.3})", s.model, s.check, s.lhs, s.rhs));
            }
        }
    }
    let covered = ["standard", "adversarial", "proxy"].iter().all(|m| models.contains_key(*m));
    Ok((
        failures.is_empty() && covered,
        if failures.is_empty() {
            format!("{checks} checks over {:?} with 1-point tolerance", models.keys().collect::<Vec<_>>())
        } else {
            failures.join("; ")
        },
    ))
}

// 11
fn distance_evaluation_count_is_exact(desk: &Desk) -> Outcome {
    let bk = bank(&[vec![1.0, 0.0, 0.2], vec![0.0, 1.0, 0.3], vec![0.5, 0.5, 1.0], vec![0.1, -1.0, 0.4]]);
    let mut exact = true;
    for nb in [1usize, 7, 32] {
        let feats = uniform(&[nb, 3], -1.0, 1.0, nb as u64);
        let labels: Vec<usize> = (0..nb).map(|i| i % 4).collect();
        reset_distance_evaluations();
        proxy_loss(&Var::constant(feats), &labels, &bk, 1.0)?;
        exact &= distance_evaluations() == distance_evaluation_count(nb, 4) as u64 && distance_evaluations() == (nb * 4) as u64;
    }
    let (_, p, report) = desk.primary();
    let train = p.config().dataset_train_len()?;
    let classes = report.crp_versions.len();
    let per_epoch_ok = report
        .finetune_history
        .iter()
        .all(|h| h.distance_evaluations as usize == train * classes);
    Ok((
        exact && per_epoch_ok,
        format!("N_b x C per batch for N_b in {{1, 7, 32}}; {train} x {classes} per fine-tuning epoch"),
    ))
}

// 12
fn invariant_suite(desk: &Desk) -> Outcome {
    let mut notes = Vec::new();
    let (_, p, _) = desk.primary();
    let model = p.model("adversarial")?;
    let surrogate = p.model("surrogate")?;
    let batch = p.eval_set()?.take(16)?.all();
    let masks = load_masks(&p.record(Stage::Distill)?.dir.join("masks_eval.json"))?;

    let eps = 8.0 / 255.0;
    let linf = AttackConfig::linf(eps, 10);
    let l2 = AttackConfig::l2(0.5, 10);
    let advs = [
        (Norm::Linf, eps, fgsm(&model, &batch, eps)?),
        (Norm::Linf, eps, pgd(&model, &batch, &linf)?),
        (Norm::L2, 0.5, pgd(&model, &batch, &l2)?),
        (Norm::Linf, eps, cw_linf(&model, &batch, &linf)?),
        (Norm::Linf, 0.03, adaptive_nonrobust_attack(&model, &batch, &masks, &BaseLoss::margin(1.0), &AttackConfig::linf(0.03, 10))?),
        (Norm::Linf, eps, transfer_attack(&surrogate, &model, &batch, &linf)?),
    ];
    let mut bounded = true;
    for (norm, radius, adv) in &advs {
        for i in 0..batch.len() {
            let d: Vec<f64> = batch.pixels.row(i).iter().zip(adv.adversarial.pixels.row(i)).map(|(a, b)| b - a).collect();
            let size = match norm {
                Norm::Linf => d.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            bounded &= size <= radius + 1e-9;
        }
        bounded &= adv.adversarial.pixels.data().iter().all(|v| (0.0..=1.0).contains(v));
    }
    notes.push(format!("attack bounds {bounded}"));

    let z = model.forward_to_tap(&batch.pixels)?;
    let mut algebra = true;
    for (i, id) in batch.ids.iter().enumerate() {
        let m = masks.get(*id).ok_or("missing mask")?;
        algebra &= m.i_r().iter().zip(m.i_nr()).all(|(a, b)| a + b == 1.0 && a * b == 0.0);
        let zi = z.select_rows(&[i]);
        let (zr, znr) = split_feature(&zi, m)?;
        algebra &= zr.data().iter().zip(znr.data()).map(|(a, b)| a + b).eq(zi.data().iter().copied());
    }
    notes.push(format!("mask complement and reconstruction {algebra}"));

    let (train, _) = fixture::data();
    let base = fixture::adversarial(3);
    let mut cfg = fixture::train_config(4, 3);
    cfg.refresh_period = 2;
    cfg.proxy_weight = 0.1;
    let mut rc = RefreshConfig::default();
    rc.distill.steps = 10;
    rc.ceo.steps = 5;
    rc.ceo.batch_size = 4;
    rc.ceo.samples_per_class = 6;
    let mut banks = Vec::new();
    let mut hook = |_: &SplitClassifier, s: &TrainState, _: &Sgd| {
        banks.push((s.history.last().map(|h| h.refreshed).unwrap_or(false), s.bank.clone()));
        Ok(())
    };
    let hook_ref: &mut EpochHook<'_> = &mut hook;
    let run1 = finetune_from(base.clone(), &train, None, &ATMethod::Madry, &cfg, &rc, None, Some(hook_ref))?;
    let immutable = banks.windows(2).all(|w| w[1].0 || w[0].1 == w[1].1);
    notes.push(format!("bank immutable between refreshes {immutable}"));

    let run2 = finetune_from(base, &train, None, &ATMethod::Madry, &cfg, &rc, None, None)?;
    let params = |m: &SplitClassifier| m.params().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
    let again = fixture::adversarial(3);
    let reproducible = params(&run1.model) == params(&run2.model)
        && run1.state.history == run2.state.history
        && params(&again) == params(&fixture::adversarial(3))
        && {
            let prof = estimate_channel_profile(&again, &[train.all()])?;
            let dc = DistillConfig { steps: 10, ..Default::default() };
            distill_masks(&again, &train.take(6)?.all(), &prof, &dc)? == distill_masks(&again, &train.take(6)?.all(), &prof, &dc)?
        };
    notes.push(format!("bit-reproducible {reproducible}"));
    Ok((bounded && algebra && immutable && reproducible, notes.join(", ")))
}

trait TrainLen {
    fn dataset_train_len(&self) -> Result<usize, String>;
}

impl TrainLen for ExperimentConfig {
    fn dataset_train_len(&self) -> Result<usize, String> {
        match &self.dataset {
            robust_proxy::harness::DatasetConfig::Synthetic(s) => Ok(s.num_classes * s.examples_per_class),
            _ => Err("desk config is synthetic".into()),
        }
    }
}

fn report(n: usize, name: &str, outcome: Outcome, failed: &mut Vec<usize>, t: Instant) {
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok((true, detail)) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1}s]"),
        Ok((false, detail)) => {
            failed.push(n);
            println!("criterion {n:>2} FAIL {name}: {detail} [{secs:.1}s]");
        }
        Err(e) => {
            failed.push(n);
            println!("criterion {n:>2} FAIL {name}: error: {e} [{secs:.1}s]");
        }
    }
}

fn main() -> ExitCode {
    // accept and ignore libtest flags such as --nocapture
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = Vec::new();
    let t = Instant::now();
    report(1, "split and masked-gradient identity", split_and_masked_gradient_identity(), &mut failed, t);
    let t = Instant::now();
    report(2, "gradient oracles", gradient_oracles(), &mut failed, t);
    let t = Instant::now();
    report(3, "KL closed form vs Monte Carlo", kl_monte_carlo_agreement(), &mut failed, t);

    println!("  building desk experiments for seeds {SEEDS:?}");
    let t = Instant::now();
    let desk = match Desk::build() {
        Ok(d) => Some(d),
        Err(e) => {
            println!("  desk experiments failed: {e}");
            None
        }
    };
    println!("  desk experiments ready in {:.0}s", t.elapsed().as_secs_f64());
    type Check = fn(&Desk) -> Outcome;
    let desk_checks: [(usize, &str, Check); 9] = [
        (4, "robust perturbation halves the non-robust gradient", robust_perturbation_suppresses_gradient),
        (5, "PGD-20 on x+r and x+r^k", perturbed_inputs_resist_pgd),
        (6, "proxy fine-tuning PGD-20 gain", proxy_finetuning_improves_pgd),
        (7, "proxy fine-tuning under the adaptive attack", proxy_finetuning_resists_adaptive_attack),
        (8, "positive-pair similarity with CRP", crp_tightens_positive_pairs),
        (9, "beta ablation trend", beta_ablation_trend),
        (10, "gradient-obfuscation sanity", no_gradient_obfuscation),
        (11, "distance evaluation count", distance_evaluation_count_is_exact),
        (12, "invariant suite", invariant_suite),
    ];
    for (n, name, check) in desk_checks {
        let t = Instant::now();
        let outcome = match &desk {
            Some(d) => check(d),
            None => Err("desk experiments unavailable".into()),
        };
        report(n, name, outcome, &mut failed, t);
    }
    if failed.is_empty() {
        println!("acceptance: all 12 criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAIL on criteria {failed:?}");
        ExitCode::FAILURE
    }
}
