//! Attack bounds, mask algebra, proxy-bank lifetime and seed
//! reproducibility.

mod common;

use proptest::prelude::*;

use robust_proxy::attack::{
    adaptive_nonrobust_attack, cw_linf, fgsm, pgd, transfer_attack, AdvBatch, AttackConfig, Norm,
};
use robust_proxy::data::ImageBatch;
use robust_proxy::distill::{distill_masks, estimate_channel_profile, split_feature, DistillConfig, MaskSet};
use robust_proxy::model::BaseLoss;
use robust_proxy::perturb::{optimize_rp, PerturbOptConfig};
use robust_proxy::proxy::ProxyBank;
use robust_proxy::train::{finetune_from, ATMethod, EpochHook, RefreshConfig};
use robust_proxy::SplitClassifier;

use common::fixture;

fn masks_for(model: &SplitClassifier, batch: &ImageBatch) -> MaskSet {
    let profile = estimate_channel_profile(model, &[batch.clone()]).unwrap();
    distill_masks(model, batch, &profile, &DistillConfig { steps: 15, ..Default::default() }).unwrap()
}

fn assert_bounded(clean: &ImageBatch, adv: &AdvBatch, cfg_norm: Norm, eps: f64) {
    let x = &clean.pixels;
    let xa = &adv.adversarial.pixels;
    assert_eq!(x.shape(), xa.shape());
    assert_eq!(adv.adversarial.labels, clean.labels);
    for i in 0..x.batch_len() {
        let d: Vec<f64> = x.row(i).iter().zip(xa.row(i)).map(|(a, b)| b - a).collect();
        let size = match cfg_norm {
            Norm::Linf => d.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        assert!(size <= eps + 1e-9, "perturbation {size} exceeds {eps}");
    }
    assert!(xa.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_attack_stays_in_the_ball_and_pixel_range(
        eps in 0.0f64..0.2,
        steps in 1usize..4,
        seed in 0u64..1000,
        l2 in proptest::bool::ANY,
    ) {
        let (_, test) = fixture::data();
        let model = fixture::untrained(seed);
        let surrogate = fixture::untrained(seed + 1);
        let batch = test.take(6).unwrap().all();
        let mut cfg = if l2 { AttackConfig::l2(eps * 10.0, steps) } else { AttackConfig::linf(eps, steps) };
        cfg.seed = seed;
        let radius = cfg.epsilon;
        assert_bounded(&batch, &pgd(&model, &batch, &cfg).unwrap(), cfg.norm, radius);
        assert_bounded(&batch, &transfer_attack(&surrogate, &model, &batch, &cfg).unwrap(), cfg.norm, radius);
        let linf = AttackConfig { norm: Norm::Linf, ..AttackConfig::linf(eps, steps) };
        assert_bounded(&batch, &fgsm(&model, &batch, eps).unwrap(), Norm::Linf, eps);
        assert_bounded(&batch, &cw_linf(&model, &batch, &linf).unwrap(), Norm::Linf, eps);
        let masks = masks_for(&model, &batch);
        let adaptive = adaptive_nonrobust_attack(&model, &batch, &masks, &BaseLoss::margin(1.0), &linf).unwrap();
        assert_bounded(&batch, &adaptive, Norm::Linf, eps);
    }
}

#[test]
fn masks_are_complementary_and_features_reconstruct_exactly() {
    let model = fixture::adversarial(1);
    let (_, test) = fixture::data();
    let batch = test.take(12).unwrap().all();
    let masks = masks_for(&model, &batch);
    let z = model.forward_to_tap(&batch.pixels).unwrap();
    for (i, id) in batch.ids.iter().enumerate() {
        let m = masks.get(*id).unwrap();
        for (r, nr) in m.i_r().iter().zip(m.i_nr()) {
            assert_eq!(r + nr, 1.0);
            assert_eq!(r * nr, 0.0);
        }
        let zi = z.select_rows(&[i]);
        let (zr, znr) = split_feature(&zi, m).unwrap();
        let back: Vec<f64> = zr.data().iter().zip(znr.data()).map(|(a, b)| a + b).collect();
        assert_eq!(back, zi.data());
    }
}

#[test]
fn robust_perturbations_keep_images_in_range() {
    let model = fixture::adversarial(2);
    let (_, test) = fixture::data();
    let batch = test.take(5).unwrap().all();
    let masks = masks_for(&model, &batch);
    let rp = optimize_rp(&model, &batch, &masks, &PerturbOptConfig { steps: 10, ..PerturbOptConfig::rp_default() }).unwrap();
    let aug = rp.apply(&batch).unwrap();
    assert!(aug.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(rp.final_gnr_norm.len(), batch.len());
}

fn refresh_config() -> RefreshConfig {
    let mut rc = RefreshConfig::default();
    rc.distill.steps = 10;
    rc.ceo.steps = 5;
    rc.ceo.batch_size = 4;
    rc.ceo.samples_per_class = 6;
    rc.profile_examples = 0;
    rc
}

#[test]
fn proxy_bank_changes_only_at_refresh_epochs() {
    let (train, _) = fixture::data();
    let base = fixture::adversarial(3);
    let mut cfg = fixture::train_config(5, 3);
    cfg.refresh_period = 2;
    cfg.proxy_weight = 0.1;
    let mut banks: Vec<(usize, ProxyBank, bool)> = Vec::new();
    let mut hook = |_: &SplitClassifier, s: &robust_proxy::train::TrainState, _: &robust_proxy::train::Sgd| {
        let rec = s.history.last().unwrap();
        banks.push((rec.epoch, s.bank.clone().unwrap(), rec.refreshed));
        Ok(())
    };
    let hook_ref: &mut EpochHook<'_> = &mut hook;
    finetune_from(base, &train, None, &ATMethod::Madry, &cfg, &refresh_config(), None, Some(hook_ref)).unwrap();
    assert_eq!(banks.len(), 5);
    for w in banks.windows(2) {
        let (ref prev, ref next) = (&w[0], &w[1]);
        if next.2 {
            assert_ne!(prev.1, next.1, "bank not rebuilt at epoch {}", next.0);
            assert_eq!(next.1.epoch, next.0);
        } else {
            assert_eq!(prev.1, next.1, "bank changed between refreshes at epoch {}", next.0);
        }
    }
    let refreshed: Vec<usize> = banks.iter().filter(|b| b.2).map(|b| b.0).collect();
    assert_eq!(refreshed, vec![0, 2, 4]);
}

#[test]
fn fixed_seeds_reproduce_bit_for_bit() {
    let a = fixture::adversarial(9);
    let b = fixture::adversarial(9);
    let pa: Vec<Vec<f64>> = a.params().iter().map(|t| t.data().to_vec()).collect();
    let pb: Vec<Vec<f64>> = b.params().iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(pa, pb);

    let (train, test) = fixture::data();
    let batch = test.take(6).unwrap().all();
    assert_eq!(masks_for(&a, &batch), masks_for(&b, &batch));
    let cfg = AttackConfig::linf(8.0 / 255.0, 5).with_seed(4);
    assert_eq!(pgd(&a, &batch, &cfg).unwrap().adversarial.pixels, pgd(&b, &batch, &cfg).unwrap().adversarial.pixels);

    let mut ft = fixture::train_config(2, 9);
    ft.refresh_period = 1;
    ft.proxy_weight = 0.1;
    let run = || {
        finetune_from(a.clone(), &train, None, &ATMethod::Madry, &ft, &refresh_config(), None, None)
            .unwrap()
    };
    let (x, y) = (run(), run());
    let px: Vec<Vec<f64>> = x.model.params().iter().map(|t| t.data().to_vec()).collect();
    let py: Vec<Vec<f64>> = y.model.params().iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(px, py);
    assert_eq!(x.state.bank, y.state.bank);
    assert_eq!(x.state.history, y.state.history);
    assert_ne!(fixture::adversarial(10).params()[0].data(), a.params()[0].data());
}

#[test]
fn interrupted_finetuning_resumes_bit_for_bit() {
    use robust_proxy::train::{Resume, Sgd, TrainState};
    use robust_proxy::Error;

    let (train, _) = fixture::data();
    let base = fixture::adversarial(4);
    let mut cfg = fixture::train_config(4, 4);
    cfg.refresh_period = 3;
    cfg.proxy_weight = 0.1;
    let full = finetune_from(base.clone(), &train, None, &ATMethod::Madry, &cfg, &refresh_config(), None, None).unwrap();

    let mut saved: Option<(SplitClassifier, TrainState, Vec<robust_proxy::Tensor>)> = None;
    let mut stop_after_two = |m: &SplitClassifier, s: &TrainState, opt: &Sgd| {
        saved = Some((m.clone(), s.clone(), opt.velocity().to_vec()));
        if s.epoch == 2 {
            Err(Error::Contract("interrupted".into()))
        } else {
            Ok(())
        }
    };
    let hook_ref: &mut EpochHook<'_> = &mut stop_after_two;
    assert!(finetune_from(base, &train, None, &ATMethod::Madry, &cfg, &refresh_config(), None, Some(hook_ref)).is_err());
    let (model, state, velocity) = saved.unwrap();
    let resumed = finetune_from(
        model,
        &train,
        None,
        &ATMethod::Madry,
        &cfg,
        &refresh_config(),
        Some(Resume {
            start_epoch: state.epoch,
            bank: state.bank,
            crps: state.crps,
            velocity: Some(velocity),
            history: state.history,
            bank_fresh: false,
        }),
        None,
    )
    .unwrap();
    let p = |m: &SplitClassifier| m.params().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(p(&resumed.model), p(&full.model));
    assert_eq!(resumed.state.history, full.state.history);
    assert_eq!(resumed.state.bank, full.state.bank);
}
