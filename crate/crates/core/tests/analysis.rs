//! Inversion descent and separability of the synthetic data.

mod common;

use robust_proxy::analysis::{invert_feature, Keep};
use robust_proxy::data::{make_synthetic_split, Dataset, Split, SyntheticSpec};
use robust_proxy::distill::ChannelMask;

use common::*;

#[test]
fn inversion_residual_decreases_over_the_first_steps() {
    let model = fixture::adversarial(3);
    let (train, _) = fixture::data();
    let target = model.forward_to_tap(&train.take(1).unwrap().all().pixels).unwrap();
    let mask = ChannelMask::all(model.tap_channels(), true);
    let inv = invert_feature(&model, &target, &mask, Keep::Both, 10, 0.1, 4, None).unwrap();
    assert!(inv.residuals.windows(2).all(|w| w[1] < w[0]), "{:?}", inv.residuals);
}

/// Multinomial logistic regression on raw pixels by full-batch gradient descent.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let (d, k) = (train.images().row_len(), train.labels().iter().max().unwrap() + 1);
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let scores = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(p, q)| p * q).sum::<f64>()).collect()
    };
    let n = train.len();
    for _ in 0..200 {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let x = train.images().row(i);
            let s = scores(&w, &b, x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / z - (c == train.labels()[i]) as u8 as f64;
                gb[c] += g / n as f64;
                for (gi, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *gi += g * xi / n as f64;
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= 0.5 * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= 0.5 * g);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let s = scores(&w, &b, test.images().row(i));
            let best = (0..k).max_by(|&a, &c| s[a].total_cmp(&s[c])).unwrap();
            best == test.labels()[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn synthetic_classes_are_linearly_separable() {
    let desk = SyntheticSpec { class_signal_strength: 0.25, noise_std: 0.25, ..SyntheticSpec::desk_default(1) };
    for spec in [SyntheticSpec::desk_default(1), desk] {
        let train = make_synthetic_split(&spec, Split::Train).unwrap();
        let test = make_synthetic_split(&spec, Split::Test).unwrap();
        let acc = linear_probe_accuracy(&train, &test);
        assert!(acc > 0.95, "linear probe accuracy {acc} for {spec:?}");
    }
}
