//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use robust_proxy::distill::{kl_term, ChannelProfile};
use robust_proxy::model::BaseLoss;
use robust_proxy::perturb::nonrobust_gradient_var;
use robust_proxy::proxy::{cosine_distance, Proxy, ProxyBank};
use robust_proxy::rng::rng;
use robust_proxy::{Architecture, SplitClassifier, Tensor, Var};

pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const SECOND_ORDER_TOL: f64 = 1e-3;

pub fn toy(seed: u64) -> SplitClassifier {
    SplitClassifier::new(Architecture::with_widths([2, 6, 6], 3, [3, 4, 4, 5]), seed).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(auto: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = auto.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

pub fn bank(vectors: &[Vec<f64>]) -> ProxyBank {
    ProxyBank {
        proxies: vectors
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (
                    k,
                    Proxy {
                        class_id: k,
                        vector: v.iter().map(|x| x / n).collect(),
                        source_example_id: None,
                        crp_version: None,
                        epoch_built: 0,
                    },
                )
            })
            .collect(),
        refresh_period: 1,
        built_at: 0,
        epoch: 0,
    }
}

/// Pull/push loss from scalar cosine distances.
pub fn proxy_loss_oracle(feats: &Tensor, labels: &[usize], bank: &ProxyBank, margin: f64) -> f64 {
    let k = bank.proxies.len();
    let c = feats.shape()[1];
    let mut present: Vec<usize> = labels.to_vec();
    present.sort();
    present.dedup();
    let (mut pull, mut push) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let z = &feats.data()[i * c..(i + 1) * c];
        for (cls, p) in &bank.proxies {
            let d = cosine_distance(z, &p.vector).unwrap();
            if *cls == y {
                pull += d - margin;
            } else {
                push += d + margin;
            }
        }
    }
    pull / present.len() as f64 - push / k as f64
}

/// `Σ_i ‖G_nr,i‖₂` from a first-order graph only.
pub fn gnr_norm_sum(m: &SplitClassifier, x: &Tensor, y: &[usize], i_nr: &Tensor, loss: &BaseLoss) -> f64 {
    let b = m.bind(false);
    let g = nonrobust_gradient_var(&b, &Var::constant(x.clone()), y, i_nr, loss, false).unwrap();
    let g = g.value();
    (0..g.batch_len()).map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum()
}

/// Information-bottleneck objective per image from value-only passes:
/// cross-entropy by explicit log-sum-exp and the closed-form KL.
pub fn ib_oracle(
    m: &SplitClassifier,
    z: &Tensor,
    y: &[usize],
    sigma: &Tensor,
    noise: &[Tensor],
    profile: &ChannelProfile,
    beta: f64,
) -> f64 {
    let s = z.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut total = 0.0;
    for eps in noise {
        let noisy = Tensor::new(
            s.to_vec(),
            (0..z.numel())
                .map(|i| z.data()[i] + sigma.data()[i / hw] * eps.data()[i])
                .collect(),
        )
        .unwrap();
        let logits = m.forward_from_tap(&noisy).unwrap();
        let k = logits.shape()[1];
        for (i, &yi) in y.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += (lse - row[yi]) / noise.len() as f64;
        }
    }
    for i in 0..n {
        let zi = Tensor::new(vec![c, s[2], s[3]], z.row(i).to_vec()).unwrap();
        total += beta * kl_term(sigma.row(i), &zi, profile).unwrap();
    }
    total
}

/// `E_{x~N(z,σ²)}[ln N(x; z, σ²) − ln N(x; μ, σ_z²)]` by sampling, averaged
/// over every element of a `[c, h, w]` map.
pub fn kl_monte_carlo(sigma: &[f64], z: &Tensor, profile: &ChannelProfile, draws: usize, seed: u64) -> f64 {
    let s = z.shape();
    let hw = s[1] * s[2];
    let mut r = rng(seed);
    let mut acc = 0.0;
    for (i, v) in z.data().iter().enumerate() {
        let ch = i / hw;
        let (sg, sz, mu) = (sigma[ch], profile.sigma[ch], profile.mu[ch]);
        let mut sum = 0.0;
        for _ in 0..draws {
            let e: f64 = StandardNormal.sample(&mut r);
            let x = v + sg * e;
            let log_p = -sg.ln() - 0.5 * e * e;
            let log_q = -sz.ln() - 0.5 * ((x - mu) / sz).powi(2);
            sum += log_p - log_q;
        }
        acc += sum / draws as f64;
    }
    acc / z.numel() as f64
}

pub mod fixture {
    use std::sync::OnceLock;

    use robust_proxy::data::{make_synthetic_split, Dataset, Split, SyntheticSpec};
    use robust_proxy::train::{pretrain, ATMethod, Objective, TrainConfig};
    use robust_proxy::{Architecture, SplitClassifier};

    pub fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            examples_per_class: 20,
            image_size: 8,
            tile: 2,
            class_signal_strength: 0.6,
            noise_std: 0.2,
            ..SyntheticSpec::desk_default(5)
        }
    }

    pub fn data() -> (Dataset, Dataset) {
        let s = spec();
        (
            make_synthetic_split(&s, Split::Train).unwrap(),
            make_synthetic_split(&s, Split::Test).unwrap(),
        )
    }

    pub fn train_config(epochs: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs,
            batch_size: 20,
            lr: 0.05,
            eval_examples: 0,
            seed,
            ..TrainConfig::default()
        };
        cfg.attack.steps = 3;
        cfg.attack.step_size = 4.0 / 255.0;
        cfg
    }

    pub fn untrained(seed: u64) -> SplitClassifier {
        SplitClassifier::new(Architecture::with_widths([3, 8, 8], 3, [4, 6, 6, 8]), seed).unwrap()
    }

    pub fn adversarial(seed: u64) -> SplitClassifier {
        let (train, _) = data();
        pretrain(
            untrained(seed),
            &train,
            None,
            &Objective::Adversarial(ATMethod::Madry),
            &train_config(4, seed),
        )
        .unwrap()
        .0
    }

    pub struct Desk {
        pub model: SplitClassifier,
        pub train: Dataset,
        pub held_out: Dataset,
    }

    /// A 16px, 10-class adversarially trained model with the desk training
    /// recipe, built once per test binary.
    pub fn desk() -> &'static Desk {
        static D: OnceLock<Desk> = OnceLock::new();
        D.get_or_init(|| {
            let spec = SyntheticSpec {
                num_classes: 10,
                examples_per_class: 100,
                class_signal_strength: 0.25,
                noise_std: 0.25,
                ..SyntheticSpec::desk_default(7)
            };
            let train = make_synthetic_split(&spec, Split::Train).unwrap();
            let arch = Architecture::with_widths([3, 16, 16], 10, [8, 16, 16, 32]);
            let mut cfg = TrainConfig { batch_size: 50, ..train_config(30, 6) };
            cfg.attack.steps = 5;
            cfg.attack.step_size = 2.5 / 255.0;
            let model = pretrain(SplitClassifier::new(arch, 6).unwrap(), &train, None, &Objective::Adversarial(ATMethod::Madry), &cfg)
                .unwrap()
                .0;
            Desk {
                model,
                train,
                held_out: make_synthetic_split(&spec, Split::Test).unwrap(),
            }
        })
    }
}
