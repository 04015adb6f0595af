//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use keydyn::data::{generate_synthetic, KeystrokeEvent, KeystrokeSequence, SyntheticSpec, UserCollection};
use keydyn::features::{PairBatch, PairPool};
use keydyn::nn::{Model, ModelConfig, TrainHyper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn population(num_users: usize, sequences_per_user: usize, min_keys: usize, max_keys: usize, seed: u64) -> UserCollection {
    generate_synthetic(&SyntheticSpec {
        num_users,
        sequences_per_user,
        min_keys,
        max_keys,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Random sequence with integer-millisecond timestamps, rollover allowed.
pub fn random_sequence(rng: &mut impl Rng, len: usize) -> KeystrokeSequence {
    let mut t = rng.random_range(0..1_000_000) as f64;
    let events = (0..len)
        .map(|_| {
            let press = t;
            let release = press + rng.random_range(1..400) as f64;
            t += rng.random_range(0..600) as f64;
            KeystrokeEvent::new(rng.random_range(0..=255u8), press, release).unwrap()
        })
        .collect();
    KeystrokeSequence {
        user_id: "u".into(),
        session_id: "s".into(),
        events,
    }
}

/// Brute-force EER: count each operating point directly, take the first
/// point where FAR >= FRR and interpolate from the previous one.
pub fn eer_oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut taus: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let rates = |tau: f64| {
        let far = impostor.iter().filter(|&&s| s <= tau).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s > tau).count() as f64 / genuine.len() as f64;
        (far, frr)
    };
    let mut prev = (0.0, 1.0);
    for tau in taus {
        let (far, frr) = rates(tau);
        if far >= frr {
            let (d0, d1) = (prev.0 - prev.1, far - frr);
            if d1 == 0.0 {
                return far;
            }
            return prev.0 + (-d0 / (d1 - d0)) * (far - prev.0);
        }
        prev = (far, frr);
    }
    unreachable!()
}

pub fn distance_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn loss_oracle(d: f64, impostor: bool, margin: f64) -> f64 {
    if impostor {
        let h = if margin - d > 0.0 { margin - d } else { 0.0 };
        h * h / 2.0
    } else {
        d * d / 2.0
    }
}

pub struct GradCheckCase {
    pub units: usize,
    pub m: usize,
    pub pairs: usize,
    pub seed: u64,
}

/// Random small configuration for gradient checking.
pub fn grad_case(seed: u64) -> GradCheckCase {
    let mut r = rng(seed ^ 0xC0FFEE);
    GradCheckCase {
        units: r.random_range(1..=8),
        m: r.random_range(2..=6),
        pairs: r.random_range(1..=4),
        seed,
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// over every parameter, with dropout off. The denominator is floored at 1e-6
/// so that vanishing gradients compare absolutely.
pub fn gradient_check(case: &GradCheckCase) -> f64 {
    let users = population(4, 3, 2, 9, case.seed);
    let cfg = ModelConfig {
        input_length: case.m,
        lstm_units: case.units,
        ..Default::default()
    }
    .without_dropout();
    let mut model = Model::init(cfg, &mut rng(case.seed + 1)).unwrap();
    perturb(&mut model, case.seed + 2);
    let batch = PairPool::new(&users, case.m)
        .unwrap()
        .sample(case.pairs, &mut rng(case.seed + 3))
        .unwrap();
    max_grad_error(&mut model, &batch, &TrainHyper::default())
}

/// Moves batch-norm affine terms and running statistics away from their
/// initial values so every parameter path is exercised.
pub fn perturb(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    let w = &mut model.params.weights;
    w.bn_gamma.mapv_inplace(|_| r.random_range(0.5..1.5));
    w.bn_beta.mapv_inplace(|_| r.random_range(-0.5..0.5));
    w.lstm1.bias.mapv_inplace(|b| b + r.random_range(-0.3..0.3));
    w.lstm2.bias.mapv_inplace(|b| b + r.random_range(-0.3..0.3));
}

pub fn max_grad_error(model: &mut Model, batch: &PairBatch, hyper: &TrainHyper) -> f64 {
    let mut r = rng(0);
    let analytic = model.compute_gradients(batch, hyper, &mut r).unwrap().grads;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..8 {
        for k in 0..analytic.tensors()[t].len() {
            let orig = model.params.weights.tensors()[t][k];
            model.params.weights.tensors_mut()[t][k] = orig + h;
            let plus = model.batch_loss(batch, hyper, &mut r).unwrap();
            model.params.weights.tensors_mut()[t][k] = orig - h;
            let minus = model.batch_loss(batch, hyper, &mut r).unwrap();
            model.params.weights.tensors_mut()[t][k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.tensors()[t][k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}
