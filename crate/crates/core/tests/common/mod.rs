#![allow(dead_code)]

use moedpo_core::{
    ExpertPolicy, Gating, Matrix, Model, PreferenceTriplet, ProblemSpace, ReferencePolicy,
    References, RewardTable,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    // Box-Muller keeps the helpers independent of the crate's samplers.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| normal(rng, scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| normal(rng, 1.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Random model with independent policies and rewards.
pub fn random_model(rng: &mut ChaCha8Rng, nx: usize, ny: usize, nk: usize, linear: bool) -> Model {
    let d = 3;
    let space = ProblemSpace::with_features(nx, ny, nk, random_matrix(rng, nx, d, 1.0)).unwrap();
    let policies = (0..nk)
        .map(|_| ExpertPolicy::new(random_matrix(rng, nx, ny, 1.0)).unwrap())
        .collect();
    let rewards = (0..nk)
        .map(|_| RewardTable::new(random_matrix(rng, nx, ny, 1.0)).unwrap())
        .collect();
    let gating = if linear {
        Gating::Linear {
            weight: random_matrix(rng, nk, d, 0.7),
            bias: (0..nk).map(|_| normal(rng, 0.5)).collect(),
        }
    } else {
        Gating::Fixed {
            weights: random_simplex(rng, nk),
        }
    };
    let reference = ReferencePolicy::from_logits(&random_matrix(rng, nx, ny, 0.5)).unwrap();
    Model::new(space, policies, rewards, gating, References::Shared(reference)).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, nx: usize, ny: usize, n: usize) -> Vec<PreferenceTriplet> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0..nx);
            let a = rng.gen_range(0..ny);
            let mut b = rng.gen_range(0..ny - 1);
            if b >= a {
                b += 1;
            }
            PreferenceTriplet::new(x, a, b)
        })
        .collect()
}

pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, eps: f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Maximizes a concave function over the simplex by exponentiated gradient
/// ascent with a constant step.
pub fn simplex_maximize(k: usize, grad: &dyn Fn(&[f64]) -> Vec<f64>, step: f64, iters: usize) -> Vec<f64> {
    let mut q = vec![1.0 / k as f64; k];
    for _ in 0..iters {
        let g = grad(&q);
        let gmax = g.iter().cloned().fold(f64::MIN, f64::max);
        let mut s = 0.0;
        for j in 0..k {
            q[j] *= ((g[j] - gmax) * step).exp();
            q[j] = q[j].max(1e-300);
            s += q[j];
        }
        for v in &mut q {
            *v /= s;
        }
    }
    q
}
