//! Independent numerical oracles and random instance generators used by the
//! verification battery.

use moedpo_core::{
    ExpertPolicy, Gating, Matrix, Model, PreferenceTriplet, ProblemSpace, ReferencePolicy,
    References, RewardTable,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central difference `(f(+ε) − f(−ε)) / 2ε` of a one-parameter perturbation.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, eps: f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

/// Relative error with a floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Maximizes a concave objective over the probability simplex by
/// exponentiated-gradient ascent from the barycenter.
pub fn simplex_maximize(k: usize, grad: impl Fn(&[f64]) -> Vec<f64>, step: f64, iters: usize) -> Vec<f64> {
    let mut q = vec![1.0 / k as f64; k];
    for _ in 0..iters {
        let g = grad(&q);
        let top = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..k {
            q[j] = (q[j] * ((g[j] - top) * step).exp()).max(1e-300);
            total += q[j];
        }
        q.iter_mut().for_each(|v| *v /= total);
    }
    q
}

/// Box-Muller normal draw, independent of the library's samplers.
pub fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen();
    scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| normal(rng, 1.0).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| normal(rng, scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// A model with independent random policies, rewards, gate and reference.
pub fn random_model(rng: &mut ChaCha8Rng, nx: usize, ny: usize, nk: usize, linear_gate: bool) -> Model {
    let d = 3;
    let space = ProblemSpace::with_features(nx, ny, nk, random_matrix(rng, nx, d, 1.0)).expect("valid space");
    let policies = (0..nk)
        .map(|_| ExpertPolicy::new(random_matrix(rng, nx, ny, 1.0)).expect("finite logits"))
        .collect();
    let rewards = (0..nk)
        .map(|_| RewardTable::new(random_matrix(rng, nx, ny, 1.0)).expect("finite rewards"))
        .collect();
    let gating = if linear_gate {
        Gating::Linear {
            weight: random_matrix(rng, nk, d, 0.7),
            bias: (0..nk).map(|_| normal(rng, 0.5)).collect(),
        }
    } else {
        Gating::Fixed {
            weights: random_simplex(rng, nk),
        }
    };
    let reference = ReferencePolicy::from_logits(&random_matrix(rng, nx, ny, 0.5)).expect("finite logits");
    Model::new(space, policies, rewards, gating, References::Shared(reference)).expect("valid model")
}

/// Triplets with uniform prompts and uniform distinct pairs.
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(|h| (2.0 + h).powi(3), 1e-5);
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn simplex_maximizer_finds_entropy_optimum() {
        // max Σ q_j c_j + H(q) is softmax(c)
        let c = [0.3, -1.0, 2.0];
        let q = simplex_maximize(3, |q: &[f64]| (0..3).map(|j| c[j] - q[j].ln() - 1.0).collect(), 0.5, 2000);
        let s: f64 = c.iter().map(|v: &f64| v.exp()).sum();
        for j in 0..3 {
            assert!((q[j] - c[j].exp() / s).abs() < 1e-10);
        }
    }

    #[test]
    fn random_simplex_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random_simplex(&mut rng, 5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
