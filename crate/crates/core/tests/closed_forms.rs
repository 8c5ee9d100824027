mod common;

use common::{normal, random_batch, random_model, random_simplex, simplex_maximize};
use moedpo_core::em::{prior_update_mix, reward_update, PartitionMode, WeightUpdate};
use moedpo_core::math;
use moedpo_core::mbt;
use moedpo_core::policy::{
    expert_objective, log_partition, model_optimal_policy, moedpo_objective, optimal_expert_policy,
    reward_from_policy, ExponentVariant,
};
use moedpo_core::regularized::{regularized_objective, regularized_posterior, Lambdas};
use moedpo_core::{ExpertPolicy, Gating, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn optimal_policy_beats_random_perturbations() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ny = 6;
        let reference = random_simplex(&mut rng, ny);
        let corrected: Vec<f64> = (0..ny).map(|_| normal(&mut rng, 2.0)).collect();
        let beta = 0.2 + 0.3 * seed as f64;
        let star = optimal_expert_policy(&reference, &corrected, beta).unwrap();
        let best = expert_objective(&star, &reference, &corrected, beta).unwrap();
        // the maximum equals β log Z
        let log_z = log_partition(&reference, &corrected, beta, None).unwrap();
        assert!((best - beta * log_z).abs() < 1e-10);
        for _ in 0..1000 {
            let logits: Vec<f64> = star
                .iter()
                .map(|p| p.ln() + normal(&mut rng, 0.3))
                .collect();
            let other = math::softmax(&logits);
            assert!(expert_objective(&other, &reference, &corrected, beta).unwrap() <= best + 1e-12);
        }
    }
}

#[test]
fn reward_policy_round_trip() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let mut model = random_model(&mut rng, 3, 5, 3, seed % 2 == 0);
        let beta = 0.5;
        for k in 0..3 {
            let mut logits = model.policies[k].logits.clone();
            for x in 0..3 {
                let p = model_optimal_policy(&model, k, x, beta, ExponentVariant::Corrected).unwrap();
                for y in 0..5 {
                    logits.set(x, y, p[y].ln());
                }
            }
            model.policies[k] = ExpertPolicy::new(logits).unwrap();
        }
        let batch = random_batch(&mut rng, 3, 5, 30);
        let tables = reward_update(&batch, &model, beta, PartitionMode::Exact).unwrap();
        for x in batch.iter().map(|t| t.prompt_id) {
            for k in 0..3 {
                for y in 0..5 {
                    let diff = tables[k].get(x, y) - model.rewards[k].get(x, y);
                    assert!(diff.abs() < 1e-8, "seed {seed} k {k} x {x} y {y}: {diff}");
                }
            }
        }
    }
}

#[test]
fn reward_from_policy_inverts_optimal_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reference = random_simplex(&mut rng, 5);
    let w = random_simplex(&mut rng, 3);
    let rewards: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..3).map(|_| normal(&mut rng, 1.0)).collect())
        .collect();
    let beta = 0.7;
    for k in 0..3 {
        let q: Vec<f64> = rewards
            .iter()
            .map(|r| mbt::q_r_posterior(&w, r).unwrap()[k])
            .collect();
        let corrected: Vec<f64> = (0..5)
            .map(|y| mbt::corrected_reward(rewards[y][k], q[y], w[k]).unwrap())
            .collect();
        let pi = optimal_expert_policy(&reference, &corrected, beta).unwrap();
        let log_z = log_partition(&reference, &corrected, beta, None).unwrap();
        let back = reward_from_policy(&pi, &reference, &q, w[k], beta, log_z).unwrap();
        for y in 0..5 {
            assert!((back[y] - rewards[y][k]).abs() < 1e-10);
        }
    }
}

#[test]
fn single_expert_reduces_to_dpo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_model(&mut rng, 2, 4, 1, false);
    for t in random_batch(&mut rng, 2, 4, 10) {
        let q = model.posterior(&t).unwrap();
        assert_eq!(q.as_ref(), &[1.0]);
        let d = model.rewards[0].get(t.prompt_id, t.y_plus) - model.rewards[0].get(t.prompt_id, t.y_minus);
        let expect = math::log_sigmoid(d);
        assert!((model.log_marginal(&t).unwrap() - expect).abs() < 1e-14);
    }
    for x in 0..2 {
        let w = model.weights(x, None).unwrap();
        let corrected = model.corrected_rewards_row(0, x, &w).unwrap();
        for y in 0..4 {
            assert!((corrected[y] - model.rewards[0].get(x, y)).abs() < 1e-14);
        }
    }
}

#[test]
fn objective_forms_agree() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
        let model = random_model(&mut rng, 3, 4, 3, seed % 2 == 1);
        let v = moedpo_objective(&model, 0.4).unwrap();
        assert!((v.direct - v.decomposed).abs() < 1e-9);
    }
}

#[test]
fn regularized_posterior_matches_simplex_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let k = 2 + case % 4;
        let utilities: Vec<f64> = (0..k).map(|_| -normal(&mut rng, 1.5).abs()).collect();
        let w = random_simplex(&mut rng, k);
        let lambdas = Lambdas {
            ent: if case % 3 == 0 { 0.2 } else { 0.0 },
            conf: if case % 3 == 1 { 0.3 } else { 0.0 },
            kl_unif: 0.1 * (case % 5) as f64,
            kl_w: 0.5 + 0.1 * (case % 7) as f64,
            kl_w_global: 0.0,
        };
        let alpha = lambdas.alpha();
        let closed = regularized_posterior(&utilities, &w, &lambdas).unwrap();
        let grad = |q: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|j| utilities[j] + lambdas.kl_w * w[j].ln() - alpha * (q[j].ln() + 1.0))
                .collect()
        };
        let numeric = simplex_maximize(k, &grad, 0.5 / alpha, 4000);
        let a = regularized_objective(closed.as_ref(), &utilities, &w, &lambdas);
        let b = regularized_objective(&numeric, &utilities, &w, &lambdas);
        assert!(a >= b - 1e-12, "case {case}: closed form {a} below numeric {b}");
        assert!(a - b < 1e-6, "case {case}: gap {}", a - b);
    }
}

#[test]
fn mix_update_minimizes_gating_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..100 {
        let k = 2 + case % 4;
        let qs: Vec<Vec<f64>> = (0..8).map(|_| random_simplex(&mut rng, k)).collect();
        let closed = prior_update_mix(&qs, &vec![1.0 / k as f64; k], WeightUpdate::MinibatchAverage).unwrap();
        let objective = |w: &[f64]| -> f64 {
            qs.iter()
                .map(|q| mbt::gating_kl_objective(q, w).unwrap())
                .sum::<f64>()
                / qs.len() as f64
        };
        // maximize −objective; gradient in w is mean(q)/w
        let grad = |w: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|j| qs.iter().map(|q| q[j]).sum::<f64>() / qs.len() as f64 / w[j])
                .collect()
        };
        let numeric = simplex_maximize(k, &grad, 0.2, 4000);
        let a = objective(&closed);
        let b = objective(&numeric);
        assert!(a <= b + 1e-12);
        assert!(b - a < 1e-6, "case {case}: gap {}", b - a);
    }
}

#[test]
fn exponent_variants_differ_only_when_correction_varies() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = random_model(&mut rng, 2, 4, 1, false);
    let a = model_optimal_policy(&model, 0, 1, 0.5, ExponentVariant::Corrected).unwrap();
    let b = model_optimal_policy(&model, 0, 1, 0.5, ExponentVariant::Raw).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-14);
    }
    let multi: Model = random_model(&mut rng, 2, 4, 3, false);
    assert!(matches!(multi.gating, Gating::Fixed { .. }));
    let a = model_optimal_policy(&multi, 0, 1, 0.5, ExponentVariant::Corrected).unwrap();
    let b = model_optimal_policy(&multi, 0, 1, 0.5, ExponentVariant::Raw).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}
