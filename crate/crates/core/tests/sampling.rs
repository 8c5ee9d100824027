use moedpo_core::math;
use moedpo_core::relax::{draw_gumbels, gumbel_softmax_sample};
use moedpo_core::synth::{exact_bayes_posterior, make_ground_truth, sample_triplets, GroundTruthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gumbel_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let g = draw_gumbels(1, &mut rng)[0];
        sum += g;
        sq += g * g;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let euler = 0.577_215_664_901_532_9;
    let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
    // standard errors are about 0.004 and 0.015
    assert!((mean - euler).abs() < 0.02, "mean {mean}");
    assert!((var - pi2_6).abs() < 0.08, "variance {var}");
}

#[test]
fn gumbel_max_frequencies_match_softmax() {
    let logits = [0.5, -1.0, 1.2, 0.0];
    let expect = math::softmax(&logits);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let s = gumbel_softmax_sample(&logits, 0.01, &mut rng).unwrap();
        counts[math::argmax(&s.z)] += 1;
    }
    for k in 0..4 {
        let p = expect[k];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let f = counts[k] as f64 / n as f64;
        assert!((f - p).abs() < 4.0 * se, "k {k}: {f} vs {p}");
    }
}

#[test]
fn low_temperature_samples_are_nearly_one_hot() {
    let logits = [1.0, 0.0, -0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..n {
        let s = gumbel_softmax_sample(&logits, 0.01, &mut rng).unwrap();
        total += s.z.iter().cloned().fold(0.0, f64::max);
    }
    assert!(total / n as f64 > 0.99);
}

#[test]
fn source_counts_follow_gating_marginal() {
    let gt = make_ground_truth(&GroundTruthConfig::new(3, 30, 8, 2.0, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5000;
    let data = sample_triplets(&gt, n, &mut rng).unwrap();
    let mut counts = [0usize; 3];
    for t in &data {
        counts[t.source_label.unwrap()] += 1;
    }
    // prompts are drawn uniformly, so the source marginal is the mean gate row
    for k in 0..3 {
        let p: f64 = (0..30).map(|x| gt.weights(x)[k]).sum::<f64>() / 30.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[k] as f64 - n as f64 * p).abs() < 3.0 * sd, "k {k}: {counts:?}");
    }
}

#[test]
fn bayes_posterior_favors_own_group() {
    let gt = make_ground_truth(&GroundTruthConfig::new(3, 30, 8, 3.0, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = sample_triplets(&gt, 3000, &mut rng).unwrap();
    let mut total = 0.0;
    for t in &data {
        let q = exact_bayes_posterior(&gt, t).unwrap();
        total += q[gt.groups[t.prompt_id]];
    }
    assert!(total / data.len() as f64 > 0.6);
}

#[test]
fn regeneration_is_deterministic() {
    let cfg = GroundTruthConfig::new(2, 10, 5, 1.0, 99);
    assert_eq!(make_ground_truth(&cfg).unwrap(), make_ground_truth(&cfg).unwrap());
}
