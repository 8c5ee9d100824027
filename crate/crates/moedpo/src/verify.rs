//! Property battery over freshly randomized instances.
//!
//! Each check draws from its own random stream derived from the battery
//! seed, compares a library result against an independent oracle and reports
//! the largest deviation seen. [`COVERAGE`] maps every stated invariant to
//! the checks exercising it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use moedpo_core::em::{
    e_step, gating_cross_entropy, gating_gradient, policy_gradient, prior_update_mix, reward_update,
    train, Mode, PartitionMode, TrainerConfig, WeightUpdate,
};
use moedpo_core::math;
use moedpo_core::mbt;
use moedpo_core::model::ModelInit;
use moedpo_core::policy::{
    expert_objective, mbt_loss, moedpo_objective, optimal_expert_policy,
    per_expert_mbt_loss,
};
use moedpo_core::regularized::{global_weight_regularizer, regularized_posterior, Lambdas};
use moedpo_core::relax::{
    assignment_logits, draw_gumbels, gumbel_softmax_sample, mc_objective, relaxed_mbt_loss, tie_offsets, GatingGrad,
};
use moedpo_core::synth::{make_ground_truth, sample_triplets, GroundTruthConfig};
use moedpo_core::{ExpertPolicy, Gating, LrSchedule, Model, PreferenceTriplet, References};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Stream};
use crate::eval::evaluate;
use crate::io::Checkpoint;
use crate::oracle::{
    central_difference, normal, random_batch, random_matrix, random_model, random_simplex, rel_err, simplex_maximize,
};

/// Deliberate corruption used to show that the battery isolates faults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// Doubles the exponent of the closed-form expert policy.
    PolicyExponent,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Fault::None),
            "policy-exponent" => Ok(Fault::PolicyExponent),
            other => Err(format!("unknown fault `{other}` (known: none, policy-exponent)")),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fault::None => "none",
            Fault::PolicyExponent => "policy-exponent",
        })
    }
}

impl Fault {
    /// The closed-form expert policy, possibly corrupted.
    pub fn optimal_policy(self, reference: &[f64], corrected: &[f64], beta: f64) -> moedpo_core::Result<Vec<f64>> {
        match self {
            Fault::None => optimal_expert_policy(reference, corrected, beta),
            Fault::PolicyExponent => optimal_expert_policy(reference, corrected, beta / 2.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub module: String,
    pub passed: bool,
    /// Largest deviation from the oracle, in the check's own units.
    pub max_deviation: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub module: String,
    pub property: String,
    pub checks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: Fault,
    pub checks: Vec<CheckResult>,
    pub coverage: Vec<CoverageEntry>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Outcome of one oracle comparison before bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Extra pass condition beyond `max_deviation <= tolerance`.
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    fn within(max_deviation: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            max_deviation,
            tolerance,
            ok: true,
            detail: detail.into(),
        }
    }

    fn failed(detail: impl Into<String>) -> Self {
        Self {
            max_deviation: f64::INFINITY,
            tolerance: 0.0,
            ok: false,
            detail: detail.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.ok && self.max_deviation <= self.tolerance
    }
}

type CheckFn = fn(&mut ChaCha8Rng, Fault) -> Outcome;

/// Every check of the battery: id, module, function.
pub const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("elbo_bound", "core", |r, _| elbo_bound(r, 1000)),
    ("elbo_tightness", "core", |r, _| elbo_tightness(r, 1000)),
    ("variational_identity", "core", |r, _| variational_identity(r, 1000)),
    ("reward_decomposition", "core", |r, _| reward_decomposition(r, 1000)),
    ("closed_form_optimality", "core", |r, f| closed_form_optimality(r, f, 100, 1000)),
    ("reward_round_trip", "core", |r, f| reward_round_trip(r, f, 20)),
    ("single_expert_reduction", "core", |r, _| single_expert_reduction(r, 50)),
    ("simplex_outputs", "core", |r, f| simplex_outputs(r, f, 200)),
    ("shift_invariance", "core", |r, f| shift_invariance(r, f, 200)),
    ("objective_decomposition", "core", |r, _| objective_decomposition(r, 20)),
    ("estep_monotone", "em_trainer", |r, _| estep_monotone(r)),
    ("policy_gradient_fd", "em_trainer", |r, _| policy_gradient_fd(r, 20)),
    ("gating_gradient_fd", "em_trainer", |r, _| gating_gradient_fd(r, 20)),
    ("descent_step_lowers_loss", "em_trainer", |r, _| descent_step(r, 20)),
    ("mix_closed_form", "em_trainer", |r, _| mix_closed_form(r, 100)),
    ("training_determinism", "em_trainer", |r, _| training_determinism(r)),
    ("mix_update_equals_mean_posterior", "em_trainer", |r, _| mix_update_mean(r)),
    ("regularized_closed_form", "regularized", |r, _| regularized_closed_form(r, 100)),
    ("regularized_uniform_limit", "regularized", |r, _| regularized_limit(r, 20)),
    ("regularized_simplex", "regularized", |r, _| regularized_simplex(r, 200)),
    ("relaxed_interior", "mc_relax", |r, _| relaxed_interior(r, 2000)),
    ("gumbel_max_frequencies", "mc_relax", |r, _| gumbel_max_frequencies(r, 100_000)),
    ("relaxed_sharpening", "mc_relax", |r, _| relaxed_sharpening(r, 100_000)),
    ("relaxed_gradient_fd", "mc_relax", |r, _| relaxed_gradient_fd(r, 20)),
    ("relaxed_loss_limit", "mc_relax", |r, _| relaxed_loss_limit(r, 100_000)),
    ("synth_reproducible", "synth_data", |r, _| synth_reproducible(r)),
    ("synth_preference_frequencies", "synth_data", |r, _| synth_preference_frequencies(r, 10_000)),
    ("synth_label_independence", "synth_data", |r, _| synth_label_independence(r, 20_000)),
    ("checkpoint_round_trip", "cli", |r, _| checkpoint_round_trip(r)),
    ("command_determinism", "cli", |r, _| command_determinism(r)),
];

/// Invariant → checks.
pub const COVERAGE: &[(&str, &str, &[&str])] = &[
    ("core", "ELBO bound", &["elbo_bound"]),
    ("core", "ELBO tightness", &["elbo_tightness"]),
    ("core", "variational identity", &["variational_identity"]),
    ("core", "reward decomposition equality", &["reward_decomposition"]),
    ("core", "closed-form policy optimality", &["closed_form_optimality"]),
    ("core", "reward/policy round trip", &["reward_round_trip"]),
    ("core", "single-expert reduction", &["single_expert_reduction"]),
    ("core", "simplex outputs", &["simplex_outputs"]),
    ("core", "shift invariance", &["shift_invariance"]),
    ("core", "objective decomposition", &["objective_decomposition"]),
    ("em_trainer", "E-step monotonicity", &["estep_monotone"]),
    ("em_trainer", "gradient correctness", &["policy_gradient_fd", "gating_gradient_fd"]),
    ("em_trainer", "gradient-loss consistency", &["descent_step_lowers_loss"]),
    ("em_trainer", "mixture closed-form optimality", &["mix_closed_form"]),
    ("em_trainer", "determinism", &["training_determinism"]),
    ("em_trainer", "fixed-gate full-batch update", &["mix_update_equals_mean_posterior"]),
    ("regularized", "closed form vs numeric maximizer", &["regularized_closed_form"]),
    ("regularized", "uniform limit", &["regularized_uniform_limit"]),
    ("regularized", "valid strictly positive simplex", &["regularized_simplex"]),
    ("mc_relax", "interior samples", &["relaxed_interior"]),
    ("mc_relax", "Gumbel-max frequencies", &["gumbel_max_frequencies"]),
    ("mc_relax", "sharpening", &["relaxed_sharpening"]),
    ("mc_relax", "frozen-noise gradient", &["relaxed_gradient_fd"]),
    ("mc_relax", "low-temperature loss limit", &["relaxed_loss_limit"]),
    ("synth_data", "reproducibility", &["synth_reproducible"]),
    ("synth_data", "preference frequencies", &["synth_preference_frequencies"]),
    ("synth_data", "no label leakage", &["synth_label_independence"]),
    ("cli", "command determinism", &["command_determinism", "training_determinism"]),
    ("cli", "checkpoint round trip", &["checkpoint_round_trip"]),
    ("cli", "coverage manifest", &["coverage_manifest"]),
];

pub fn coverage() -> Vec<CoverageEntry> {
    COVERAGE
        .iter()
        .map(|(m, p, c)| CoverageEntry {
            module: m.to_string(),
            property: p.to_string(),
            checks: c.iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

fn coverage_self_check() -> Outcome {
    let known: Vec<&str> = CHECKS.iter().map(|c| c.0).chain(["coverage_manifest"]).collect();
    let dangling: Vec<&str> = COVERAGE
        .iter()
        .flat_map(|c| c.2.iter().copied())
        .filter(|id| !known.contains(id))
        .collect();
    let uncovered: Vec<&str> = CHECKS
        .iter()
        .map(|c| c.0)
        .filter(|id| !COVERAGE.iter().any(|c| c.2.contains(id)))
        .collect();
    if dangling.is_empty() && uncovered.is_empty() {
        Outcome::within(0.0, 0.0, format!("{} properties covered", COVERAGE.len()))
    } else {
        Outcome::failed(format!("dangling {dangling:?}, uncovered {uncovered:?}"))
    }
}

/// Runs one check by id with its own stream.
pub fn run_check(id: &str, seed: u64, fault: Fault) -> Option<CheckResult> {
    let index = CHECKS.iter().position(|c| c.0 == id)?;
    Some(run_indexed(index, seed, fault))
}

fn run_indexed(index: usize, seed: u64, fault: Fault) -> CheckResult {
    let (id, module, f) = CHECKS[index];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Verify));
    rng.set_stream(index as u64 + 1);
    let start = Instant::now();
    let outcome = f(&mut rng, fault);
    CheckResult {
        id: id.into(),
        module: module.into(),
        passed: outcome.passed(),
        max_deviation: outcome.max_deviation,
        tolerance: outcome.tolerance,
        detail: outcome.detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_battery(seed: u64, fault: Fault) -> VerifyReport {
    let mut checks: Vec<CheckResult> = (0..CHECKS.len()).map(|i| run_indexed(i, seed, fault)).collect();
    let manifest = coverage_self_check();
    checks.push(CheckResult {
        id: "coverage_manifest".into(),
        module: "cli".into(),
        passed: manifest.passed(),
        max_deviation: manifest.max_deviation,
        tolerance: manifest.tolerance,
        detail: manifest.detail,
        seconds: 0.0,
    });
    VerifyReport {
        seed,
        fault,
        checks,
        coverage: coverage(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng, max_k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = rng.gen_range(1..=max_k);
    let w = random_simplex(rng, k);
    let sigma = (0..k).map(|_| rng.gen_range(1e-3..1.0 - 1e-3)).collect();
    let q = random_simplex(rng, k);
    (w, sigma, q)
}

pub fn elbo_bound(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n {
        let (w, sigma, q) = random_instance(rng, 5);
        let log_p = math::ln(mbt::mbt_marginal(&w, &sigma).unwrap());
        worst = worst.max(mbt::elbo(&q, &w, &sigma).unwrap() - log_p);
    }
    Outcome::within(worst.max(0.0), 1e-10, format!("max elbo - log p = {worst:.3e} over {n}"))
}

pub fn elbo_tightness(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (w, sigma, _) = random_instance(rng, 5);
        let log_p = math::ln(mbt::mbt_marginal(&w, &sigma).unwrap());
        let post = mbt::mbt_posterior(&w, &sigma).unwrap();
        worst = worst.max((mbt::elbo(post.as_ref(), &w, &sigma).unwrap() - log_p).abs());
    }
    Outcome::within(worst, 1e-10, format!("{n} instances"))
}

pub fn variational_identity(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(1..=6);
        let a: Vec<f64> = (0..k).map(|_| normal(rng, 2.0).exp()).collect();
        let q = random_simplex(rng, k);
        let total: f64 = a.iter().sum();
        let normalized: Vec<f64> = a.iter().map(|v| v / total).collect();
        let rhs = mbt::elbo(&q, &a, &vec![1.0; k]).unwrap() + math::kl_divergence(&q, &normalized);
        worst = worst.max((total.ln() - rhs).abs());
    }
    Outcome::within(worst, 1e-10, format!("{n} instances"))
}

pub fn reward_decomposition(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..n {
        let k = rng.gen_range(1..=5);
        let w = random_simplex(rng, k);
        let r: Vec<f64> = (0..k).map(|_| normal(rng, 2.0)).collect();
        let p: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let d = mbt::reward_decomposition(&w, &r, &p).unwrap();
        worst = worst.max((d.total() - mbt::mixture_reward(&w, &r).unwrap()).abs());
        min_kl = min_kl.min(d.kl_term);
    }
    let mut o = Outcome::within(worst, 1e-10, format!("min KL {min_kl:.3e} over {n}"));
    o.ok = min_kl >= -1e-12;
    o
}

pub fn closed_form_optimality(rng: &mut ChaCha8Rng, fault: Fault, instances: usize, perturbations: usize) -> Outcome {
    let mut worst_gain = f64::NEG_INFINITY;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..instances {
        let ny = rng.gen_range(2..=8);
        let reference = random_simplex(rng, ny);
        let corrected: Vec<f64> = (0..ny).map(|_| normal(rng, 1.5)).collect();
        let beta = rng.gen_range(0.1..2.0);
        let star = fault.optimal_policy(&reference, &corrected, beta).unwrap();
        let best = expert_objective(&star, &reference, &corrected, beta).unwrap();
        for j in 0..perturbations {
            let other = if j % 2 == 0 {
                let logits: Vec<f64> = (0..ny).map(|_| normal(rng, 1.0)).collect();
                math::softmax(&logits)
            } else {
                let logits: Vec<f64> = star.iter().map(|p| p.ln() + normal(rng, 0.05)).collect();
                math::softmax(&logits)
            };
            worst_gain = worst_gain.max(expert_objective(&other, &reference, &corrected, beta).unwrap() - best);
        }
        let g: Vec<f64> = (0..ny)
            .map(|y| corrected[y] - beta * (star[y].ln() - reference[y].ln()) - beta)
            .collect();
        let mean = g.iter().sum::<f64>() / ny as f64;
        let norm = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(norm);
    }
    let mut o = Outcome::within(
        worst_grad,
        1e-6,
        format!("projected gradient norm {worst_grad:.3e}; best perturbation gain {worst_gain:.3e}"),
    );
    o.ok = worst_gain <= 1e-12;
    o
}

/// Max over rows of `max − min` of `a − b`: deviation up to a per-row constant.
fn row_spread(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo
}

pub fn reward_round_trip(rng: &mut ChaCha8Rng, fault: Fault, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (nx, ny, nk) = (3, rng.gen_range(2..=8), rng.gen_range(1..=4));
        let mut model = random_model(rng, nx, ny, nk, i % 2 == 0);
        let beta = rng.gen_range(0.2..2.0);
        for k in 0..nk {
            let mut logits = model.policies[k].logits.clone();
            for x in 0..nx {
                let w = model.weights(x, None).unwrap();
                let corrected = model.corrected_rewards_row(k, x, &w).unwrap();
                let reference = model.references.for_expert(k).probs(x);
                let p = fault.optimal_policy(&reference, &corrected, beta).unwrap();
                for y in 0..ny {
                    logits.set(x, y, p[y].ln());
                }
            }
            model.policies[k] = ExpertPolicy::new(logits).unwrap();
        }
        let batch = random_batch(rng, nx, ny, 40);
        let tables = reward_update(&batch, &model, beta, PartitionMode::Exact).unwrap();
        for x in 0..nx {
            if !batch.iter().any(|t| t.prompt_id == x) {
                continue;
            }
            for k in 0..nk {
                worst = worst.max(row_spread(tables[k].row(x), model.rewards[k].row(x)));
            }
        }
    }
    Outcome::within(worst, 1e-8, format!("{n} models, deviation modulo per-(x,k) constant"))
}

pub fn single_expert_reduction(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..n {
        let (nx, ny) = (2, rng.gen_range(2..=6));
        let model = random_model(rng, nx, ny, 1, false);
        let beta = rng.gen_range(0.1..2.0);
        let reference = model.references.for_expert(0);
        for t in random_batch(rng, nx, ny, 10) {
            let x = t.prompt_id;
            let ratio = |y: usize| model.policies[0].log_prob(x, y) - reference.log_prob(x, y);
            let dpo = -math::log_sigmoid(beta * (ratio(t.y_plus) - ratio(t.y_minus)));
            worst = worst.max((per_expert_mbt_loss(&model, &t, 0, &[1.0], beta).unwrap() - dpo).abs());
            ok &= model.posterior(&t).unwrap().as_ref() == [1.0];
        }
        for x in 0..nx {
            let w = model.weights(x, None).unwrap();
            let c = model.corrected_rewards_row(0, x, &w).unwrap();
            for y in 0..ny {
                worst = worst.max((c[y] - model.rewards[0].get(x, y)).abs());
            }
        }
        let batch = random_batch(rng, nx, ny, 20);
        let tables = reward_update(&batch, &model, beta, PartitionMode::Exact).unwrap();
        let canonical = model.canonical_rewards(0, beta);
        for x in 0..nx {
            if batch.iter().any(|t| t.prompt_id == x) {
                worst = worst.max(row_spread(tables[0].row(x), canonical.row(x)));
            }
        }
    }
    let mut o = Outcome::within(worst, 1e-10, format!("{n} single-expert models"));
    o.ok = ok;
    o
}

fn simplex_deviation(p: &[f64]) -> f64 {
    let neg = p.iter().cloned().fold(0.0f64, |m, v| m.max(-v));
    neg.max((p.iter().sum::<f64>() - 1.0).abs())
}

pub fn simplex_outputs(rng: &mut ChaCha8Rng, fault: Fault, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(1..=6);
        let w = random_simplex(rng, k);
        let sigma: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
        let r: Vec<f64> = (0..k).map(|_| normal(rng, 5.0)).collect();
        let p: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
        worst = worst.max(simplex_deviation(mbt::mbt_posterior(&w, &sigma).unwrap().as_ref()));
        worst = worst.max(simplex_deviation(mbt::q_r_posterior(&w, &r).unwrap().as_ref()));
        worst = worst.max(simplex_deviation(mbt::q_pi_posterior(&w, &p).unwrap().as_ref()));
        worst = worst.max(simplex_deviation(&math::softmax(&r)));
        let ny = rng.gen_range(2..=8);
        let reference = random_simplex(rng, ny);
        let corrected: Vec<f64> = (0..ny).map(|_| normal(rng, 3.0)).collect();
        worst = worst.max(simplex_deviation(&fault.optimal_policy(&reference, &corrected, 0.3).unwrap()));
        let l: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
        let lambdas = Lambdas {
            kl_unif: rng.gen_range(0.0..2.0),
            ..Lambdas::default()
        };
        worst = worst.max(simplex_deviation(regularized_posterior(&l, &w, &lambdas).unwrap().as_ref()));
    }
    Outcome::within(worst, 1e-12, format!("{n} draws per operation"))
}

pub fn shift_invariance(rng: &mut ChaCha8Rng, fault: Fault, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(1..=5);
        let ny = rng.gen_range(2..=6);
        let w = random_simplex(rng, k);
        // rewards[y][k] at one prompt
        let rewards: Vec<Vec<f64>> = (0..ny).map(|_| (0..k).map(|_| normal(rng, 2.0)).collect()).collect();
        let c = normal(rng, 5.0);
        let shifted: Vec<Vec<f64>> = rewards.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        for y in 0..ny {
            let m0 = mbt::mixture_reward(&w, &rewards[y]).unwrap();
            let m1 = mbt::mixture_reward(&w, &shifted[y]).unwrap();
            worst = worst.max((m1 - m0 - c).abs());
            let q0 = mbt::q_r_posterior(&w, &rewards[y]).unwrap();
            let q1 = mbt::q_r_posterior(&w, &shifted[y]).unwrap();
            for j in 0..k {
                worst = worst.max((q0[j] - q1[j]).abs());
            }
        }
        let (a, b) = (0, 1);
        let s0: Vec<f64> = (0..k).map(|j| mbt::log_bt_sigma(rewards[a][j], rewards[b][j]).unwrap()).collect();
        let s1: Vec<f64> = (0..k).map(|j| mbt::log_bt_sigma(shifted[a][j], shifted[b][j]).unwrap()).collect();
        let p0 = mbt::mbt_posterior_log(&w, &s0).unwrap();
        let p1 = mbt::mbt_posterior_log(&w, &s1).unwrap();
        for j in 0..k {
            worst = worst.max((p0[j] - p1[j]).abs());
        }
        let reference = random_simplex(rng, ny);
        let beta = rng.gen_range(0.2..2.0);
        for j in 0..k {
            let corr = |rs: &[Vec<f64>]| -> Vec<f64> {
                rs.iter()
                    .map(|r| {
                        let q = mbt::q_r_posterior(&w, r).unwrap();
                        mbt::corrected_reward(r[j], q[j], w[j]).unwrap()
                    })
                    .collect()
            };
            let pi0 = fault.optimal_policy(&reference, &corr(&rewards), beta).unwrap();
            let pi1 = fault.optimal_policy(&reference, &corr(&shifted), beta).unwrap();
            for y in 0..ny {
                worst = worst.max((pi0[y] - pi1[y]).abs());
            }
        }
    }
    Outcome::within(worst, 1e-12, format!("{n} shifted instances"))
}

pub fn objective_decomposition(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (ny, nk) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
        let model = random_model(rng, 3, ny, nk, i % 2 == 0);
        match moedpo_objective(&model, rng.gen_range(0.1..2.0)) {
            Ok(v) => worst = worst.max((v.direct - v.decomposed).abs()),
            Err(e) => return Outcome::failed(e.to_string()),
        }
    }
    Outcome::within(worst, 1e-9, format!("{n} models"))
}

fn small_synthetic(rng: &mut ChaCha8Rng, nk: usize, count: usize) -> (moedpo_core::synth::GroundTruth, Vec<PreferenceTriplet>) {
    let gt = make_ground_truth(&GroundTruthConfig::new(nk, 6, 5, 2.0, rng.gen())).unwrap();
    let data = sample_triplets(&gt, count, rng).unwrap();
    (gt, data)
}

fn init_model(rng: &mut ChaCha8Rng, gt: &moedpo_core::synth::GroundTruth, gating: Gating, beta: f64) -> Model {
    Model::initialize(
        gt.space().unwrap(),
        References::Shared(gt.reference.clone()),
        gating,
        &ModelInit::default(),
        beta,
        rng,
    )
    .unwrap()
}

pub fn estep_monotone(rng: &mut ChaCha8Rng) -> Outcome {
    let (gt, data) = small_synthetic(rng, 2, 300);
    let model = init_model(rng, &gt, Gating::uniform(2), 1.0);
    let config = TrainerConfig {
        full_batch: true,
        epochs: 10,
        hyper: moedpo_core::Hyperparams {
            beta: 1.0,
            lr: LrSchedule::Constant { eta: 10.0 },
            ..Default::default()
        },
        ..Default::default()
    };
    let state = match train(&data, model, &config) {
        Ok(s) => s,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let worst = state
        .estep_checks
        .iter()
        .map(|c| c.before - c.after)
        .fold(f64::NEG_INFINITY, f64::max);
    Outcome::within(
        worst.max(0.0),
        1e-9,
        format!("{} E-steps, max decrease {worst:.3e}", state.estep_checks.len()),
    )
}

fn batch_loss(model: &Model, batch: &[PreferenceTriplet], qs: &[Vec<f64>], k: usize, beta: f64) -> f64 {
    batch
        .iter()
        .zip(qs)
        .map(|(t, q)| per_expert_mbt_loss(model, t, k, q, beta).unwrap())
        .sum::<f64>()
        / batch.len() as f64
}

fn with_logit(model: &Model, k: usize, x: usize, y: usize, h: f64) -> Model {
    let mut m = model.clone();
    let mut logits = m.policies[k].logits.clone();
    logits.add(x, y, h);
    m.policies[k] = ExpertPolicy::new(logits).unwrap();
    m
}

fn posteriors(batch: &[PreferenceTriplet], model: &Model) -> Vec<Vec<f64>> {
    e_step(batch, model).unwrap().into_iter().map(|q| q.into_inner()).collect()
}

pub fn policy_gradient_fd(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (nx, ny, nk) = (3, 5, 2);
        let model = random_model(rng, nx, ny, nk, i % 2 == 0);
        let batch = random_batch(rng, nx, ny, 12);
        let qs = posteriors(&batch, &model);
        let beta = rng.gen_range(0.2..2.0);
        for k in 0..nk {
            let g = policy_gradient(&batch, k, &model, &qs, beta).unwrap();
            for x in 0..nx {
                for y in 0..ny {
                    let fd = central_difference(|h| batch_loss(&with_logit(&model, k, x, y, h), &batch, &qs, k, beta), 1e-5);
                    if g.get(x, y).abs().max(fd.abs()) > 1e-7 {
                        worst = worst.max(rel_err(g.get(x, y), fd));
                    }
                }
            }
        }
    }
    Outcome::within(worst, 1e-4, format!("{n} instances, ε = 1e-5"))
}

fn gate_loss(model: &Model, batch: &[PreferenceTriplet], qs: &[Vec<f64>], kl_global: f64) -> f64 {
    let prompts: Vec<usize> = batch.iter().map(|t| t.prompt_id).collect();
    gating_cross_entropy(batch, qs, model).unwrap() + kl_global * global_weight_regularizer(model, &prompts).unwrap()
}

fn with_gate(model: &Model, row: usize, col: Option<usize>, h: f64) -> Model {
    let mut m = model.clone();
    if let Gating::Linear { weight, bias } = &mut m.gating {
        match col {
            Some(c) => weight.add(row, c, h),
            None => bias[row] += h,
        }
    }
    m
}

pub fn gating_gradient_fd(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let model = random_model(rng, 4, 4, 3, true);
        let batch = random_batch(rng, 4, 4, 15);
        let qs = posteriors(&batch, &model);
        let kl_global = if i % 2 == 0 { 0.0 } else { rng.gen_range(0.0..1.0) };
        let (gw, gb) = gating_gradient(&batch, &qs, &model, kl_global).unwrap();
        for j in 0..gw.rows() {
            for c in 0..gw.cols() {
                let fd = central_difference(|h| gate_loss(&with_gate(&model, j, Some(c), h), &batch, &qs, kl_global), 1e-5);
                worst = worst.max(rel_err(gw.get(j, c), fd));
            }
            let fd = central_difference(|h| gate_loss(&with_gate(&model, j, None, h), &batch, &qs, kl_global), 1e-5);
            worst = worst.max(rel_err(gb[j], fd));
        }
    }
    Outcome::within(worst, 1e-4, format!("{n} instances, ε = 1e-5"))
}

pub fn descent_step(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut failures = 0;
    for _ in 0..n {
        let model = random_model(rng, 2, 4, 3, false);
        let batch = random_batch(rng, 2, 4, 10);
        let qs = posteriors(&batch, &model);
        let beta = rng.gen_range(0.2..2.0);
        let before = mbt_loss(&model, &batch, &qs, beta).unwrap();
        let mut stepped = model.clone();
        for k in 0..3 {
            let g = policy_gradient(&batch, k, &model, &qs, beta).unwrap();
            let mut logits = stepped.policies[k].logits.clone();
            for (p, d) in logits.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *p -= 1e-6 * d;
            }
            stepped.policies[k] = ExpertPolicy::new(logits).unwrap();
        }
        if mbt_loss(&stepped, &batch, &qs, beta).unwrap() >= before {
            failures += 1;
        }
    }
    Outcome::within(failures as f64, 0.0, format!("{failures} of {n} steps did not lower the loss"))
}

pub fn mix_closed_form(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(2..=5);
        let m = rng.gen_range(1..=12);
        let qs: Vec<Vec<f64>> = (0..m).map(|_| random_simplex(rng, k)).collect();
        let closed = prior_update_mix(&qs, &vec![1.0 / k as f64; k], WeightUpdate::MinibatchAverage).unwrap();
        // minimizing the mean of KL(q || w) over w maximizes Σ_j mean_j log w_j
        let mean: Vec<f64> = (0..k).map(|j| qs.iter().map(|q| q[j]).sum::<f64>() / m as f64).collect();
        let numeric = simplex_maximize(k, |w: &[f64]| (0..k).map(|j| mean[j] / w[j]).collect(), 0.2, 4000);
        for j in 0..k {
            worst = worst.max((closed[j] - numeric[j]).abs());
        }
    }
    Outcome::within(worst, 1e-6, format!("{n} instances vs numeric minimizer of the gating KL"))
}

fn determinism_config(algorithm: moedpo_core::em::Algorithm, mode: Mode) -> TrainerConfig {
    TrainerConfig {
        mode,
        algorithm,
        epochs: 3,
        seed: 17,
        hyper: moedpo_core::Hyperparams {
            beta: 0.5,
            batch_size: 32,
            mc_samples: 2,
            lr: LrSchedule::Constant { eta: 1.0 },
            ..Default::default()
        },
        gating_lr: LrSchedule::Constant { eta: 0.5 },
        ..Default::default()
    }
}

pub fn training_determinism(rng: &mut ChaCha8Rng) -> Outcome {
    use moedpo_core::em::Algorithm;
    let (gt, data) = small_synthetic(rng, 2, 200);
    for (algorithm, mode) in [(Algorithm::Em, Mode::Mix), (Algorithm::Mc, Mode::Moe), (Algorithm::EmRegularized, Mode::Mix)] {
        let gating = match mode {
            Mode::Mix => Gating::uniform(2),
            Mode::Moe => Gating::Linear {
                weight: random_matrix(rng, 2, gt.features.cols(), 0.1),
                bias: vec![0.0; 2],
            },
        };
        let model = init_model(rng, &gt, gating, 0.5);
        let config = determinism_config(algorithm, mode);
        let a = train(&data, model.clone(), &config);
        let b = train(&data, model, &config);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let ja = serde_json::to_string(&a).unwrap();
                let jb = serde_json::to_string(&b).unwrap();
                if ja != jb {
                    return Outcome::failed(format!("{algorithm:?}/{mode:?} runs differ"));
                }
            }
            (Err(e), _) | (_, Err(e)) => return Outcome::failed(e.to_string()),
        }
    }
    Outcome::within(0.0, 0.0, "identical serialized states for em, mc and em-regularized")
}

pub fn mix_update_mean(rng: &mut ChaCha8Rng) -> Outcome {
    let (gt, data) = small_synthetic(rng, 3, 200);
    let model = init_model(rng, &gt, Gating::uniform(3), 0.5);
    let expected: Vec<f64> = {
        let qs = posteriors(&data, &model);
        (0..3).map(|k| qs.iter().map(|q| q[k]).sum::<f64>() / qs.len() as f64).collect()
    };
    let config = TrainerConfig {
        trainable_policies: false,
        full_batch: true,
        epochs: 1,
        ..Default::default()
    };
    let state = match train(&data, model, &config) {
        Ok(s) => s,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let Gating::Fixed { weights } = &state.model.gating else {
        return Outcome::failed("gate changed kind");
    };
    let worst = weights
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(simplex_deviation(weights), f64::max);
    Outcome::within(worst, 1e-12, "weights vs mean initial posterior")
}

pub fn regularized_closed_form(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let k = rng.gen_range(2..=6);
        let l: Vec<f64> = (0..k).map(|_| -normal(rng, 2.0).abs()).collect();
        let w = random_simplex(rng, k);
        let target_alpha = (rng.gen_range(0.1f64.ln()..10.0f64.ln())).exp();
        let kl_w = rng.gen_range(0.0..target_alpha);
        let rest = target_alpha - kl_w;
        let lambdas = match i % 3 {
            0 => Lambdas { kl_w, kl_unif: rest, ..Lambdas::ZERO },
            1 => Lambdas { kl_w, conf: rest, ..Lambdas::ZERO },
            _ => {
                let ent = rng.gen_range(0.0..kl_w.max(1e-3));
                Lambdas { kl_w, kl_unif: rest + ent, ent, ..Lambdas::ZERO }
            }
        };
        let alpha = lambdas.alpha();
        let closed = regularized_posterior(&l, &w, &lambdas).unwrap();
        let grad = |q: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|j| l[j] + lambdas.kl_w * w[j].ln() - alpha * (q[j].ln() + 1.0))
                .collect()
        };
        let numeric = simplex_maximize(k, grad, 0.5 / alpha, 300);
        for j in 0..k {
            worst = worst.max((closed[j] - numeric[j]).abs());
        }
    }
    Outcome::within(worst, 1e-6, format!("{n} instances, α in [0.1, 10]"))
}

pub fn regularized_limit(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(2..=6);
        let l: Vec<f64> = (0..k).map(|_| -normal(rng, 3.0).abs()).collect();
        let w = random_simplex(rng, k);
        let lambdas = Lambdas {
            kl_unif: 1e6,
            ..Lambdas::default()
        };
        let q = regularized_posterior(&l, &w, &lambdas).unwrap();
        worst = worst.max(math::total_variation(q.as_ref(), &vec![1.0 / k as f64; k]));
    }
    Outcome::within(worst, 1e-3, "TV to uniform at λ_KL_unif = 1e6")
}

pub fn regularized_simplex(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..n {
        let k = rng.gen_range(1..=6);
        let l: Vec<f64> = (0..k).map(|_| -normal(rng, 3.0).abs()).collect();
        let w = random_simplex(rng, k);
        let lambdas = Lambdas {
            ent: rng.gen_range(0.0..0.5),
            kl_unif: rng.gen_range(0.0..2.0),
            kl_w: rng.gen_range(0.6..2.0),
            ..Lambdas::ZERO
        };
        let q = regularized_posterior(&l, &w, &lambdas).unwrap();
        worst = worst.max(simplex_deviation(q.as_ref()));
        ok &= q.iter().all(|&v| v > 0.0);
    }
    let mut o = Outcome::within(worst, 1e-12, format!("{n} instances"));
    o.ok = ok;
    o
}

pub fn relaxed_interior(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for i in 0..n {
        let k = rng.gen_range(2..=5);
        let logits: Vec<f64> = (0..k).map(|_| normal(rng, 1.0)).collect();
        let tau = [0.1, 0.5, 1.0, 5.0][i % 4];
        let s = gumbel_softmax_sample(&logits, tau, rng).unwrap();
        worst = worst.max(simplex_deviation(&s.z));
        ok &= s.z.iter().all(|&z| z > 0.0);
    }
    let mut o = Outcome::within(worst, 1e-12, format!("{n} samples at τ in {{0.1, 0.5, 1, 5}}"));
    o.ok = ok;
    o
}

pub fn gumbel_max_frequencies(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let logits = [0.5, -1.0, 1.2, 0.0];
    let p = math::softmax(&logits);
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let g = draw_gumbels(4, rng);
        let perturbed: Vec<f64> = logits.iter().zip(&g).map(|(a, b)| a + b).collect();
        counts[math::argmax(&perturbed)] += 1;
    }
    let worst = (0..4)
        .map(|k| {
            let se = (p[k] * (1.0 - p[k]) / n as f64).sqrt();
            (counts[k] as f64 / n as f64 - p[k]).abs() / se
        })
        .fold(0.0, f64::max);
    Outcome::within(worst, 3.0, format!("largest deviation in standard errors over {n} draws"))
}

pub fn relaxed_sharpening(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let logits = [1.0, 0.0, -1.0];
    let mut total = 0.0;
    for _ in 0..n {
        let s = gumbel_softmax_sample(&logits, 0.01, rng).unwrap();
        total += s.z.iter().cloned().fold(0.0, f64::max);
    }
    let mean = total / n as f64;
    Outcome::within(0.99 - mean, 0.0, format!("mean max coordinate {mean:.5} at τ = 0.01"))
}

pub fn relaxed_gradient_fd(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let tied = i % 2 == 1;
        let linear = i % 4 < 2;
        let model = random_model(rng, 3, 4, 2, linear);
        let batch = random_batch(rng, 3, 4, 6);
        let gumbels: Vec<Vec<Vec<f64>>> = (0..batch.len())
            .map(|_| (0..4).map(|_| draw_gumbels(2, rng)).collect())
            .collect();
        let tau = rng.gen_range(0.3..2.0);
        let kl = rng.gen_range(0.0..1.0);
        let beta = rng.gen_range(0.3..1.5);
        let offsets = tied.then(|| tie_offsets(&model, beta));
        let loss = |m: &Model| mc_objective(&batch, m, offsets.as_deref(), &gumbels, tau, kl, beta).unwrap().0;
        let (_, grad) = mc_objective(&batch, &model, offsets.as_deref(), &gumbels, tau, kl, beta).unwrap();
        let mut check = |a: f64, fd: f64| {
            if a.abs().max(fd.abs()) > 1e-7 {
                worst = worst.max(rel_err(a, fd));
            }
        };
        for k in 0..2 {
            for x in 0..3 {
                for y in 0..4 {
                    if tied {
                        check(grad.policies[k].get(x, y), central_difference(|h| loss(&with_logit(&model, k, x, y, h)), 1e-5));
                    } else {
                        let fd = central_difference(
                            |h| {
                                let mut m = model.clone();
                                m.rewards[k].values.add(x, y, h);
                                loss(&m)
                            },
                            1e-5,
                        );
                        check(grad.rewards[k].get(x, y), fd);
                    }
                }
            }
        }
        match (&model.gating, &grad.gating) {
            (Gating::Fixed { weights }, GatingGrad::Fixed(g)) => {
                for j in 0..2 {
                    let fd = central_difference(
                        |h| {
                            let mut theta: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
                            theta[j] += h;
                            let mut m = model.clone();
                            m.gating = Gating::Fixed {
                                weights: math::softmax(&theta),
                            };
                            loss(&m)
                        },
                        1e-5,
                    );
                    check(g[j], fd);
                }
            }
            (Gating::Linear { weight, .. }, GatingGrad::Linear { weight: gw, bias: gb }) => {
                for j in 0..weight.rows() {
                    for c in 0..weight.cols() {
                        check(gw.get(j, c), central_difference(|h| loss(&with_gate(&model, j, Some(c), h)), 1e-5));
                    }
                    check(gb[j], central_difference(|h| loss(&with_gate(&model, j, None, h)), 1e-5));
                }
            }
            _ => return Outcome::failed("gradient kind does not match the gate"),
        }
    }
    Outcome::within(worst, 1e-3, format!("{n} instances with frozen noise"))
}

pub fn relaxed_loss_limit(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let model = random_model(rng, 2, 4, 3, false);
    let t = PreferenceTriplet::new(1, 2, 0);
    let logits = assignment_logits(&model, &t).unwrap();
    let p = math::softmax(&logits);
    let log_s = model.log_sigmas(&t).unwrap();
    let target: f64 = p.iter().zip(&log_s).map(|(p, l)| -p * l).sum();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let s = gumbel_softmax_sample(&logits, 0.01, rng).unwrap();
        let v = relaxed_mbt_loss(&model, &t, std::slice::from_ref(&s)).unwrap();
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    Outcome::within(
        (mean - target).abs() / se,
        3.0,
        format!("relaxed loss {mean:.5} vs exact-weighted {target:.5} (τ = 0.01, L = {n})"),
    )
}

pub fn synth_reproducible(rng: &mut ChaCha8Rng) -> Outcome {
    let cfg = GroundTruthConfig::new(3, 8, 6, 1.5, rng.gen());
    let sample_seed: u64 = rng.gen();
    let draw = || {
        let gt = make_ground_truth(&cfg).unwrap();
        let data = sample_triplets(&gt, 500, &mut ChaCha8Rng::seed_from_u64(sample_seed)).unwrap();
        serde_json::to_string(&(gt, data)).unwrap()
    };
    if draw() == draw() {
        Outcome::within(0.0, 0.0, "identical ground truth and triplets")
    } else {
        Outcome::failed("regeneration differs")
    }
}

pub fn synth_preference_frequencies(rng: &mut ChaCha8Rng, per_pair: usize) -> Outcome {
    let mut cfg = GroundTruthConfig::new(2, 1, 3, 1.0, rng.gen());
    cfg.own_mass = 0.7;
    let gt = make_ground_truth(&cfg).unwrap();
    let data = sample_triplets(&gt, per_pair * 3, rng).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let on_pair: Vec<&PreferenceTriplet> = data
            .iter()
            .filter(|t| (t.y_plus, t.y_minus) == (a, b) || (t.y_plus, t.y_minus) == (b, a))
            .collect();
        let m = on_pair.len() as f64;
        let wins = on_pair.iter().filter(|t| t.y_plus == a).count() as f64;
        let p = mbt::mbt_marginal(gt.weights(0), &gt.sigmas(&PreferenceTriplet::new(0, a, b)).unwrap()).unwrap();
        let se = (p * (1.0 - p) / m).sqrt();
        worst = worst.max((wins / m - p).abs() / se);
    }
    Outcome::within(worst, 3.0, format!("largest deviation in standard errors, ~{per_pair} draws per pair"))
}

pub fn synth_label_independence(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    // Given the label, prompts follow w*_z(x)/Σ_x w*_z(x) and pairs stay uniform.
    let gt = make_ground_truth(&GroundTruthConfig::new(2, 4, 3, 2.0, rng.gen())).unwrap();
    let data = sample_triplets(&gt, n, rng).unwrap();
    let mut worst: f64 = 0.0;
    for z in 0..2 {
        let with_z: Vec<&PreferenceTriplet> = data.iter().filter(|t| t.source_label == Some(z)).collect();
        let m = with_z.len() as f64;
        let mass: f64 = (0..4).map(|x| gt.weights(x)[z]).sum();
        for x in 0..4 {
            let p = gt.weights(x)[z] / mass;
            let f = with_z.iter().filter(|t| t.prompt_id == x).count() as f64 / m;
            worst = worst.max((f - p).abs() / (p * (1.0 - p) / m).sqrt());
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let p = 1.0 / 3.0;
            let f = with_z
                .iter()
                .filter(|t| t.y_plus.min(t.y_minus) == a && t.y_plus.max(t.y_minus) == b)
                .count() as f64
                / m;
            worst = worst.max((f - p).abs() / (p * (1.0 - p) / m).sqrt());
        }
    }
    Outcome::within(worst, 4.0, format!("largest deviation in standard errors over {n} triplets"))
}

pub fn checkpoint_round_trip(rng: &mut ChaCha8Rng) -> Outcome {
    let (gt, data) = small_synthetic(rng, 2, 150);
    let model = init_model(rng, &gt, Gating::uniform(2), 0.5);
    let trainer = determinism_config(moedpo_core::em::Algorithm::Em, Mode::Mix);
    let state = match train(&data, model, &trainer) {
        Ok(s) => s,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let ck = Checkpoint::new(crate::config::Config::default(), trainer, state);
    let text = serde_json::to_string_pretty(&ck).unwrap();
    let back: Checkpoint = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let a = evaluate(&ck.state.model, &data, Some(&gt), None).unwrap();
    let b = evaluate(&back.state.model, &data, Some(&gt), None).unwrap();
    if back == ck && a == b {
        Outcome::within(0.0, 0.0, "state and evaluation identical after reload")
    } else {
        Outcome::failed("reloaded checkpoint differs")
    }
}

pub fn command_determinism(rng: &mut ChaCha8Rng) -> Outcome {
    let mut cfg = crate::config::Config::default();
    cfg.seed = rng.gen();
    cfg.data.num_prompts = 6;
    cfg.data.vocab_size = 5;
    cfg.data.num_experts = 2;
    cfg.data.num_triplets = 200;
    cfg.train.epochs = 2;
    let run = || -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), crate::error::CliError> {
        let g = crate::commands::generate_in_memory(&cfg)?;
        let ck = crate::commands::train_in_memory(&cfg, &g.triplets, Some(&g.ground_truth.features), Some(&g.ground_truth))?;
        let metrics = crate::io::metrics_csv(&ck.state.metrics, ck.state.model.num_experts())?;
        Ok((g.dataset_bytes()?, serde_json::to_vec_pretty(&ck)?, metrics))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) if a == b => Outcome::within(0.0, 0.0, "byte-identical dataset, checkpoint and metrics"),
        (Ok(_), Ok(_)) => Outcome::failed("outputs differ between runs"),
        (Err(e), _) | (_, Err(e)) => Outcome::failed(e.to_string()),
    }
}
