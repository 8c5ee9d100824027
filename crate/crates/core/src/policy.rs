//! Policy/reward correspondence: the closed-form optimal expert policy,
//! rewards recovered from policies, the per-expert MBT loss and the full
//! training objective.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math;
use crate::mbt;
use crate::model::Model;
use crate::types::PreferenceTriplet;

/// Which reward enters the exponent of the optimal policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentVariant {
    /// `exp(r̃_k / β)` with the corrected reward.
    #[default]
    Corrected,
    /// `exp(r_k / β)` with the raw expert reward.
    Raw,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(invalid("beta", alloc::format!("{beta} must be positive")))
    }
}

fn positive_logs(name: &'static str, row: &[f64]) -> Result<Vec<f64>> {
    row.iter()
        .map(|&p| {
            if p > 0.0 && p.is_finite() {
                Ok(math::ln(p))
            } else {
                Err(invalid(name, alloc::format!("probability {p} is not strictly positive")))
            }
        })
        .collect()
}

/// `log Z = log Σ_y π_ref(y) exp(r(y)/β)`, optionally restricted to `support`.
pub fn log_partition(
    reference: &[f64],
    rewards: &[f64],
    beta: f64,
    support: Option<&[usize]>,
) -> Result<f64> {
    check_beta(beta)?;
    check_len(reference.len(), rewards.len())?;
    let log_ref = positive_logs("reference", reference)?;
    let terms: Vec<f64> = match support {
        None => (0..rewards.len())
            .map(|y| log_ref[y] + rewards[y] / beta)
            .collect(),
        Some(ys) => {
            if let Some(&y) = ys.iter().find(|&&y| y >= rewards.len()) {
                return Err(Error::IndexOutOfRange(alloc::format!("response {y}")));
            }
            ys.iter().map(|&y| log_ref[y] + rewards[y] / beta).collect()
        }
    };
    math::log_sum_exp(&terms)
}

/// `π*(y) ∝ π_ref(y) exp(r̃(y)/β)` over the full vocabulary.
pub fn optimal_expert_policy(reference: &[f64], corrected_rewards: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_len(reference.len(), corrected_rewards.len())?;
    let log_ref = positive_logs("reference", reference)?;
    let logits: Vec<f64> = log_ref
        .iter()
        .zip(corrected_rewards)
        .map(|(lr, r)| lr + r / beta)
        .collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("optimal policy logits".into()));
    }
    Ok(math::softmax(&logits))
}

/// `r(y) = β log(π(y) Z / π_ref(y)) + log(q⁽ʳ⁾(y) / w)`.
pub fn reward_from_policy(
    policy: &[f64],
    reference: &[f64],
    q_r: &[f64],
    weight: f64,
    beta: f64,
    log_partition: f64,
) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_len(policy.len(), reference.len())?;
    check_len(policy.len(), q_r.len())?;
    if !(weight > 0.0) || q_r.iter().any(|&q| !(q > 0.0)) {
        return Err(Error::ZeroResponsibility);
    }
    if !log_partition.is_finite() {
        return Err(Error::NonFinite("log partition".into()));
    }
    let log_pi = positive_logs("policy", policy)?;
    let log_ref = positive_logs("reference", reference)?;
    let log_w = math::ln(weight);
    Ok((0..policy.len())
        .map(|y| beta * (log_pi[y] + log_partition - log_ref[y]) + math::ln(q_r[y]) - log_w)
        .collect())
}

/// Inner per-expert objective at one prompt:
/// `Σ_y π(y) (r̃(y) − β log(π(y)/π_ref(y)))`.
pub fn expert_objective(policy: &[f64], reference: &[f64], corrected_rewards: &[f64], beta: f64) -> Result<f64> {
    check_len(policy.len(), reference.len())?;
    check_len(policy.len(), corrected_rewards.len())?;
    let mut total = 0.0;
    for y in 0..policy.len() {
        let p = policy[y];
        if p > 0.0 {
            total += p * (corrected_rewards[y] - beta * (math::ln(p) - math::safe_ln(reference[y])));
        }
    }
    Ok(total)
}

/// Gradient of [`expert_objective`] with respect to the probabilities.
pub fn expert_objective_gradient(
    policy: &[f64],
    reference: &[f64],
    corrected_rewards: &[f64],
    beta: f64,
) -> Vec<f64> {
    (0..policy.len())
        .map(|y| {
            corrected_rewards[y] - beta * (math::safe_ln(policy[y]) - math::safe_ln(reference[y])) - beta
        })
        .collect()
}

/// Log-space pair weights `log A± = β log(π_k/π_ref) + log q⁽ʳ⁾_k` at `(x, y±)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerms {
    pub log_a_plus: f64,
    pub log_a_minus: f64,
}

impl PairTerms {
    /// `ℓ = log(A⁺ / (A⁺ + A⁻))`.
    pub fn utility(&self) -> f64 {
        math::log_sigmoid(self.log_a_plus - self.log_a_minus)
    }

    /// `(A⁺/(A⁺+A⁻), A⁻/(A⁺+A⁻))`.
    pub fn shares(&self) -> (f64, f64) {
        let s = math::sigmoid(self.log_a_plus - self.log_a_minus);
        (s, 1.0 - s)
    }
}

pub fn pair_terms(model: &Model, t: &PreferenceTriplet, k: usize, weights: &[f64], beta: f64) -> Result<PairTerms> {
    let x = t.prompt_id;
    let reference = model.references.for_expert(k);
    let policy = &model.policies[k];
    let side = |y: usize| -> Result<f64> {
        let ratio = policy.log_prob(x, y) - reference.log_prob(x, y);
        let q = model.q_r(x, y, weights)?[k];
        let v = beta * ratio + math::safe_ln(q);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(alloc::format!("log-ratio of expert {k} at ({x}, {y})")))
        }
    };
    Ok(PairTerms {
        log_a_plus: side(t.y_plus)?,
        log_a_minus: side(t.y_minus)?,
    })
}

/// Per-expert utility `ℓ_k` for a triplet.
pub fn expert_utility(model: &Model, t: &PreferenceTriplet, k: usize, beta: f64) -> Result<f64> {
    let w = model.triplet_weights(t)?;
    Ok(pair_terms(model, t, k, &w, beta)?.utility())
}

/// `−q_k log(A⁺/(A⁺+A⁻))`; exactly zero when `q_k = 0`.
pub fn per_expert_mbt_loss(model: &Model, t: &PreferenceTriplet, k: usize, q: &[f64], beta: f64) -> Result<f64> {
    check_len(model.num_experts(), q.len())?;
    if q[k] == 0.0 {
        return Ok(0.0);
    }
    let w = model.triplet_weights(t)?;
    Ok(-q[k] * pair_terms(model, t, k, &w, beta)?.utility())
}

/// Mean over triplets of `Σ_k` [`per_expert_mbt_loss`].
pub fn mbt_loss(model: &Model, data: &[PreferenceTriplet], qs: &[Vec<f64>], beta: f64) -> Result<f64> {
    check_len(data.len(), qs.len())?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (t, q) in data.iter().zip(qs) {
        for k in 0..model.num_experts() {
            total += per_expert_mbt_loss(model, t, k, q, beta)?;
        }
    }
    Ok(total / data.len() as f64)
}

/// Optimal policy row of expert `k` at prompt `x` under the current rewards.
pub fn model_optimal_policy(
    model: &Model,
    k: usize,
    x: usize,
    beta: f64,
    variant: ExponentVariant,
) -> Result<Vec<f64>> {
    let reference = model.references.for_expert(k).probs(x);
    let rewards = match variant {
        ExponentVariant::Corrected => {
            let w = model.weights(x, None)?;
            model.corrected_rewards_row(k, x, &w)?
        }
        ExponentVariant::Raw => model.rewards[k].row(x).to_vec(),
    };
    optimal_expert_policy(&reference, &rewards, beta)
}

/// The objective evaluated in its two equivalent forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    /// Expected mixture reward minus weighted KL to the references.
    pub direct: f64,
    /// Sum over experts of weighted corrected-reward objectives.
    pub decomposed: f64,
}

/// Exact objective by enumeration over prompts (uniform) and responses.
pub fn moedpo_objective(model: &Model, beta: f64) -> Result<ObjectiveValue> {
    check_beta(beta)?;
    let (nx, ny, nk) = (
        model.space.num_prompts,
        model.space.vocab_size,
        model.num_experts(),
    );
    let mut direct = 0.0;
    let mut decomposed = 0.0;
    for x in 0..nx {
        let w = model.weights(x, None)?;
        let probs: Vec<Vec<f64>> = model.policies.iter().map(|p| p.probs(x)).collect();
        for y in 0..ny {
            let mix: f64 = (0..nk).map(|k| w[k] * probs[k][y]).sum();
            direct += mix * mbt::mixture_reward(&w, &model.expert_rewards_at(x, y))?;
        }
        for k in 0..nk {
            if w[k] == 0.0 {
                continue;
            }
            let reference = model.references.for_expert(k).probs(x);
            direct -= beta * w[k] * math::kl_divergence(&probs[k], &reference);
            let corrected = model.corrected_rewards_row(k, x, &w)?;
            decomposed += w[k] * expert_objective(&probs[k], &reference, &corrected, beta)?;
        }
    }
    let value = ObjectiveValue {
        direct: direct / nx as f64,
        decomposed: decomposed / nx as f64,
    };
    if (value.direct - value.decomposed).abs() > 1e-9 {
        return Err(Error::Inconsistent(alloc::format!(
            "objective forms disagree: {} vs {}",
            value.direct,
            value.decomposed
        )));
    }
    Ok(value)
}
