//! Mixture-of-Bradley–Terry likelihoods, posteriors and reward mixtures.
//!
//! All functions operate on a single prompt (and response pair where
//! relevant) and take the expert axis as a slice of length `K`.

use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::math::{self, log_sum_exp};
use crate::types::Responsibilities;

/// Bradley–Terry preference probability `e^{r⁺} / (e^{r⁺} + e^{r⁻})`.
pub fn bt_sigma(r_plus: f64, r_minus: f64) -> Result<f64> {
    if !r_plus.is_finite() || !r_minus.is_finite() {
        return Err(Error::NonFinite("bt_sigma reward".into()));
    }
    Ok(math::sigmoid(r_plus - r_minus))
}

/// `log bt_sigma(r⁺, r⁻)`, accurate in both tails.
pub fn log_bt_sigma(r_plus: f64, r_minus: f64) -> Result<f64> {
    if !r_plus.is_finite() || !r_minus.is_finite() {
        return Err(Error::NonFinite("bt_sigma reward".into()));
    }
    Ok(math::log_sigmoid(r_plus - r_minus))
}

/// Marginal preference probability `Σ_k w_k σ_k`.
pub fn mbt_marginal(weights: &[f64], sigmas: &[f64]) -> Result<f64> {
    check_len(weights.len(), sigmas.len())?;
    if weights.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(weights.iter().zip(sigmas).map(|(w, s)| w * s).sum())
}

/// Exact expert posterior `q_k ∝ w_k σ_k`; the ELBO is tight here.
pub fn mbt_posterior(weights: &[f64], sigmas: &[f64]) -> Result<Responsibilities> {
    check_len(weights.len(), sigmas.len())?;
    if weights.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let unnormalized: Vec<f64> = weights.iter().zip(sigmas).map(|(w, s)| w * s).collect();
    Ok(Responsibilities::from_normalized(math::normalize(
        &unnormalized,
    )?))
}

/// Same posterior from log-likelihoods; robust when every `σ_k` underflows.
pub fn mbt_posterior_log(weights: &[f64], log_sigmas: &[f64]) -> Result<Responsibilities> {
    check_len(weights.len(), log_sigmas.len())?;
    let logs: Vec<f64> = weights
        .iter()
        .zip(log_sigmas)
        .map(|(&w, &ls)| if w > 0.0 { math::ln(w) + ls } else { f64::NEG_INFINITY })
        .collect();
    Ok(Responsibilities::from_normalized(math::normalize_log(&logs)?))
}

/// Evidence lower bound `Σ_k q_k log(w_k σ_k / q_k)`.
///
/// Uses `0 log 0 = 0`; returns `-inf` when `q_k > 0` but `w_k σ_k = 0`.
pub fn elbo(q: &[f64], weights: &[f64], sigmas: &[f64]) -> Result<f64> {
    check_len(q.len(), weights.len())?;
    check_len(q.len(), sigmas.len())?;
    let mut total = 0.0;
    for k in 0..q.len() {
        let mass = weights[k] * sigmas[k];
        total -= math::rel_entr(q[k], mass);
    }
    Ok(total)
}

/// ELBO from log-likelihoods, avoiding the product underflow of [`elbo`].
pub fn elbo_log(q: &[f64], weights: &[f64], log_sigmas: &[f64]) -> Result<f64> {
    check_len(q.len(), weights.len())?;
    check_len(q.len(), log_sigmas.len())?;
    let mut total = 0.0;
    for k in 0..q.len() {
        if q[k] <= 0.0 {
            continue;
        }
        if weights[k] <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += q[k] * (math::ln(weights[k]) + log_sigmas[k] - math::ln(q[k]));
    }
    Ok(total)
}

fn log_weighted_terms(weights: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    check_len(weights.len(), values.len())?;
    if weights.iter().all(|&w| w <= 0.0) {
        return Err(Error::NotASimplex("all mixture weights are zero".into()));
    }
    Ok(weights
        .iter()
        .zip(values)
        .map(|(&w, &v)| if w > 0.0 { math::ln(w) + v } else { f64::NEG_INFINITY })
        .collect())
}

/// Soft-max mixture reward `log Σ_k w_k exp(r_k)`.
pub fn mixture_reward(weights: &[f64], expert_rewards: &[f64]) -> Result<f64> {
    log_sum_exp(&log_weighted_terms(weights, expert_rewards)?)
}

/// Reward-induced responsibilities `q⁽ʳ⁾_k ∝ w_k exp(r_k)`.
pub fn q_r_posterior(weights: &[f64], expert_rewards: &[f64]) -> Result<Responsibilities> {
    let logs = log_weighted_terms(weights, expert_rewards)?;
    Ok(Responsibilities::from_normalized(math::normalize_log(&logs)?))
}

/// Policy-induced responsibilities `q⁽π⁾_k ∝ w_k π_k(y|x)`.
pub fn q_pi_posterior(weights: &[f64], expert_probs: &[f64]) -> Result<Responsibilities> {
    check_len(weights.len(), expert_probs.len())?;
    let unnormalized: Vec<f64> = weights
        .iter()
        .zip(expert_probs)
        .map(|(w, p)| w * p)
        .collect();
    Ok(Responsibilities::from_normalized(math::normalize(
        &unnormalized,
    )?))
}

/// Corrected reward `r̃_k = r_k − log(q⁽ʳ⁾_k / w_k)`.
pub fn corrected_reward(reward: f64, q_r: f64, weight: f64) -> Result<f64> {
    if !(q_r > 0.0) || !(weight > 0.0) {
        return Err(Error::ZeroResponsibility);
    }
    Ok(reward - (math::ln(q_r) - math::ln(weight)))
}

/// Two-term split of the mixture reward under `q⁽π⁾`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardDecomposition {
    /// `Σ_k q⁽π⁾_k [r_k + log w_k − log q⁽π⁾_k]`
    pub expectation_term: f64,
    /// `KL(q⁽π⁾ ‖ q⁽ʳ⁾)`
    pub kl_term: f64,
}

impl RewardDecomposition {
    pub fn total(&self) -> f64 {
        self.expectation_term + self.kl_term
    }
}

/// Exact decomposition of [`mixture_reward`] into an expectation under the
/// policy posterior plus its KL divergence from the reward posterior.
pub fn reward_decomposition(
    weights: &[f64],
    expert_rewards: &[f64],
    expert_probs: &[f64],
) -> Result<RewardDecomposition> {
    check_len(weights.len(), expert_rewards.len())?;
    let q_pi = q_pi_posterior(weights, expert_probs)?;
    let q_r = q_r_posterior(weights, expert_rewards)?;
    let mut expectation_term = 0.0;
    for k in 0..weights.len() {
        if q_pi[k] > 0.0 {
            expectation_term +=
                q_pi[k] * (expert_rewards[k] + math::ln(weights[k]) - math::ln(q_pi[k]));
        }
    }
    Ok(RewardDecomposition {
        expectation_term,
        kl_term: math::kl_divergence(&q_pi, &q_r),
    })
}

/// Gating objective for one triplet: `KL(q ‖ w)`; `+inf` if `q` has mass
/// where `w` has none.
pub fn gating_kl_objective(q: &[f64], weights: &[f64]) -> Result<f64> {
    check_len(q.len(), weights.len())?;
    Ok(math::kl_divergence(q, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn bt_sigma_examples() {
        assert_eq!(bt_sigma(1.7, 1.7).unwrap(), 0.5);
        assert!(close(bt_sigma(math::ln(3.0), 0.0).unwrap(), 0.75, 1e-15));
        // 1 / (1 + e^{-1})
        assert!(close(bt_sigma(1.0, 0.0).unwrap(), 0.731_058_578_630_004_9, 1e-15));
        assert!(bt_sigma(f64::NAN, 0.0).is_err());
        assert!(bt_sigma(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn marginal_examples() {
        assert!(close(mbt_marginal(&[0.5, 0.5], &[0.8, 0.6]).unwrap(), 0.7, 1e-15));
        assert_eq!(mbt_marginal(&[1.0], &[0.3]).unwrap(), 0.3);
        assert_eq!(mbt_marginal(&[0.0, 1.0, 0.0], &[0.1, 0.4, 0.9]).unwrap(), 0.4);
        assert!(matches!(
            mbt_marginal(&[1.0], &[0.2, 0.3]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn posterior_examples() {
        let q = mbt_posterior(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
        assert!(close(q[0], 0.8, 1e-15) && close(q[1], 0.2, 1e-15));
        let q = mbt_posterior(&[0.75, 0.25], &[0.2, 0.6]).unwrap();
        assert!(close(q[0], 0.5, 1e-15) && close(q[1], 0.5, 1e-15));
        assert_eq!(&*mbt_posterior(&[1.0], &[0.37]).unwrap(), &[1.0]);
        assert_eq!(
            mbt_posterior(&[1.0, 0.0], &[0.0, 0.5]),
            Err(Error::DegeneratePosterior)
        );
    }

    #[test]
    fn elbo_examples() {
        let (w, s) = ([0.5, 0.5], [0.8, 0.6]);
        let q = mbt_posterior(&w, &s).unwrap();
        assert!(close(elbo(&q, &w, &s).unwrap(), math::ln(0.7), 1e-15));
        assert!(close(elbo(&[1.0], &[1.0], &[0.3]).unwrap(), math::ln(0.3), 1e-15));
        let v = elbo(&[1.0, 0.0], &w, &s).unwrap();
        assert!(close(v, math::ln(0.4), 1e-15));
        assert!(close(v, -0.916_290_731_874_155, 1e-12));
        assert!(v <= math::ln(0.7));
        assert_eq!(elbo(&[0.5, 0.5], &[1.0, 0.0], &s).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn elbo_log_matches_elbo() {
        let (q, w, s) = ([0.2, 0.5, 0.3], [0.1, 0.6, 0.3], [0.9, 0.4, 0.25]);
        let ls: Vec<f64> = s.iter().map(|&v| math::ln(v)).collect();
        assert!(close(elbo(&q, &w, &s).unwrap(), elbo_log(&q, &w, &ls).unwrap(), 1e-15));
    }

    #[test]
    fn mixture_reward_examples() {
        assert!(close(mixture_reward(&[0.2, 0.3, 0.5], &[1.5; 3]).unwrap(), 1.5, 1e-15));
        assert_eq!(mixture_reward(&[0.0, 1.0], &[9.0, -2.0]).unwrap(), -2.0);
        let v = mixture_reward(&[0.5, 0.5], &[0.0, math::ln(3.0)]).unwrap();
        assert!(close(v, LN_2, 1e-15));
        assert!(mixture_reward(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn q_r_examples() {
        let w = [0.1, 0.7, 0.2];
        let q = q_r_posterior(&w, &[2.0; 3]).unwrap();
        for k in 0..3 {
            assert!(close(q[k], w[k], 1e-15));
        }
        let q = q_r_posterior(&[0.5, 0.5], &[math::ln(3.0), 0.0]).unwrap();
        assert!(close(q[0], 0.75, 1e-15));
        assert_eq!(&*q_r_posterior(&[0.0, 1.0], &[5.0, -5.0]).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn q_pi_examples() {
        let w = [0.3, 0.7];
        let q = q_pi_posterior(&w, &[0.2, 0.2]).unwrap();
        assert!(close(q[0], 0.3, 1e-15));
        assert_eq!(&*q_pi_posterior(&[1.0], &[0.01]).unwrap(), &[1.0]);
        let q = q_pi_posterior(&[0.5, 0.5], &[0.4, 0.1]).unwrap();
        assert!(close(q[0], 0.8, 1e-15) && close(q[1], 0.2, 1e-15));
        assert_eq!(
            q_pi_posterior(&[1.0, 0.0], &[0.0, 0.3]),
            Err(Error::DegeneratePosterior)
        );
    }

    #[test]
    fn corrected_reward_examples() {
        assert_eq!(corrected_reward(1.25, 0.3, 0.3).unwrap(), 1.25);
        assert!(close(corrected_reward(0.0, 0.5, 0.25).unwrap(), -LN_2, 1e-15));
        assert_eq!(corrected_reward(-0.5, 1.0, 1.0).unwrap(), -0.5);
        assert_eq!(corrected_reward(1.0, 0.0, 0.5), Err(Error::ZeroResponsibility));
        assert_eq!(corrected_reward(1.0, 0.5, 0.0), Err(Error::ZeroResponsibility));
    }

    #[test]
    fn decomposition_matched_posteriors() {
        let w = [0.25, 0.75];
        let d = reward_decomposition(&w, &[0.4, 0.4], &[0.3, 0.3]).unwrap();
        assert!(d.kl_term.abs() < 1e-15);
        assert!(close(d.total(), mixture_reward(&w, &[0.4, 0.4]).unwrap(), 1e-14));
        let d = reward_decomposition(&[1.0], &[2.5], &[0.1]).unwrap();
        assert_eq!(d.kl_term, 0.0);
        assert!(close(d.expectation_term, 2.5, 1e-15));
    }

    #[test]
    fn gating_kl_examples() {
        let q = [0.2, 0.3, 0.5];
        assert_eq!(gating_kl_objective(&q, &q).unwrap(), 0.0);
        assert!(close(gating_kl_objective(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), LN_2, 1e-15));
        assert_eq!(gating_kl_objective(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
    }
}
