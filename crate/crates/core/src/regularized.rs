//! Regularized responsibilities and phase-scheduled regularizer weights.
//!
//! The regularized posterior is `q_k ∝ w_k^{λ_KL_w/α} exp(ℓ_k/α)` with the
//! effective temperature `α = λ_conf − λ_ent + λ_KL_unif + λ_KL_w`.
//! Setting `λ_KL_w = 1` and every other weight to zero gives `α = 1` and
//! `q ∝ w exp(ℓ)`, which is the plain posterior whenever `ℓ_k = log σ_k`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math;
use crate::model::Model;
use crate::policy;
use crate::types::{PreferenceTriplet, Responsibilities};

/// Regularizer weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    #[serde(default)]
    pub ent: f64,
    #[serde(default)]
    pub conf: f64,
    #[serde(default)]
    pub kl_unif: f64,
    #[serde(default)]
    pub kl_w: f64,
    #[serde(default)]
    pub kl_w_global: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            ent: 0.0,
            conf: 0.0,
            kl_unif: 0.0,
            kl_w: 1.0,
            kl_w_global: 0.0,
        }
    }
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        ent: 0.0,
        conf: 0.0,
        kl_unif: 0.0,
        kl_w: 0.0,
        kl_w_global: 0.0,
    };

    /// Effective temperature `α`.
    pub fn alpha(&self) -> f64 {
        self.conf - self.ent + self.kl_unif + self.kl_w
    }

    pub fn validate_nonnegative(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ent", self.ent),
            ("lambda_conf", self.conf),
            ("lambda_kl_unif", self.kl_unif),
            ("lambda_kl_w", self.kl_w),
            ("lambda_kl_w_global", self.kl_w_global),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("{v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Nonnegativity, positive `α`, and at most one entropy term unless
    /// `allow_dual_entropy` is set.
    pub fn validate(&self, allow_dual_entropy: bool) -> Result<()> {
        self.validate_nonnegative()?;
        if !allow_dual_entropy && self.ent > 0.0 && self.conf > 0.0 {
            return Err(invalid(
                "lambdas",
                "both lambda_ent and lambda_conf are nonzero",
            ));
        }
        let alpha = self.alpha();
        if !(alpha > 0.0) {
            return Err(Error::IllPosedRegularization { alpha });
        }
        Ok(())
    }
}

/// `q_k ∝ w_k^{λ_KL_w/α} exp(ℓ_k/α)`.
pub fn regularized_posterior(utilities: &[f64], weights: &[f64], lambdas: &Lambdas) -> Result<Responsibilities> {
    check_len(weights.len(), utilities.len())?;
    let alpha = lambdas.alpha();
    if !(alpha > 0.0) {
        return Err(Error::IllPosedRegularization { alpha });
    }
    let logs: Vec<f64> = utilities
        .iter()
        .zip(weights)
        .map(|(&l, &w)| {
            let prior = if lambdas.kl_w == 0.0 {
                0.0
            } else if w > 0.0 {
                lambdas.kl_w * math::ln(w)
            } else {
                f64::NEG_INFINITY
            };
            (prior + l) / alpha
        })
        .collect();
    Ok(Responsibilities::from_normalized(math::normalize_log(&logs)?))
}

/// The objective maximized by [`regularized_posterior`], up to constants:
/// `Σ q ℓ + λ_KL_w Σ q log w + α H(q)`.
pub fn regularized_objective(q: &[f64], utilities: &[f64], weights: &[f64], lambdas: &Lambdas) -> f64 {
    let alpha = lambdas.alpha();
    let mut total = alpha * math::entropy(q);
    for k in 0..q.len() {
        if q[k] > 0.0 {
            total += q[k] * (utilities[k] + lambdas.kl_w * math::safe_ln(weights[k]));
        }
    }
    total
}

/// `KL(w ‖ Uniform(K))`.
pub fn kl_to_uniform(weights: &[f64]) -> f64 {
    let k = weights.len() as f64;
    math::ln(k) - math::entropy(weights)
}

/// Gradient of `KL(softmax(a) ‖ U)` with respect to the logits `a`:
/// `w_j (log w_j − Σ_i w_i log w_i)`.
pub fn kl_to_uniform_logit_grad(weights: &[f64]) -> Vec<f64> {
    let neg_h: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * math::ln(w))
        .sum();
    weights
        .iter()
        .map(|&w| if w > 0.0 { w * (math::ln(w) - neg_h) } else { 0.0 })
        .collect()
}

/// `E_x KL(w(x) ‖ U)` over the given prompts.
pub fn global_weight_regularizer(model: &Model, prompts: &[usize]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &x in prompts {
        total += kl_to_uniform(&model.weights(x, None)?);
    }
    Ok(total / prompts.len() as f64)
}

/// One entry of a [`RegSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub start_epoch: u64,
    pub lambdas: Lambdas,
    /// Overrides the run's β while the phase is active.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// Piecewise-constant regularizer schedule, sorted by `start_epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSchedule {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub allow_dual_entropy: bool,
}

impl RegSchedule {
    pub fn constant(lambdas: Lambdas) -> Self {
        Self {
            phases: alloc::vec![Phase {
                start_epoch: 0,
                lambdas,
                beta: None,
            }],
            allow_dual_entropy: false,
        }
    }

    /// Exploration, specialization and stabilization phases starting at
    /// epochs `0`, `E/3` and `2E/3`.
    pub fn three_phase(epochs: u64) -> Self {
        let exploration = Lambdas {
            ent: 0.0,
            conf: 0.0,
            kl_unif: 0.5,
            kl_w: 1.0,
            kl_w_global: 0.1,
        };
        let specialization = Lambdas {
            ent: 0.0,
            conf: 0.5,
            kl_unif: 0.0,
            kl_w: 1.0,
            kl_w_global: 0.0,
        };
        let stabilization = Lambdas {
            ent: 0.0,
            conf: 0.0,
            kl_unif: 0.0,
            kl_w: 1.0,
            kl_w_global: 0.01,
        };
        Self {
            phases: alloc::vec![
                Phase {
                    start_epoch: 0,
                    lambdas: exploration,
                    beta: None,
                },
                Phase {
                    start_epoch: epochs / 3,
                    lambdas: specialization,
                    beta: None,
                },
                Phase {
                    start_epoch: 2 * epochs / 3,
                    lambdas: stabilization,
                    beta: None,
                },
            ],
            allow_dual_entropy: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .phases
            .first()
            .ok_or_else(|| invalid("schedule", "no phases"))?;
        if first.start_epoch != 0 {
            return Err(invalid("schedule", "first phase must start at epoch 0"));
        }
        for pair in self.phases.windows(2) {
            if pair[1].start_epoch < pair[0].start_epoch {
                return Err(invalid("schedule", "phases out of order"));
            }
        }
        for p in &self.phases {
            p.lambdas.validate(self.allow_dual_entropy)?;
            if let Some(b) = p.beta {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(invalid("beta", format!("{b} must be positive")));
                }
            }
        }
        Ok(())
    }

    /// The phase in force at `epoch`: the last one with `start_epoch <= epoch`.
    pub fn active(&self, epoch: u64) -> &Phase {
        self.phases
            .iter()
            .rev()
            .find(|p| p.start_epoch <= epoch)
            .unwrap_or(&self.phases[0])
    }
}

/// Regularized E-step with the phase active at `epoch`.
pub fn scheduled_e_step(
    batch: &[PreferenceTriplet],
    model: &Model,
    schedule: &RegSchedule,
    epoch: u64,
    beta: f64,
) -> Result<Vec<Responsibilities>> {
    let phase = schedule.active(epoch);
    let beta = phase.beta.unwrap_or(beta);
    batch
        .iter()
        .map(|t| {
            let w = model.triplet_weights(t)?;
            let utilities = (0..model.num_experts())
                .map(|k| Ok(policy::pair_terms(model, t, k, &w, beta)?.utility()))
                .collect::<Result<Vec<f64>>>()?;
            regularized_posterior(&utilities, &w, &phase.lambdas)
        })
        .collect()
}
