//! Gumbel-Softmax relaxation of the expert assignment.
//!
//! Each triplet gets logits `log α_k = log w_k(x) + log σ_k` and `L` soft
//! samples `z = softmax((log α + g) / τ)`. The loss
//! `−(1/L) Σ_l Σ_k z_k log σ_k + λ (1/L) Σ_l Σ_k z_k log(z_k / w_k)` is
//! differentiated analytically through the sample, with the Gumbel noise held
//! fixed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math;
use crate::model::Model;
use crate::types::{Gating, Matrix, PreferenceTriplet};

/// One relaxed categorical draw.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSample {
    pub z: Vec<f64>,
    pub gumbels: Vec<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(invalid("tau", format!("{tau} must be positive")))
    }
}

/// Standard Gumbel noise `−log(−log U)` with `U` uniform on the open interval.
pub fn draw_gumbels<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let mut u: f64 = rng.gen();
            while u <= 0.0 {
                u = rng.gen();
            }
            -math::ln(-math::ln(u))
        })
        .collect()
}

/// `z = softmax((logits + g) / τ)` for given noise.
pub fn relaxed_from_gumbels(logits: &[f64], gumbels: Vec<f64>, tau: f64) -> Result<RelaxedSample> {
    check_tau(tau)?;
    check_len(logits.len(), gumbels.len())?;
    let scaled: Vec<f64> = logits
        .iter()
        .zip(&gumbels)
        .map(|(a, g)| (a + g) / tau)
        .collect();
    if scaled.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("relaxed logits".into()));
    }
    Ok(RelaxedSample {
        z: math::softmax(&scaled),
        gumbels,
    })
}

pub fn gumbel_softmax_sample<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Result<RelaxedSample> {
    check_tau(tau)?;
    let g = draw_gumbels(logits.len(), rng);
    relaxed_from_gumbels(logits, g, tau)
}

/// `log α_k = log w_k(x) + log σ_k(x, y⁺, y⁻)`.
pub fn assignment_logits(model: &Model, t: &PreferenceTriplet) -> Result<Vec<f64>> {
    let w = model.triplet_weights(t)?;
    let ls = model.log_sigmas(t)?;
    Ok(w.iter().zip(&ls).map(|(&w, s)| math::safe_ln(w) + s).collect())
}

/// `−(1/L) Σ_l Σ_k z_k log σ_k`.
pub fn relaxed_mbt_loss(model: &Model, t: &PreferenceTriplet, samples: &[RelaxedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("samples", "need at least one relaxed sample"));
    }
    let ls = model.log_sigmas(t)?;
    let mut total = 0.0;
    for s in samples {
        check_len(ls.len(), s.z.len())?;
        total -= s.z.iter().zip(&ls).map(|(z, l)| z * l).sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// `(1/L) Σ_l Σ_k z_k log(z_k / w_k)`; `+inf` if some `w_k = 0 < z_k`.
pub fn relaxed_kl_estimate(samples: &[RelaxedSample], weights: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("samples", "need at least one relaxed sample"));
    }
    let mut total = 0.0;
    for s in samples {
        check_len(weights.len(), s.z.len())?;
        total += math::kl_divergence(&s.z, weights);
    }
    Ok(total / samples.len() as f64)
}

/// Temperature annealing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSchedule {
    Constant { tau: f64 },
    /// `τ_start (τ_end/τ_start)^{epoch/max_epoch}`, clamped at `τ_end`.
    Exponential { start: f64, end: f64 },
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule::Exponential {
            start: 1.0,
            end: 0.1,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TauSchedule::Constant { tau } => check_tau(tau),
            TauSchedule::Exponential { start, end } => {
                check_tau(end)?;
                if start.is_finite() && start >= end {
                    Ok(())
                } else {
                    Err(invalid("tau_schedule", format!("need start {start} >= end {end}")))
                }
            }
        }
    }

    pub fn at(&self, epoch: u64, max_epoch: u64) -> f64 {
        match *self {
            TauSchedule::Constant { tau } => tau,
            TauSchedule::Exponential { start, end } => {
                if max_epoch == 0 {
                    return start;
                }
                let frac = epoch as f64 / max_epoch as f64;
                (start * math::powf(end / start, frac)).max(end)
            }
        }
    }
}

/// Settings specific to the relaxed trainer. The sample count and KL weight
/// come from [`Hyperparams`](crate::types::Hyperparams).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    #[serde(default)]
    pub tau: TauSchedule,
    /// Tie rewards to policies, `r_k = β log(π_k/π_ref) + offset_k`.
    #[serde(default)]
    pub tie_rewards: bool,
}

/// Gradient with respect to gating parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum GatingGrad {
    /// With respect to `θ = log w` of a fixed gate, `w = softmax(θ)`.
    Fixed(Vec<f64>),
    Linear { weight: Matrix, bias: Vec<f64> },
}

/// Gradients of the batch-mean relaxed objective.
#[derive(Clone, Debug, PartialEq)]
pub struct McGradient {
    /// Per-expert reward-table gradients (untied mode).
    pub rewards: Vec<Matrix>,
    /// Per-expert policy-logit gradients (tied mode).
    pub policies: Vec<Matrix>,
    pub gating: GatingGrad,
}

/// Offsets that tie rewards to the current policies:
/// `offset_k = r_k − β log(π_k/π_ref)`.
pub fn tie_offsets(model: &Model, beta: f64) -> Vec<Matrix> {
    (0..model.num_experts())
        .map(|k| {
            let mut m = model.rewards[k].values.clone();
            let canon = model.canonical_rewards(k, beta);
            for (a, b) in m.as_mut_slice().iter_mut().zip(canon.as_slice()) {
                *a -= b;
            }
            m
        })
        .collect()
}

fn reward_at(model: &Model, offsets: Option<&[Matrix]>, beta: f64, k: usize, x: usize, y: usize) -> f64 {
    match offsets {
        None => model.rewards[k].get(x, y),
        Some(off) => {
            beta * (model.policies[k].log_prob(x, y) - model.references.for_expert(k).log_prob(x, y))
                + off[k].get(x, y)
        }
    }
}

/// Batch-mean relaxed objective and its analytic gradient, for fixed noise
/// `gumbels[i][l]` (triplet `i`, sample `l`).
pub fn mc_objective(
    batch: &[PreferenceTriplet],
    model: &Model,
    offsets: Option<&[Matrix]>,
    gumbels: &[Vec<Vec<f64>>],
    tau: f64,
    kl_weight: f64,
    beta: f64,
) -> Result<(f64, McGradient)> {
    check_tau(tau)?;
    check_len(batch.len(), gumbels.len())?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (nx, ny, nk) = (
        model.space.num_prompts,
        model.space.vocab_size,
        model.num_experts(),
    );
    let n = batch.len() as f64;
    let mut reward_grads = vec![Matrix::zeros(nx, ny); nk];
    let mut gating = match &model.gating {
        Gating::Fixed { .. } => GatingGrad::Fixed(vec![0.0; nk]),
        Gating::Linear { weight, .. } => GatingGrad::Linear {
            weight: Matrix::zeros(weight.rows(), weight.cols()),
            bias: vec![0.0; nk],
        },
    };
    let mut loss = 0.0;
    for (i, (t, draws)) in batch.iter().zip(gumbels).enumerate() {
        if draws.is_empty() {
            return Err(invalid("samples", "need at least one relaxed sample"));
        }
        let x = t.prompt_id;
        let w = model.triplet_weights(t)?;
        let v: Vec<f64> = w.iter().map(|&w| math::safe_ln(w)).collect();
        let mut s = Vec::with_capacity(nk);
        let mut one_minus_sigma = Vec::with_capacity(nk);
        for k in 0..nk {
            let d = reward_at(model, offsets, beta, k, x, t.y_plus)
                - reward_at(model, offsets, beta, k, x, t.y_minus);
            s.push(math::log_sigmoid(d));
            one_minus_sigma.push(math::sigmoid(-d));
        }
        let logits: Vec<f64> = (0..nk).map(|k| v[k] + s[k]).collect();
        let inv_l = 1.0 / draws.len() as f64;
        let mut ds = vec![0.0; nk];
        let mut dv = vec![0.0; nk];
        for g in draws {
            let sample = relaxed_from_gumbels(&logits, g.clone(), tau)?;
            let z = &sample.z;
            let mut c = vec![0.0; nk];
            for k in 0..nk {
                let lz = math::safe_ln(z[k]);
                loss += inv_l * (-z[k] * s[k] + kl_weight * z[k] * (lz - v[k]));
                c[k] = -s[k] + kl_weight * (lz + 1.0 - v[k]);
            }
            let zc: f64 = z.iter().zip(&c).map(|(a, b)| a * b).sum();
            for k in 0..nk {
                let da = z[k] * (c[k] - zc) / tau;
                ds[k] += inv_l * (-z[k] + da);
                dv[k] += inv_l * (-kl_weight * z[k] + da);
            }
        }
        for k in 0..nk {
            let g = ds[k] * one_minus_sigma[k] / n;
            reward_grads[k].add(x, t.y_plus, g);
            reward_grads[k].add(x, t.y_minus, -g);
        }
        // dv_k/dlogit_j = δ_kj − w_j
        let dv_sum: f64 = dv.iter().sum();
        let dlogit: Vec<f64> = (0..nk).map(|j| (dv[j] - w[j] * dv_sum) / n).collect();
        match &mut gating {
            GatingGrad::Fixed(gr) => {
                for j in 0..nk {
                    gr[j] += dlogit[j];
                }
            }
            GatingGrad::Linear { weight, bias } => {
                let input = model.gate_input(x, t.user_features.as_deref());
                check_len(weight.cols(), input.len())?;
                for j in 0..nk {
                    bias[j] += dlogit[j];
                    for (c, f) in input.iter().enumerate() {
                        weight.add(j, c, dlogit[j] * f);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("relaxed loss at triplet {i}")));
        }
    }
    let policies = match offsets {
        None => Vec::new(),
        Some(_) => (0..nk)
            .map(|k| {
                let mut out = Matrix::zeros(nx, ny);
                for x in 0..nx {
                    let gr = reward_grads[k].row(x);
                    if gr.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    let total: f64 = gr.iter().sum();
                    let probs = model.policies[k].probs(x);
                    for y in 0..ny {
                        out.set(x, y, beta * (gr[y] - probs[y] * total));
                    }
                }
                out
            })
            .collect(),
    };
    Ok((
        loss / n,
        McGradient {
            rewards: reward_grads,
            policies,
            gating,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_is_tempered_softmax() {
        let s = relaxed_from_gumbels(&[1.0, 0.0, -1.0], vec![0.0; 3], 0.5).unwrap();
        let expect = math::softmax(&[2.0, 0.0, -2.0]);
        for k in 0..3 {
            assert!((s.z[k] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_tau_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = gumbel_softmax_sample(&[3.0, 0.0, -2.0, 1.0], 1e6, &mut rng).unwrap();
        assert!(s.z.iter().all(|z| (z - 0.25).abs() < 1e-3));
        assert!(gumbel_softmax_sample(&[0.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn kl_estimate_values() {
        let w = [0.5, 0.5];
        let s = RelaxedSample {
            z: vec![0.8, 0.2],
            gumbels: vec![0.0, 0.0],
        };
        let v = relaxed_kl_estimate(&[s], &w).unwrap();
        assert!((v - (0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln())).abs() < 1e-15);
        let same = RelaxedSample {
            z: w.to_vec(),
            gumbels: vec![0.0, 0.0],
        };
        assert_eq!(relaxed_kl_estimate(&[same], &w).unwrap(), 0.0);
    }

    #[test]
    fn tau_schedule_endpoints() {
        let s = TauSchedule::Exponential {
            start: 1.0,
            end: 0.01,
        };
        assert_eq!(s.at(0, 100), 1.0);
        assert!((s.at(50, 100) - 0.1).abs() < 1e-12);
        assert!((s.at(100, 100) - 0.01).abs() < 1e-15);
        assert_eq!(s.at(500, 100), 0.01);
        assert_eq!(TauSchedule::Constant { tau: 0.3 }.at(7, 10), 0.3);
        assert!(TauSchedule::Exponential { start: 0.1, end: 1.0 }.validate().is_err());
    }
}
