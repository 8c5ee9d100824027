//! The full mixture model: expert policies, reward tables, gating and
//! references over one [`ProblemSpace`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math;
use crate::mbt;
use crate::types::{
    ExpertPolicy, Gating, Matrix, PreferenceTriplet, ProblemSpace, References, Responsibilities,
    RewardTable,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub space: ProblemSpace,
    pub policies: Vec<ExpertPolicy>,
    pub rewards: Vec<RewardTable>,
    pub gating: Gating,
    pub references: References,
}

/// Symmetry-breaking initialization of the expert policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelInit {
    /// Standard deviation of the Gaussian logit perturbation around the reference.
    pub policy_noise: f64,
    /// Draw one perturbation per (expert, response) and reuse it for every prompt.
    pub tied_across_prompts: bool,
}

impl Default for ModelInit {
    fn default() -> Self {
        Self {
            policy_noise: 0.5,
            tied_across_prompts: true,
        }
    }
}

impl Model {
    pub fn new(
        space: ProblemSpace,
        policies: Vec<ExpertPolicy>,
        rewards: Vec<RewardTable>,
        gating: Gating,
        references: References,
    ) -> Result<Self> {
        let model = Self {
            space,
            policies,
            rewards,
            gating,
            references,
        };
        model.validate()?;
        Ok(model)
    }

    /// Policies perturbed around their references; rewards set to the
    /// canonical transform `β log(π_k / π_ref(k))`.
    pub fn initialize<R: Rng + ?Sized>(
        space: ProblemSpace,
        references: References,
        gating: Gating,
        init: &ModelInit,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (nx, ny, nk) = (space.num_prompts, space.vocab_size, space.num_experts);
        let mut policies = Vec::with_capacity(nk);
        for k in 0..nk {
            let reference = references.for_expert(k);
            let tied: Vec<f64> = (0..ny)
                .map(|_| init.policy_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut logits = Matrix::zeros(nx, ny);
            for x in 0..nx {
                for y in 0..ny {
                    let noise = if init.tied_across_prompts {
                        tied[y]
                    } else {
                        init.policy_noise * rng.sample::<f64, _>(StandardNormal)
                    };
                    logits.set(x, y, reference.log_prob(x, y) + noise);
                }
            }
            policies.push(ExpertPolicy::new(logits)?);
        }
        let mut model = Self {
            space,
            policies,
            rewards: Vec::new(),
            gating,
            references,
        };
        model.rewards = (0..nk)
            .map(|k| RewardTable {
                values: model.canonical_rewards(k, beta),
            })
            .collect();
        model.validate()?;
        Ok(model)
    }

    /// `β log(π_k(y|x) / π_ref(k)(y|x))` over the whole grid.
    pub fn canonical_rewards(&self, k: usize, beta: f64) -> Matrix {
        let (nx, ny) = (self.space.num_prompts, self.space.vocab_size);
        let reference = self.references.for_expert(k);
        let mut out = Matrix::zeros(nx, ny);
        for x in 0..nx {
            let lp = self.policies[k].log_probs(x);
            for y in 0..ny {
                out.set(x, y, beta * (lp[y] - reference.log_prob(x, y)));
            }
        }
        out
    }

    pub fn num_experts(&self) -> usize {
        self.space.num_experts
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nk) = (
            self.space.num_prompts,
            self.space.vocab_size,
            self.space.num_experts,
        );
        check_len(nk, self.policies.len())?;
        check_len(nk, self.rewards.len())?;
        check_len(nk, self.gating.num_experts())?;
        self.gating.validate()?;
        for (k, p) in self.policies.iter().enumerate() {
            if p.logits.rows() != nx || p.logits.cols() != ny {
                return Err(Error::InvalidDimensions(format!("policy {k} shape")));
            }
        }
        for (k, r) in self.rewards.iter().enumerate() {
            if r.values.rows() != nx || r.values.cols() != ny {
                return Err(Error::InvalidDimensions(format!("reward table {k} shape")));
            }
        }
        let refs: Vec<_> = match &self.references {
            References::Shared(r) => alloc::vec![r],
            References::PerExpert(rs) => {
                check_len(nk, rs.len())?;
                rs.iter().collect()
            }
        };
        for r in refs {
            if r.num_prompts() != nx || r.vocab_size() != ny {
                return Err(Error::InvalidDimensions("reference shape".into()));
            }
        }
        if let Some(d) = self.gating.input_dim() {
            if d < self.space.feature_dim() {
                return Err(Error::InvalidDimensions(format!(
                    "gate input dim {d} smaller than feature dim {}",
                    self.space.feature_dim()
                )));
            }
        }
        self.check_finite()
    }

    /// Reports the first non-finite parameter, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (k, p) in self.policies.iter().enumerate() {
            if !p.logits.is_finite() {
                return Err(Error::NonFinite(format!("policy logits of expert {k}")));
            }
        }
        for (k, r) in self.rewards.iter().enumerate() {
            if !r.values.is_finite() {
                return Err(Error::NonFinite(format!("reward table of expert {k}")));
            }
        }
        match &self.gating {
            Gating::Fixed { weights } if weights.iter().any(|w| !w.is_finite()) => {
                Err(Error::NonFinite("mixture weights".into()))
            }
            Gating::Linear { weight, bias }
                if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) =>
            {
                Err(Error::NonFinite("gating parameters".into()))
            }
            _ => Ok(()),
        }
    }

    /// Gate input for prompt `x`: its features, followed by user features.
    pub fn gate_input(&self, x: usize, user: Option<&[f64]>) -> Vec<f64> {
        let mut input = self.space.prompt_features(x).to_vec();
        if let Some(u) = user {
            input.extend_from_slice(u);
        }
        input
    }

    pub fn weights(&self, x: usize, user: Option<&[f64]>) -> Result<Vec<f64>> {
        match &self.gating {
            Gating::Fixed { weights } => Ok(weights.clone()),
            Gating::Linear { .. } => self.gating.weights(&self.gate_input(x, user)),
        }
    }

    pub fn triplet_weights(&self, t: &PreferenceTriplet) -> Result<Vec<f64>> {
        self.weights(t.prompt_id, t.user_features.as_deref())
    }

    /// `log σ_k(x, y⁺, y⁻)` for every expert.
    pub fn log_sigmas(&self, t: &PreferenceTriplet) -> Result<Vec<f64>> {
        self.rewards
            .iter()
            .map(|r| mbt::log_bt_sigma(r.get(t.prompt_id, t.y_plus), r.get(t.prompt_id, t.y_minus)))
            .collect()
    }

    pub fn sigmas(&self, t: &PreferenceTriplet) -> Result<Vec<f64>> {
        self.rewards
            .iter()
            .map(|r| mbt::bt_sigma(r.get(t.prompt_id, t.y_plus), r.get(t.prompt_id, t.y_minus)))
            .collect()
    }

    /// `(r_1(x,y), …, r_K(x,y))`.
    pub fn expert_rewards_at(&self, x: usize, y: usize) -> Vec<f64> {
        self.rewards.iter().map(|r| r.get(x, y)).collect()
    }

    /// `(π_1(y|x), …, π_K(y|x))`.
    pub fn expert_probs_at(&self, x: usize, y: usize) -> Vec<f64> {
        self.policies.iter().map(|p| p.probs(x)[y]).collect()
    }

    /// Reward-induced responsibilities at `(x, y)` under `weights = w(x)`.
    pub fn q_r(&self, x: usize, y: usize, weights: &[f64]) -> Result<Responsibilities> {
        mbt::q_r_posterior(weights, &self.expert_rewards_at(x, y))
    }

    /// `q⁽ʳ⁾_k(x, ·)` over the vocabulary for one expert.
    pub fn q_r_row(&self, k: usize, x: usize, weights: &[f64]) -> Result<Vec<f64>> {
        (0..self.space.vocab_size)
            .map(|y| Ok(self.q_r(x, y, weights)?[k]))
            .collect()
    }

    /// Corrected rewards `r̃_k(x, ·)` over the vocabulary.
    pub fn corrected_rewards_row(&self, k: usize, x: usize, weights: &[f64]) -> Result<Vec<f64>> {
        (0..self.space.vocab_size)
            .map(|y| {
                let q = self.q_r(x, y, weights)?;
                mbt::corrected_reward(
                    self.rewards[k].get(x, y),
                    q[k].max(math::PROB_FLOOR),
                    weights[k].max(math::PROB_FLOOR),
                )
            })
            .collect()
    }

    /// Exact posterior `q_k ∝ w_k σ_k` for a triplet.
    pub fn posterior(&self, t: &PreferenceTriplet) -> Result<Responsibilities> {
        mbt::mbt_posterior_log(&self.triplet_weights(t)?, &self.log_sigmas(t)?)
    }

    /// Per-triplet ELBO with the given responsibilities.
    pub fn triplet_elbo(&self, t: &PreferenceTriplet, q: &[f64]) -> Result<f64> {
        mbt::elbo_log(q, &self.triplet_weights(t)?, &self.log_sigmas(t)?)
    }

    /// `log Σ_k w_k σ_k` for a triplet.
    pub fn log_marginal(&self, t: &PreferenceTriplet) -> Result<f64> {
        let w = self.triplet_weights(t)?;
        let ls = self.log_sigmas(t)?;
        let terms: Vec<f64> = w
            .iter()
            .zip(&ls)
            .map(|(&w, &s)| if w > 0.0 { math::ln(w) + s } else { f64::NEG_INFINITY })
            .collect();
        math::log_sum_exp(&terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ReferencePolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Model {
        let space = ProblemSpace::new(3, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::initialize(
            space,
            References::Shared(ReferencePolicy::uniform(3, 4)),
            Gating::uniform(2),
            &ModelInit::default(),
            0.5,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn initialization_is_deterministic() {
        assert_eq!(tiny(3), tiny(3));
        assert_ne!(tiny(3), tiny(4));
    }

    #[test]
    fn tied_noise_repeats_across_prompts() {
        let m = tiny(1);
        for k in 0..2 {
            assert_eq!(m.policies[k].logits.row(0), m.policies[k].logits.row(2));
        }
    }

    #[test]
    fn validate_catches_shape_errors() {
        let mut m = tiny(1);
        m.rewards.pop();
        assert!(matches!(m.validate(), Err(Error::LengthMismatch { .. })));
        let mut m = tiny(1);
        m.policies[0].logits.set(0, 0, f64::NAN);
        assert!(matches!(m.check_finite(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn posterior_matches_weighted_sigmas() {
        let m = tiny(9);
        let t = PreferenceTriplet::new(1, 0, 3);
        let q = m.posterior(&t).unwrap();
        let direct = mbt::mbt_posterior(&m.triplet_weights(&t).unwrap(), &m.sigmas(&t).unwrap())
            .unwrap();
        for k in 0..2 {
            assert!((q[k] - direct[k]).abs() < 1e-15);
        }
    }
}
