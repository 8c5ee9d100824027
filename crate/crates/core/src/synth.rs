//! Synthetic ground truth for the mixture model and preference sampling.
//!
//! Prompts are split into `K` groups by `x mod K`. Expert `k` puts
//! `own_mass` of the gate on prompts of group `k`, and every expert scores
//! responses as `r*_k(x,y) = base(x,y) + separation · style_k(y)` with
//! standard normal `base` and `style`.

use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::mbt;
use crate::model::Model;
use crate::policy;
use crate::types::{
    ExpertPolicy, Gating, Matrix, PreferenceTriplet, ProblemSpace, ReferencePolicy, References,
    Responsibilities, RewardTable,
};

/// How candidate pairs are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Uniform over distinct pairs.
    #[default]
    Uniform,
    /// Two distinct draws from the reference policy.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub num_experts: usize,
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub separation: f64,
    /// Gate mass on the expert owning the prompt's group.
    #[serde(default = "default_own_mass")]
    pub own_mass: f64,
    /// Standard deviation of the noise added to one-hot group features.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
    /// Standard deviation of the reference logits.
    #[serde(default = "default_reference_scale")]
    pub reference_scale: f64,
    #[serde(default)]
    pub pair_sampling: PairSampling,
    pub seed: u64,
}

fn default_own_mass() -> f64 {
    0.8
}

fn default_feature_noise() -> f64 {
    0.1
}

fn default_reference_scale() -> f64 {
    0.5
}

impl GroundTruthConfig {
    pub fn new(num_experts: usize, num_prompts: usize, vocab_size: usize, separation: f64, seed: u64) -> Self {
        Self {
            num_experts,
            num_prompts,
            vocab_size,
            separation,
            own_mass: default_own_mass(),
            feature_noise: default_feature_noise(),
            reference_scale: default_reference_scale(),
            pair_sampling: PairSampling::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ProblemSpace::new(self.num_prompts, self.vocab_size, self.num_experts)?;
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(invalid("separation", "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.own_mass) {
            return Err(invalid("own_mass", "must lie in [0, 1]"));
        }
        if !(self.feature_noise >= 0.0) || !(self.reference_scale >= 0.0) {
            return Err(invalid("noise", "scales must be nonnegative"));
        }
        Ok(())
    }
}

/// The generative model behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GroundTruthConfig,
    /// `r*_k` per expert.
    pub rewards: Vec<Matrix>,
    /// `w*(x)`, one row per prompt.
    pub gating: Matrix,
    pub reference: ReferencePolicy,
    /// Group (dominant expert) of each prompt.
    pub groups: Vec<usize>,
    /// Group-informative prompt features, `|X| × K`.
    pub features: Matrix,
}

pub fn make_ground_truth(config: &GroundTruthConfig) -> Result<GroundTruth> {
    config.validate()?;
    let (nk, nx, ny) = (config.num_experts, config.num_prompts, config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut base = Matrix::zeros(nx, ny);
    for v in base.as_mut_slice() {
        *v = normal(&mut rng);
    }
    let styles: Vec<Vec<f64>> = (0..nk)
        .map(|_| (0..ny).map(|_| normal(&mut rng)).collect())
        .collect();
    let rewards = styles
        .iter()
        .map(|style| {
            let mut m = base.clone();
            for x in 0..nx {
                for y in 0..ny {
                    m.add(x, y, config.separation * style[y]);
                }
            }
            m
        })
        .collect();

    let groups: Vec<usize> = (0..nx).map(|x| x % nk).collect();
    let mut gating = Matrix::zeros(nx, nk);
    for x in 0..nx {
        for k in 0..nk {
            let w = if nk == 1 {
                1.0
            } else if k == groups[x] {
                config.own_mass
            } else {
                (1.0 - config.own_mass) / (nk - 1) as f64
            };
            gating.set(x, k, w);
        }
    }

    let mut features = Matrix::zeros(nx, nk);
    for x in 0..nx {
        for k in 0..nk {
            let hot = if k == groups[x] { 1.0 } else { 0.0 };
            features.set(x, k, hot + config.feature_noise * normal(&mut rng));
        }
    }

    let mut ref_logits = Matrix::zeros(nx, ny);
    for v in ref_logits.as_mut_slice() {
        *v = config.reference_scale * normal(&mut rng);
    }
    let reference = ReferencePolicy::from_logits(&ref_logits)?;

    Ok(GroundTruth {
        config: config.clone(),
        rewards,
        gating,
        reference,
        groups,
        features,
    })
}

impl GroundTruth {
    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    pub fn weights(&self, x: usize) -> &[f64] {
        self.gating.row(x)
    }

    /// `σ*_k(x, y⁺, y⁻)` for every expert.
    pub fn sigmas(&self, t: &PreferenceTriplet) -> Result<Vec<f64>> {
        self.rewards
            .iter()
            .map(|r| mbt::bt_sigma(r.get(t.prompt_id, t.y_plus), r.get(t.prompt_id, t.y_minus)))
            .collect()
    }

    /// Problem space carrying the group-informative features.
    pub fn space(&self) -> Result<ProblemSpace> {
        ProblemSpace::with_features(
            self.config.num_prompts,
            self.config.vocab_size,
            self.config.num_experts,
            self.features.clone(),
        )
    }

    /// The ground truth as a [`Model`]: true rewards, a linear gate on
    /// one-hot prompt features reproducing `w*`, the shared reference, and
    /// policies optimal for the true rewards.
    pub fn to_model(&self, beta: f64) -> Result<Model> {
        let (nk, nx, ny) = (
            self.config.num_experts,
            self.config.num_prompts,
            self.config.vocab_size,
        );
        let space = ProblemSpace::new(nx, ny, nk)?;
        let mut weight = Matrix::zeros(nk, nx);
        for x in 0..nx {
            for k in 0..nk {
                weight.set(k, x, math::ln(self.gating.get(x, k).max(f64::MIN_POSITIVE)));
            }
        }
        let gating = Gating::Linear {
            weight,
            bias: vec![0.0; nk],
        };
        let rewards: Vec<RewardTable> = self
            .rewards
            .iter()
            .map(|m| RewardTable::new(m.clone()))
            .collect::<Result<_>>()?;
        let mut model = Model {
            space,
            policies: vec![ExpertPolicy::uniform(nx, ny); nk],
            rewards,
            gating,
            references: References::Shared(self.reference.clone()),
        };
        for k in 0..nk {
            let mut logits = Matrix::zeros(nx, ny);
            for x in 0..nx {
                let p = policy::model_optimal_policy(&model, k, x, beta, policy::ExponentVariant::Corrected)?;
                for y in 0..ny {
                    logits.set(x, y, math::safe_ln(p[y]));
                }
            }
            model.policies[k] = ExpertPolicy::new(logits)?;
        }
        model.validate()?;
        Ok(model)
    }
}

fn draw_pair<R: Rng + ?Sized>(gt: &GroundTruth, x: usize, rng: &mut R) -> Result<(usize, usize)> {
    let ny = gt.config.vocab_size;
    match gt.config.pair_sampling {
        PairSampling::Uniform => {
            let a = rng.gen_range(0..ny);
            let mut b = rng.gen_range(0..ny - 1);
            if b >= a {
                b += 1;
            }
            Ok((a, b))
        }
        PairSampling::Reference => {
            let probs = gt.reference.probs(x);
            let first = WeightedIndex::new(&probs).map_err(|e| invalid("reference", alloc::format!("{e}")))?;
            let a = first.sample(rng);
            let mut rest = probs;
            rest[a] = 0.0;
            let second = WeightedIndex::new(&rest).map_err(|e| invalid("reference", alloc::format!("{e}")))?;
            Ok((a, second.sample(rng)))
        }
    }
}

/// Draws `count` triplets from the generative model, labelled with the
/// expert that produced each preference.
pub fn sample_triplets<R: Rng + ?Sized>(gt: &GroundTruth, count: usize, rng: &mut R) -> Result<Vec<PreferenceTriplet>> {
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if gt.config.vocab_size < 2 {
        return Err(invalid("vocab_size", "need at least two responses"));
    }
    let mut gates = Vec::with_capacity(gt.config.num_prompts);
    for x in 0..gt.config.num_prompts {
        gates.push(WeightedIndex::new(gt.weights(x)).map_err(|e| invalid("gating", alloc::format!("{e}")))?);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.gen_range(0..gt.config.num_prompts);
        let (a, b) = draw_pair(gt, x, rng)?;
        let z = gates[x].sample(rng);
        let p = mbt::bt_sigma(gt.rewards[z].get(x, a), gt.rewards[z].get(x, b))?;
        let (plus, minus) = if rng.gen::<f64>() < p { (a, b) } else { (b, a) };
        out.push(PreferenceTriplet::new(x, plus, minus).with_source(z));
    }
    Ok(out)
}

/// Posterior over the generating expert under the true model.
pub fn exact_bayes_posterior(gt: &GroundTruth, t: &PreferenceTriplet) -> Result<Responsibilities> {
    t.validate(&ProblemSpace::new(
        gt.config.num_prompts,
        gt.config.vocab_size,
        gt.config.num_experts,
    )?)?;
    mbt::mbt_posterior(gt.weights(t.prompt_id), &gt.sigmas(t)?)
}
