//! Domain types: finite problem spaces, policy and reward tables, gating,
//! preference triplets and responsibilities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math::{self, PROB_FLOOR};
use crate::regularized::Lambdas;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len(cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] += value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Finite prompt/response/expert spaces plus per-prompt gating features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpace {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub num_experts: usize,
    /// One row per prompt; defaults to the one-hot encoding of the prompt id.
    pub features: Matrix,
}

impl ProblemSpace {
    pub fn new(num_prompts: usize, vocab_size: usize, num_experts: usize) -> Result<Self> {
        let mut features = Matrix::zeros(num_prompts, num_prompts.max(1));
        for x in 0..num_prompts {
            features.set(x, x, 1.0);
        }
        Self::with_features(num_prompts, vocab_size, num_experts, features)
    }

    pub fn with_features(
        num_prompts: usize,
        vocab_size: usize,
        num_experts: usize,
        features: Matrix,
    ) -> Result<Self> {
        if num_prompts < 1 {
            return Err(Error::InvalidDimensions("need at least one prompt".into()));
        }
        if vocab_size < 2 {
            return Err(Error::InvalidDimensions("need at least two responses".into()));
        }
        if num_experts < 1 {
            return Err(Error::InvalidDimensions("need at least one expert".into()));
        }
        if features.rows() != num_prompts || features.cols() < 1 {
            return Err(Error::InvalidDimensions(format!(
                "feature matrix is {}x{}, expected {} rows",
                features.rows(),
                features.cols(),
                num_prompts
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("prompt features".into()));
        }
        Ok(Self {
            num_prompts,
            vocab_size,
            num_experts,
            features,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn prompt_features(&self, x: usize) -> &[f64] {
        self.features.row(x)
    }
}

/// Per-expert conditional distribution over responses, as a logits table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertPolicy {
    pub logits: Matrix,
}

impl ExpertPolicy {
    pub fn new(logits: Matrix) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(Self { logits })
    }

    pub fn uniform(num_prompts: usize, vocab_size: usize) -> Self {
        Self {
            logits: Matrix::zeros(num_prompts, vocab_size),
        }
    }

    /// `π(·|x)` with every entry at least [`PROB_FLOOR`].
    pub fn probs(&self, x: usize) -> Vec<f64> {
        let mut p = math::softmax(self.logits.row(x));
        for v in &mut p {
            *v = v.max(PROB_FLOOR);
        }
        p
    }

    /// `log π(·|x)`, clamped at `ln PROB_FLOOR`.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        let floor = math::ln(PROB_FLOOR);
        let mut lp = math::log_softmax(self.logits.row(x));
        for v in &mut lp {
            *v = v.max(floor);
        }
        lp
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs(x)[y]
    }
}

/// Frozen anchor policy with full support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy {
    log_probs: Matrix,
}

impl ReferencePolicy {
    pub fn uniform(num_prompts: usize, vocab_size: usize) -> Self {
        Self {
            log_probs: Matrix::filled(num_prompts, vocab_size, -math::ln(vocab_size as f64)),
        }
    }

    pub fn from_logits(logits: &Matrix) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::NonFinite("reference logits".into()));
        }
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for x in 0..logits.rows() {
            probs.row_mut(x).copy_from_slice(&math::softmax(logits.row(x)));
        }
        Self::from_probs(&probs)
    }

    /// Validates row normalization and the `PROB_FLOOR` support condition.
    pub fn from_probs(probs: &Matrix) -> Result<Self> {
        let mut log_probs = Matrix::zeros(probs.rows(), probs.cols());
        for x in 0..probs.rows() {
            let row = probs.row(x);
            math::check_simplex(row, 1e-9)?;
            if let Some(p) = row.iter().find(|&&p| p < PROB_FLOOR) {
                return Err(invalid(
                    "reference",
                    format!("probability {p} below floor at prompt {x}"),
                ));
            }
            for (y, &p) in row.iter().enumerate() {
                log_probs.set(x, y, math::ln(p));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn num_prompts(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn log_probs(&self, x: usize) -> &[f64] {
        self.log_probs.row(x)
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs.get(x, y)
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        self.log_probs.row(x).iter().map(|&v| math::exp(v)).collect()
    }
}

/// One reference shared by all experts, or one per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum References {
    Shared(ReferencePolicy),
    PerExpert(Vec<ReferencePolicy>),
}

impl References {
    pub fn for_expert(&self, k: usize) -> &ReferencePolicy {
        match self {
            References::Shared(r) => r,
            References::PerExpert(rs) => &rs[k],
        }
    }
}

/// Expert reward `r_k(x, y)` over the full prompt/response grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub values: Matrix,
}

impl RewardTable {
    pub fn zeros(num_prompts: usize, vocab_size: usize) -> Self {
        Self {
            values: Matrix::zeros(num_prompts, vocab_size),
        }
    }

    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("reward table".into()));
        }
        Ok(Self { values })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values.get(x, y)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        self.values.row(x)
    }
}

/// Prior over experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gating {
    /// Input-independent simplex weights.
    Fixed { weights: Vec<f64> },
    /// `w(x) = softmax(W f(x) + b)` where `f(x)` may include user features.
    Linear { weight: Matrix, bias: Vec<f64> },
}

impl Gating {
    pub fn uniform(num_experts: usize) -> Self {
        Gating::Fixed {
            weights: vec![1.0 / num_experts as f64; num_experts],
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            Gating::Fixed { weights } => weights.len(),
            Gating::Linear { bias, .. } => bias.len(),
        }
    }

    /// Input dimension of a linear gate, `None` for fixed weights.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Gating::Fixed { .. } => None,
            Gating::Linear { weight, .. } => Some(weight.cols()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Gating::Fixed { weights } => math::check_simplex(weights, math::SIMPLEX_TOL),
            Gating::Linear { weight, bias } => {
                check_len(weight.rows(), bias.len())?;
                if bias.is_empty() {
                    return Err(Error::InvalidDimensions("gate with zero experts".into()));
                }
                if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
                    return Err(Error::NonFinite("gating parameters".into()));
                }
                Ok(())
            }
        }
    }

    /// Gate logits for `input`; for fixed weights these are `ln w`.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        match self {
            Gating::Fixed { weights } => Ok(weights.iter().map(|&w| math::ln(w)).collect()),
            Gating::Linear { weight, bias } => {
                check_len(weight.cols(), input.len())?;
                Ok((0..bias.len())
                    .map(|k| {
                        bias[k]
                            + weight
                                .row(k)
                                .iter()
                                .zip(input)
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect())
            }
        }
    }

    /// Mixture weights `w(x)` for the given gate input.
    pub fn weights(&self, input: &[f64]) -> Result<Vec<f64>> {
        match self {
            Gating::Fixed { weights } => Ok(weights.clone()),
            Gating::Linear { .. } => Ok(math::softmax(&self.logits(input)?)),
        }
    }
}

/// `(x, y⁺, y⁻)` with `y⁺ ≻ y⁻`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub prompt_id: usize,
    pub y_plus: usize,
    pub y_minus: usize,
    /// Ground-truth expert/task; used for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_features: Option<Vec<f64>>,
}

impl PreferenceTriplet {
    pub fn new(prompt_id: usize, y_plus: usize, y_minus: usize) -> Self {
        Self {
            prompt_id,
            y_plus,
            y_minus,
            source_label: None,
            user_features: None,
        }
    }

    pub fn with_source(mut self, source: usize) -> Self {
        self.source_label = Some(source);
        self
    }

    pub fn validate(&self, space: &ProblemSpace) -> Result<()> {
        if self.prompt_id >= space.num_prompts {
            return Err(Error::IndexOutOfRange(format!("prompt {}", self.prompt_id)));
        }
        if self.y_plus >= space.vocab_size || self.y_minus >= space.vocab_size {
            return Err(Error::IndexOutOfRange(format!(
                "responses ({}, {})",
                self.y_plus, self.y_minus
            )));
        }
        if self.y_plus == self.y_minus {
            return Err(invalid("triplet", "y_plus equals y_minus"));
        }
        if let Some(u) = &self.user_features {
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("user features".into()));
            }
        }
        Ok(())
    }
}

/// Posterior over experts attached to one triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities(Vec<f64>);

impl Responsibilities {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        math::check_simplex(&q, math::SIMPLEX_TOL)?;
        Ok(Self(q))
    }

    pub(crate) fn from_normalized(q: Vec<f64>) -> Self {
        Self(q)
    }

    pub fn uniform(num_experts: usize) -> Self {
        Self(vec![1.0 / num_experts as f64; num_experts])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Responsibilities {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Responsibilities {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Learning-rate schedule `η_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { eta: f64 },
    /// `η_t = η_0 / (1 + t·decay)`: divergent sum, convergent sum of squares.
    RobbinsMonro { eta0: f64, decay: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::RobbinsMonro {
            eta0: 0.1,
            decay: 1e-3,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { eta } => eta,
            LrSchedule::RobbinsMonro { eta0, decay } => eta0 / (1.0 + t as f64 * decay),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { eta } if eta.is_finite() && eta >= 0.0 => Ok(()),
            LrSchedule::RobbinsMonro { eta0, decay }
                if eta0.is_finite() && eta0 > 0.0 && decay.is_finite() && decay > 0.0 =>
            {
                Ok(())
            }
            _ => Err(invalid("lr_schedule", format!("{self:?}"))),
        }
    }
}

/// Global hyperparameters shared by the trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// KL temperature.
    pub beta: f64,
    /// Relaxed samples per triplet.
    pub mc_samples: usize,
    pub lr: LrSchedule,
    pub lambdas: Lambdas,
    pub batch_size: usize,
    pub max_iters: u64,
    pub elbo_tol: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            mc_samples: 8,
            lr: LrSchedule::default(),
            lambdas: Lambdas::default(),
            batch_size: 64,
            max_iters: 10_000,
            elbo_tol: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(invalid("beta", format!("{} must be positive", self.beta)));
        }
        if self.mc_samples < 1 {
            return Err(invalid("mc_samples", "need at least one sample"));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size", "need at least one triplet"));
        }
        if !(self.elbo_tol >= 0.0) {
            return Err(invalid("elbo_tol", "must be nonnegative"));
        }
        self.lr.validate()?;
        self.lambdas.validate_nonnegative()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_invariants() {
        assert!(ProblemSpace::new(0, 4, 2).is_err());
        assert!(ProblemSpace::new(3, 1, 2).is_err());
        assert!(ProblemSpace::new(3, 4, 0).is_err());
        let s = ProblemSpace::new(3, 4, 2).unwrap();
        assert_eq!(s.feature_dim(), 3);
        assert_eq!(s.prompt_features(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn policy_rows_normalize() {
        let logits = Matrix::from_rows(&[vec![0.0, 1.0, -3.0], vec![50.0, 0.0, 0.0]]).unwrap();
        let pi = ExpertPolicy::new(logits).unwrap();
        for x in 0..2 {
            let p = pi.probs(x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-11);
            assert!(p.iter().all(|&v| v >= PROB_FLOOR));
        }
    }

    #[test]
    fn reference_requires_full_support() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(ReferencePolicy::from_probs(&probs).is_err());
        let probs = Matrix::from_rows(&[vec![0.6, 0.6]]).unwrap();
        assert!(ReferencePolicy::from_probs(&probs).is_err());
        let r = ReferencePolicy::uniform(2, 4);
        assert!((r.probs(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triplet_validation() {
        let s = ProblemSpace::new(2, 3, 1).unwrap();
        assert!(PreferenceTriplet::new(0, 1, 1).validate(&s).is_err());
        assert!(PreferenceTriplet::new(2, 0, 1).validate(&s).is_err());
        assert!(PreferenceTriplet::new(1, 0, 3).validate(&s).is_err());
        PreferenceTriplet::new(1, 2, 0).validate(&s).unwrap();
    }

    #[test]
    fn linear_gate_is_simplex() {
        let g = Gating::Linear {
            weight: Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5], vec![0.0, 3.0]]).unwrap(),
            bias: vec![0.1, 0.0, -0.3],
        };
        g.validate().unwrap();
        let w = g.weights(&[0.3, -1.0]).unwrap();
        math::check_simplex(&w, 1e-12).unwrap();
        assert!(g.weights(&[1.0]).is_err());
    }

    #[test]
    fn robbins_monro_decays() {
        let lr = LrSchedule::default();
        assert_eq!(lr.at(0), 0.1);
        assert!(lr.at(1000) < lr.at(10));
        assert!(LrSchedule::RobbinsMonro { eta0: 0.1, decay: 0.0 }
            .validate()
            .is_err());
    }
}
