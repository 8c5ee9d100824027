//! Variational EM for the mixture model, plus the relaxed and regularized
//! variants that share its loop, tracing and state.
//!
//! One iteration on a minibatch runs, in order: policy E-step and policy
//! M-step, reward update, then weight E-step and weight M-step. The first two
//! stages run only when policies are trainable and the last only when weights
//! are trainable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math;
use crate::mbt;
use crate::model::Model;
use crate::optim::{BlockState, OptimizerKind};
use crate::policy;
use crate::regularized::{self, Lambdas, RegSchedule};
use crate::relax::{self, GatingGrad, McConfig};
use crate::types::{
    ExpertPolicy, Gating, Hyperparams, LrSchedule, Matrix, PreferenceTriplet, Responsibilities,
    RewardTable,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Global mixture weights.
    Mix,
    /// Linear-softmax gating on prompt (and user) features.
    Moe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Em,
    EmRegularized,
    Mc,
}

/// Support of the partition function in the reward update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Full vocabulary.
    #[default]
    Exact,
    /// Responses observed at the prompt within the batch; only those entries
    /// are rewritten.
    Minibatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightUpdate {
    #[default]
    MinibatchAverage,
    /// `w ← decay·w + (1 − decay)·mean q`.
    Ema { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub trainable_policies: bool,
    pub trainable_weights: bool,
    pub optimizer: OptimizerKind,
    /// Step sizes for linear gating (policies use `hyper.lr`).
    pub gating_lr: LrSchedule,
    pub epochs: u64,
    /// Use the whole dataset as one batch, ignoring `hyper.batch_size`.
    pub full_batch: bool,
    pub seed: u64,
    pub partition_mode: PartitionMode,
    pub weight_update: WeightUpdate,
    /// Gradient steps per policy M-step.
    pub policy_steps: usize,
    /// Gradient steps per gating M-step.
    pub gating_steps: usize,
    pub hyper: Hyperparams,
    /// Phase schedule for `em-regularized`; `None` keeps `hyper.lambdas`
    /// throughout.
    pub schedule: Option<RegSchedule>,
    pub mc: McConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mix,
            algorithm: Algorithm::Em,
            trainable_policies: true,
            trainable_weights: true,
            optimizer: OptimizerKind::Sgd,
            gating_lr: LrSchedule::default(),
            epochs: 50,
            full_batch: false,
            seed: 0,
            partition_mode: PartitionMode::Exact,
            weight_update: WeightUpdate::MinibatchAverage,
            policy_steps: 1,
            gating_steps: 1,
            hyper: Hyperparams::default(),
            schedule: None,
            mc: McConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.optimizer.validate()?;
        self.gating_lr.validate()?;
        self.mc.validate_with(&self.hyper)?;
        if let WeightUpdate::Ema { decay } = self.weight_update {
            if !(0.0..1.0).contains(&decay) {
                return Err(invalid("weight_update", format!("ema decay {decay} outside [0, 1)")));
            }
        }
        if self.policy_steps == 0 || self.gating_steps == 0 {
            return Err(invalid("steps", "policy_steps and gating_steps must be positive"));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if self.algorithm == Algorithm::EmRegularized && self.schedule.is_none() {
            self.hyper.lambdas.validate(false)?;
        }
        Ok(())
    }

    /// Regularizer weights in force at `epoch`.
    pub fn active_lambdas(&self, epoch: u64) -> Lambdas {
        match (&self.algorithm, &self.schedule) {
            (Algorithm::EmRegularized, Some(s)) => s.active(epoch).lambdas,
            _ => self.hyper.lambdas,
        }
    }

    /// β in force at `epoch`.
    pub fn active_beta(&self, epoch: u64) -> f64 {
        match (&self.algorithm, &self.schedule) {
            (Algorithm::EmRegularized, Some(s)) => s.active(epoch).beta.unwrap_or(self.hyper.beta),
            _ => self.hyper.beta,
        }
    }
}

impl McConfig {
    fn validate_with(&self, hyper: &Hyperparams) -> Result<()> {
        self.tau.validate()?;
        if hyper.mc_samples == 0 {
            return Err(invalid("mc_samples", "need at least one sample"));
        }
        Ok(())
    }
}

/// Posterior responsibilities `q_k ∝ w_k(x) σ_k` for each triplet.
pub fn e_step(batch: &[PreferenceTriplet], model: &Model) -> Result<Vec<Responsibilities>> {
    batch.iter().map(|t| model.posterior(t)).collect()
}

/// Mean ELBO over `data` with responsibilities `qs`.
pub fn dataset_elbo<Q: AsRef<[f64]>>(model: &Model, data: &[PreferenceTriplet], qs: &[Q]) -> Result<f64> {
    check_len(data.len(), qs.len())?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (t, q) in data.iter().zip(qs) {
        total += model.triplet_elbo(t, q.as_ref())?;
    }
    Ok(total / data.len() as f64)
}

/// Mean log marginal likelihood, the ELBO at the exact posterior.
pub fn dataset_log_likelihood(model: &Model, data: &[PreferenceTriplet]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for t in data {
        total += model.log_marginal(t)?;
    }
    Ok(total / data.len() as f64)
}

fn grad_log_prob(probs: &[f64], y: usize, scale: f64, out: &mut [f64]) {
    for (j, p) in probs.iter().enumerate() {
        out[j] -= scale * p;
    }
    out[y] += scale;
}

/// Gradient of `(1/n) Σ_i per_expert_mbt_loss(i, k)` with respect to the
/// logits of `π_k`:
/// `(β/n) Σ_i q_k A⁻/(A⁺+A⁻) [∇log π_k(y⁻|x) − ∇log π_k(y⁺|x)]`.
pub fn policy_gradient<Q: AsRef<[f64]>>(
    batch: &[PreferenceTriplet],
    k: usize,
    model: &Model,
    qs: &[Q],
    beta: f64,
) -> Result<Matrix> {
    check_len(batch.len(), qs.len())?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grad = Matrix::zeros(model.space.num_prompts, model.space.vocab_size);
    let scale = beta / batch.len() as f64;
    for (i, (t, q)) in batch.iter().zip(qs).enumerate() {
        let qk = q.as_ref()[k];
        if qk == 0.0 {
            continue;
        }
        let w = model.triplet_weights(t)?;
        let terms = policy::pair_terms(model, t, k, &w, beta)
            .map_err(|e| Error::NonFinite(format!("triplet {i}: {e}")))?;
        let (_, share_minus) = terms.shares();
        let c = scale * qk * share_minus;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("policy gradient at triplet {i}")));
        }
        let probs = model.policies[k].probs(t.prompt_id);
        let row = grad.row_mut(t.prompt_id);
        grad_log_prob(&probs, t.y_minus, c, row);
        grad_log_prob(&probs, t.y_plus, -c, row);
    }
    Ok(grad)
}

/// Mean gate weights per prompt over the batch.
fn batch_prompt_weights(batch: &[PreferenceTriplet], model: &Model) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for t in batch {
        let w = model.triplet_weights(t)?;
        let e = acc
            .entry(t.prompt_id)
            .or_insert_with(|| (vec![0.0; w.len()], 0));
        for (a, b) in e.0.iter_mut().zip(&w) {
            *a += b;
        }
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(x, (w, c))| (x, w.into_iter().map(|v| v / c as f64).collect()))
        .collect())
}

/// Single-pass reward recalibration from the current policies.
///
/// For each prompt in the batch and each expert,
/// `r_k(x,y) = β log(π_k(y|x) Z_k(x) / π_ref(y|x)) + log(q⁽ʳ⁾_k(x,y) / w_k(x))`,
/// where `q⁽ʳ⁾` and `Z_k` use the rewards before the update.
pub fn reward_update(
    batch: &[PreferenceTriplet],
    model: &Model,
    beta: f64,
    partition: PartitionMode,
) -> Result<Vec<RewardTable>> {
    let weights = batch_prompt_weights(batch, model)?;
    let mut observed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in batch {
        let ys = observed.entry(t.prompt_id).or_default();
        for y in [t.y_plus, t.y_minus] {
            if !ys.contains(&y) {
                ys.push(y);
            }
        }
    }
    let mut tables = model.rewards.clone();
    let ny = model.space.vocab_size;
    for (&x, w) in &weights {
        let support = match partition {
            PartitionMode::Exact => None,
            PartitionMode::Minibatch => Some(observed[&x].as_slice()),
        };
        let q_r: Vec<Vec<f64>> = (0..ny)
            .map(|y| model.q_r(x, y, w).map(Responsibilities::into_inner))
            .collect::<Result<_>>()?;
        for k in 0..model.num_experts() {
            let wk = w[k].max(math::PROB_FLOOR);
            let q_row: Vec<f64> = q_r.iter().map(|q| q[k].max(math::PROB_FLOOR)).collect();
            let corrected: Vec<f64> = (0..ny)
                .map(|y| mbt::corrected_reward(model.rewards[k].get(x, y), q_row[y], wk))
                .collect::<Result<_>>()?;
            let reference = model.references.for_expert(k).probs(x);
            let log_z = policy::log_partition(&reference, &corrected, beta, support)?;
            let row = policy::reward_from_policy(
                &model.policies[k].probs(x),
                &reference,
                &q_row,
                wk,
                beta,
                log_z,
            )?;
            match support {
                None => tables[k].values.row_mut(x).copy_from_slice(&row),
                Some(ys) => {
                    for &y in ys {
                        tables[k].values.set(x, y, row[y]);
                    }
                }
            }
        }
    }
    Ok(tables)
}

/// Mix-DPO weight update from batch responsibilities.
pub fn prior_update_mix<Q: AsRef<[f64]>>(qs: &[Q], previous: &[f64], update: WeightUpdate) -> Result<Vec<f64>> {
    if qs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = previous.len();
    let mut mean = vec![0.0; k];
    for q in qs {
        let q = q.as_ref();
        check_len(k, q.len())?;
        for j in 0..k {
            mean[j] += q[j];
        }
    }
    for m in &mut mean {
        *m /= qs.len() as f64;
    }
    let blended: Vec<f64> = match update {
        WeightUpdate::MinibatchAverage => mean,
        WeightUpdate::Ema { decay } => previous
            .iter()
            .zip(&mean)
            .map(|(p, m)| decay * p + (1.0 - decay) * m)
            .collect(),
    };
    math::normalize(&blended)
}

/// `−(1/n) Σ_i Σ_k q_ik log w_k(x_i)`.
pub fn gating_cross_entropy<Q: AsRef<[f64]>>(batch: &[PreferenceTriplet], qs: &[Q], model: &Model) -> Result<f64> {
    check_len(batch.len(), qs.len())?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (t, q) in batch.iter().zip(qs) {
        let w = model.triplet_weights(t)?;
        for (qk, wk) in q.as_ref().iter().zip(&w) {
            if *qk > 0.0 {
                total -= qk * math::safe_ln(*wk);
            }
        }
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`gating_cross_entropy`] plus `kl_global · E_x KL(w(x) ‖ U)`
/// with respect to the parameters of a linear gate.
pub fn gating_gradient<Q: AsRef<[f64]>>(
    batch: &[PreferenceTriplet],
    qs: &[Q],
    model: &Model,
    kl_global: f64,
) -> Result<(Matrix, Vec<f64>)> {
    check_len(batch.len(), qs.len())?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let Gating::Linear { weight, bias } = &model.gating else {
        return Err(invalid("gating", "gradient step needs a linear gate"));
    };
    let mut gw = Matrix::zeros(weight.rows(), weight.cols());
    let mut gb = vec![0.0; bias.len()];
    let inv_n = 1.0 / batch.len() as f64;
    for (t, q) in batch.iter().zip(qs) {
        let input = model.gate_input(t.prompt_id, t.user_features.as_deref());
        check_len(weight.cols(), input.len())?;
        let w = model.gating.weights(&input)?;
        let q = q.as_ref();
        check_len(w.len(), q.len())?;
        let kl = if kl_global > 0.0 {
            regularized::kl_to_uniform_logit_grad(&w)
        } else {
            vec![0.0; w.len()]
        };
        for k in 0..w.len() {
            let d = inv_n * (w[k] - q[k] + kl_global * kl[k]);
            gb[k] += d;
            for (c, f) in input.iter().enumerate() {
                gw.add(k, c, d * f);
            }
        }
    }
    Ok((gw, gb))
}

/// One plain gradient step on the gating cross-entropy.
pub fn prior_update_gating<Q: AsRef<[f64]>>(
    batch: &[PreferenceTriplet],
    qs: &[Q],
    model: &Model,
    lr: f64,
    kl_global: f64,
) -> Result<Gating> {
    let (gw, gb) = gating_gradient(batch, qs, model, kl_global)?;
    let Gating::Linear { weight, bias } = &model.gating else {
        unreachable!("checked by gating_gradient");
    };
    let mut weight = weight.clone();
    for (p, g) in weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
        *p -= lr * g;
    }
    let bias = bias.iter().zip(&gb).map(|(b, g)| b - lr * g).collect();
    Ok(Gating::Linear { weight, bias })
}

/// Which E-step produced an [`EStepCheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Policy,
    Weight,
}

/// Full-dataset ELBO immediately before and after one E-step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EStepCheck {
    pub iteration: u64,
    pub stage: Stage,
    pub before: f64,
    pub after: f64,
}

/// Mean posterior responsibilities over triplets with one source label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMean {
    pub label: usize,
    pub count: usize,
    pub mean_q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Mean ELBO at the exact posterior (the mean log marginal likelihood).
    pub elbo: f64,
    pub mbt_loss: f64,
    pub mean_q_by_source: Vec<SourceMean>,
    pub gating_ce: f64,
    /// Gumbel-Softmax temperature, relaxed trainer only.
    pub tau: Option<f64>,
    /// Regularizer weights, regularized trainer only.
    pub lambdas: Option<Lambdas>,
}

/// Optimizer buffers for every parameter block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub policies: Vec<BlockState>,
    pub rewards: Vec<BlockState>,
    pub gating: BlockState,
}

/// Position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    /// Minibatch iterations completed.
    pub iteration: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Latest E-step responsibilities per triplet.
    pub responsibilities: Vec<Vec<f64>>,
    /// Per-epoch mean ELBO, starting with the initial model.
    pub elbo_trace: Vec<f64>,
    pub estep_checks: Vec<EStepCheck>,
    pub metrics: Vec<EpochMetrics>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub converged: bool,
    pub stable_epochs: u32,
}

/// Per-epoch metrics under the current parameters.
pub fn epoch_metrics(
    model: &Model,
    data: &[PreferenceTriplet],
    beta: f64,
    epoch: u64,
) -> Result<EpochMetrics> {
    let qs = e_step(data, model)?;
    let elbo = dataset_elbo(model, data, &qs)?;
    let mbt_loss = policy::mbt_loss(
        model,
        data,
        &qs.iter().map(|q| q.to_vec()).collect::<Vec<_>>(),
        beta,
    )?;
    let gating_ce = gating_cross_entropy(data, &qs, model)?;
    let nk = model.num_experts();
    let mut by_label: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (t, q) in data.iter().zip(&qs) {
        if let Some(label) = t.source_label {
            let e = by_label.entry(label).or_insert_with(|| (0, vec![0.0; nk]));
            e.0 += 1;
            for k in 0..nk {
                e.1[k] += q[k];
            }
        }
    }
    let mean_q_by_source = by_label
        .into_iter()
        .map(|(label, (count, sum))| SourceMean {
            label,
            count,
            mean_q: sum.into_iter().map(|v| v / count as f64).collect(),
        })
        .collect();
    Ok(EpochMetrics {
        epoch,
        elbo,
        mbt_loss,
        mean_q_by_source,
        gating_ce,
        tau: None,
        lambdas: None,
    })
}

/// Drives training over a fixed dataset.
pub struct Trainer<'a> {
    pub config: TrainerConfig,
    pub data: &'a [PreferenceTriplet],
    pub state: TrainState,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainerConfig, data: &'a [PreferenceTriplet]) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, t) in data.iter().enumerate() {
            t.validate(&model.space)
                .map_err(|e| invalid("dataset", format!("triplet {i}: {e}")))?;
        }
        match (config.mode, &model.gating) {
            (Mode::Mix, Gating::Fixed { .. }) | (Mode::Moe, Gating::Linear { .. }) => {}
            (mode, _) => {
                return Err(invalid(
                    "mode",
                    format!("{mode:?} does not match the model's gating"),
                ))
            }
        }
        let nk = model.num_experts();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut state = TrainState {
            responsibilities: vec![vec![1.0 / nk as f64; nk]; data.len()],
            model,
            iteration: 0,
            epoch: 0,
            elbo_trace: Vec::new(),
            estep_checks: Vec::new(),
            metrics: Vec::new(),
            optimizer: OptimizerState {
                policies: vec![BlockState::default(); nk],
                rewards: vec![BlockState::default(); nk],
                gating: BlockState::default(),
            },
            rng: RngState::capture(config.seed, &rng),
            converged: false,
            stable_epochs: 0,
        };
        let m = Self::metrics_for(&config, &state.model, data, 0)?;
        state.elbo_trace.push(m.elbo);
        state.metrics.push(m);
        Ok(Self {
            config,
            data,
            state,
            rng,
        })
    }

    /// Resumes from a saved state; the random stream continues where it stopped.
    pub fn resume(state: TrainState, config: TrainerConfig, data: &'a [PreferenceTriplet]) -> Result<Self> {
        config.validate()?;
        state.model.validate()?;
        check_len(data.len(), state.responsibilities.len())?;
        let rng = state.rng.restore();
        Ok(Self {
            config,
            data,
            state,
            rng,
        })
    }

    fn metrics_for(config: &TrainerConfig, model: &Model, data: &[PreferenceTriplet], epoch: u64) -> Result<EpochMetrics> {
        let mut m = epoch_metrics(model, data, config.active_beta(epoch), epoch)?;
        match config.algorithm {
            Algorithm::Mc => m.tau = Some(config.mc.tau.at(epoch, config.epochs)),
            Algorithm::EmRegularized => m.lambdas = Some(config.active_lambdas(epoch)),
            Algorithm::Em => {}
        }
        Ok(m)
    }

    fn is_full_batch(&self) -> bool {
        self.config.full_batch || self.config.hyper.batch_size >= self.data.len()
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let n = self.data.len();
        let mut order: Vec<usize> = (0..n).collect();
        if self.is_full_batch() {
            return vec![order];
        }
        order.shuffle(&mut self.rng);
        order
            .chunks(self.config.hyper.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Runs until `epochs`, convergence or `max_iters`.
    pub fn run(mut self) -> Result<TrainState> {
        while self.state.epoch < self.config.epochs
            && !self.state.converged
            && self.state.iteration < self.config.hyper.max_iters
        {
            self.run_epoch()?;
        }
        Ok(self.state)
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.state.epoch;
        for idx in self.batches() {
            if self.state.iteration >= self.config.hyper.max_iters {
                break;
            }
            let batch: Vec<PreferenceTriplet> = idx.iter().map(|&i| self.data[i].clone()).collect();
            match self.config.algorithm {
                Algorithm::Mc => self.mc_iteration(&batch, epoch)?,
                _ => self.em_iteration(&batch, &idx, epoch)?,
            }
            self.state.iteration += 1;
            self.state
                .model
                .check_finite()
                .map_err(|e| Error::NonFinite(format!("iteration {}: {e}", self.state.iteration)))?;
        }
        self.state.epoch += 1;
        let m = Self::metrics_for(&self.config, &self.state.model, self.data, self.state.epoch)?;
        if !m.elbo.is_finite() {
            return Err(Error::NonFinite(format!("ELBO at epoch {}", self.state.epoch)));
        }
        let prev = *self.state.elbo_trace.last().expect("trace starts nonempty");
        if (m.elbo - prev).abs() < self.config.hyper.elbo_tol {
            self.state.stable_epochs += 1;
        } else {
            self.state.stable_epochs = 0;
        }
        self.state.converged = self.state.stable_epochs >= 3;
        self.state.elbo_trace.push(m.elbo);
        self.state.metrics.push(m);
        self.state.rng = RngState::capture(self.config.seed, &self.rng);
        Ok(())
    }

    fn e_step_for(&mut self, batch: &[PreferenceTriplet], idx: &[usize], epoch: u64, stage: Stage) -> Result<Vec<Vec<f64>>> {
        let beta = self.config.active_beta(epoch);
        let qs: Vec<Vec<f64>> = match self.config.algorithm {
            Algorithm::EmRegularized => {
                let schedule = self
                    .config
                    .schedule
                    .clone()
                    .unwrap_or_else(|| RegSchedule::constant(self.config.hyper.lambdas));
                regularized::scheduled_e_step(batch, &self.state.model, &schedule, epoch, beta)?
            }
            _ => e_step(batch, &self.state.model)?,
        }
        .into_iter()
        .map(Responsibilities::into_inner)
        .collect();
        let trace = self.is_full_batch();
        let before = if trace {
            Some(dataset_elbo(&self.state.model, self.data, &self.state.responsibilities)?)
        } else {
            None
        };
        for (&i, q) in idx.iter().zip(&qs) {
            self.state.responsibilities[i].clone_from(q);
        }
        if let Some(before) = before {
            let after = dataset_elbo(&self.state.model, self.data, &self.state.responsibilities)?;
            self.state.estep_checks.push(EStepCheck {
                iteration: self.state.iteration,
                stage,
                before,
                after,
            });
        }
        Ok(qs)
    }

    fn em_iteration(&mut self, batch: &[PreferenceTriplet], idx: &[usize], epoch: u64) -> Result<()> {
        let beta = self.config.active_beta(epoch);
        let lr = self.config.hyper.lr.at(self.state.iteration);
        if self.config.trainable_policies {
            let qs = self.e_step_for(batch, idx, epoch, Stage::Policy)?;
            for _ in 0..self.config.policy_steps {
                let grads = (0..self.state.model.num_experts())
                    .map(|k| policy_gradient(batch, k, &self.state.model, &qs, beta))
                    .collect::<Result<Vec<_>>>()?;
                for (k, g) in grads.iter().enumerate() {
                    self.state.optimizer.policies[k].step(
                        &self.config.optimizer,
                        self.state.model.policies[k].logits.as_mut_slice(),
                        g.as_slice(),
                        lr,
                    )?;
                }
            }
            self.state.model.rewards =
                reward_update(batch, &self.state.model, beta, self.config.partition_mode)?;
        }
        if self.config.trainable_weights {
            let qs = self.e_step_for(batch, idx, epoch, Stage::Weight)?;
            self.weight_m_step(batch, &qs, epoch)?;
        }
        Ok(())
    }

    fn weight_m_step(&mut self, batch: &[PreferenceTriplet], qs: &[Vec<f64>], epoch: u64) -> Result<()> {
        match &self.state.model.gating {
            Gating::Fixed { weights } => {
                let w = prior_update_mix(qs, weights, self.config.weight_update)?;
                self.state.model.gating = Gating::Fixed { weights: w };
            }
            Gating::Linear { .. } => {
                let kl_global = self.config.active_lambdas(epoch).kl_w_global;
                for _ in 0..self.config.gating_steps {
                    let lr = self.config.gating_lr.at(self.state.iteration);
                    let (gw, gb) = gating_gradient(batch, qs, &self.state.model, kl_global)?;
                    self.step_linear_gate(&gw, &gb, lr)?;
                }
            }
        }
        Ok(())
    }

    fn step_linear_gate(&mut self, gw: &Matrix, gb: &[f64], lr: f64) -> Result<()> {
        let Gating::Linear { weight, bias } = &mut self.state.model.gating else {
            return Err(invalid("gating", "expected a linear gate"));
        };
        let mut params: Vec<f64> = weight.as_slice().to_vec();
        params.extend_from_slice(bias);
        let mut grad: Vec<f64> = gw.as_slice().to_vec();
        grad.extend_from_slice(gb);
        self.state
            .optimizer
            .gating
            .step(&self.config.optimizer, &mut params, &grad, lr)?;
        let split = weight.as_slice().len();
        weight.as_mut_slice().copy_from_slice(&params[..split]);
        bias.copy_from_slice(&params[split..]);
        Ok(())
    }

    fn mc_iteration(&mut self, batch: &[PreferenceTriplet], epoch: u64) -> Result<()> {
        let beta = self.config.active_beta(epoch);
        let tau = self.config.mc.tau.at(epoch, self.config.epochs);
        let nk = self.state.model.num_experts();
        let samples = self.config.hyper.mc_samples;
        let gumbels: Vec<Vec<Vec<f64>>> = batch
            .iter()
            .map(|_| {
                (0..samples)
                    .map(|_| relax::draw_gumbels(nk, &mut self.rng))
                    .collect()
            })
            .collect();
        let offsets = self
            .config
            .mc
            .tie_rewards
            .then(|| relax::tie_offsets(&self.state.model, beta));
        let kl_weight = self.config.active_lambdas(epoch).kl_w;
        let (_, grad) = relax::mc_objective(
            batch,
            &self.state.model,
            offsets.as_deref(),
            &gumbels,
            tau,
            kl_weight,
            beta,
        )?;
        let lr = self.config.hyper.lr.at(self.state.iteration);
        let opt = self.config.optimizer;
        if self.config.trainable_policies {
            match &offsets {
                Some(off) => {
                    for k in 0..nk {
                        self.state.optimizer.policies[k].step(
                            &opt,
                            self.state.model.policies[k].logits.as_mut_slice(),
                            grad.policies[k].as_slice(),
                            lr,
                        )?;
                        let mut r = self.state.model.canonical_rewards(k, beta);
                        for (a, b) in r.as_mut_slice().iter_mut().zip(off[k].as_slice()) {
                            *a += b;
                        }
                        self.state.model.rewards[k] = RewardTable { values: r };
                    }
                }
                None => {
                    for k in 0..nk {
                        self.state.optimizer.rewards[k].step(
                            &opt,
                            self.state.model.rewards[k].values.as_mut_slice(),
                            grad.rewards[k].as_slice(),
                            lr,
                        )?;
                    }
                }
            }
        }
        if self.config.trainable_weights {
            let glr = self.config.gating_lr.at(self.state.iteration);
            match grad.gating {
                GatingGrad::Fixed(g) => {
                    let Gating::Fixed { weights } = &self.state.model.gating else {
                        return Err(invalid("gating", "expected fixed weights"));
                    };
                    let mut theta: Vec<f64> = weights.iter().map(|&w| math::safe_ln(w)).collect();
                    self.state.optimizer.gating.step(&opt, &mut theta, &g, glr)?;
                    self.state.model.gating = Gating::Fixed {
                        weights: math::softmax(&theta),
                    };
                }
                GatingGrad::Linear { weight, bias } => {
                    let kl_global = self.config.active_lambdas(epoch).kl_w_global;
                    let mut gb = bias;
                    let mut gw = weight;
                    if kl_global > 0.0 {
                        let (rw, rb) = global_regularizer_gradient(batch, &self.state.model, kl_global)?;
                        for (a, b) in gw.as_mut_slice().iter_mut().zip(rw.as_slice()) {
                            *a += b;
                        }
                        for (a, b) in gb.iter_mut().zip(&rb) {
                            *a += b;
                        }
                    }
                    self.step_linear_gate(&gw, &gb, glr)?;
                }
            }
        }
        Ok(())
    }
}

/// Gradient of `kl_global · mean_i KL(w(x_i) ‖ U)` for a linear gate.
fn global_regularizer_gradient(batch: &[PreferenceTriplet], model: &Model, kl_global: f64) -> Result<(Matrix, Vec<f64>)> {
    let uniform: Vec<Vec<f64>> = batch
        .iter()
        .map(|t| model.triplet_weights(t))
        .collect::<Result<_>>()?;
    // the cross-entropy part vanishes when q equals w
    gating_gradient(batch, &uniform, model, kl_global)
}

/// Sets every policy to the optimal policy of the current rewards.
pub fn extract_policies(model: &mut Model, beta: f64) -> Result<()> {
    for k in 0..model.num_experts() {
        let mut logits = Matrix::zeros(model.space.num_prompts, model.space.vocab_size);
        for x in 0..model.space.num_prompts {
            let p = policy::model_optimal_policy(model, k, x, beta, policy::ExponentVariant::Corrected)?;
            for (y, v) in p.iter().enumerate() {
                logits.set(x, y, math::safe_ln(*v));
            }
        }
        model.policies[k] = ExpertPolicy::new(logits)?;
    }
    Ok(())
}

/// Convenience wrapper: build a trainer and run it to completion.
pub fn train(data: &[PreferenceTriplet], model: Model, config: &TrainerConfig) -> Result<TrainState> {
    Trainer::new(model, config.clone(), data)?.run()
}
