//! Specialization metrics against source labels and the generating model.

use moedpo_core::em::e_step;
use moedpo_core::math;
use moedpo_core::synth::{exact_bayes_posterior, GroundTruth};
use moedpo_core::{Model, PreferenceTriplet};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::Holdout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of distinct source labels (`S`); labels run over `0..S`.
    pub num_sources: usize,
    /// `mean_q[s][k]`: mean responsibility of expert `k` on triplets of source `s`.
    pub mean_q: Vec<Vec<f64>>,
    /// Expert matched to each source.
    pub assignment: Vec<usize>,
    /// Mean responsibility of the matched expert, per source.
    pub matched_responsibility: Vec<f64>,
    /// Mean over labelled triplets of the matched expert's responsibility.
    pub mean_matched_responsibility: f64,
    /// Fraction of labelled triplets whose gate argmax is the matched expert.
    pub gating_accuracy: f64,
    /// Same, over held-out prompts.
    pub heldout_gating_accuracy: Option<f64>,
    /// `greedy_reward[s][k]`: mean true reward of source `s` at the greedy
    /// response of expert `k`, over all prompts.
    pub greedy_reward: Option<Vec<Vec<f64>>>,
    /// Mean total-variation distance between matched posteriors and the
    /// exact Bayes posterior.
    pub tv_to_bayes: Option<f64>,
    pub mean_log_likelihood: f64,
}

/// Injective source→expert map maximizing `Σ_s m[s][π(s)]`, by exhaustive
/// search. The first maximizer in lexicographic order wins ties.
pub fn max_weight_assignment(m: &[Vec<f64>]) -> Result<Vec<usize>, CliError> {
    let s = m.len();
    let k = m.first().map_or(0, Vec::len);
    if s > k || m.iter().any(|row| row.len() != k) {
        return Err(CliError::Format(format!("cannot match {s} sources to {k} experts")));
    }
    fn search(
        m: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if row == m.len() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                search(m, row + 1, used, cur, acc + m[row][j], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    search(m, 0, &mut vec![false; k], &mut Vec::with_capacity(s), 0.0, &mut best);
    Ok(best.1)
}

pub fn evaluate(
    model: &Model,
    data: &[PreferenceTriplet],
    truth: Option<&GroundTruth>,
    holdout: Option<&Holdout>,
) -> Result<EvalReport, CliError> {
    for (i, t) in data.iter().enumerate() {
        t.validate(&model.space)
            .map_err(|e| CliError::Format(format!("dataset line {}: {e}", i + 1)))?;
    }
    let labelled: Vec<(usize, &PreferenceTriplet)> = data
        .iter()
        .filter_map(|t| t.source_label.map(|s| (s, t)))
        .collect();
    if labelled.is_empty() {
        return Err(CliError::Format("evaluation needs source labels".into()));
    }
    let nk = model.num_experts();
    let num_sources = labelled.iter().map(|(s, _)| s + 1).max().unwrap_or(0);
    let qs = e_step(data, model)?;
    let mut sums = vec![vec![0.0; nk]; num_sources];
    let mut counts = vec![0usize; num_sources];
    for (t, q) in data.iter().zip(&qs) {
        if let Some(s) = t.source_label {
            counts[s] += 1;
            for k in 0..nk {
                sums[s][k] += q[k];
            }
        }
    }
    let mean_q: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(row, &c)| row.iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect())
        .collect();
    let assignment = max_weight_assignment(&mean_q)?;
    let matched_responsibility: Vec<f64> = (0..num_sources).map(|s| mean_q[s][assignment[s]]).collect();

    let mut matched_total = 0.0;
    let mut gate_hits = 0usize;
    for (t, q) in data.iter().zip(&qs) {
        if let Some(s) = t.source_label {
            matched_total += q[assignment[s]];
            if math::argmax(&model.triplet_weights(t)?) == assignment[s] {
                gate_hits += 1;
            }
        }
    }
    let n_lab = labelled.len() as f64;

    let heldout_gating_accuracy = match holdout {
        Some(h) if !h.prompts.is_empty() => {
            if h.prompts.len() != h.labels.len() {
                return Err(CliError::Format("holdout prompts and labels differ in length".into()));
            }
            let mut hits = 0usize;
            for (&x, &s) in h.prompts.iter().zip(&h.labels) {
                if x >= model.space.num_prompts {
                    return Err(CliError::Format(format!("holdout prompt {x} out of range")));
                }
                if s < num_sources && math::argmax(&model.weights(x, None)?) == assignment[s] {
                    hits += 1;
                }
            }
            Some(hits as f64 / h.prompts.len() as f64)
        }
        _ => None,
    };

    let (greedy_reward, tv_to_bayes) = match truth {
        None => (None, None),
        Some(gt) => {
            if gt.config.num_prompts != model.space.num_prompts || gt.config.vocab_size != model.space.vocab_size {
                return Err(CliError::Format("ground truth and checkpoint dimensions differ".into()));
            }
            let nx = model.space.num_prompts;
            let greedy: Vec<Vec<usize>> = (0..nk)
                .map(|k| (0..nx).map(|x| math::argmax(&model.policies[k].probs(x))).collect())
                .collect();
            let reward: Vec<Vec<f64>> = gt
                .rewards
                .iter()
                .map(|r| {
                    (0..nk)
                        .map(|k| (0..nx).map(|x| r.get(x, greedy[k][x])).sum::<f64>() / nx as f64)
                        .collect()
                })
                .collect();
            let tv = if gt.num_experts() == nk && num_sources <= nk {
                let mut total = 0.0;
                for (s_t, q) in data.iter().zip(&qs).filter(|(t, _)| t.source_label.is_some()) {
                    let bayes = exact_bayes_posterior(gt, s_t)?;
                    let matched: Vec<f64> = (0..gt.num_experts())
                        .map(|s| if s < num_sources { q[assignment[s]] } else { 0.0 })
                        .collect();
                    total += math::total_variation(&matched, bayes.as_ref());
                }
                Some(total / n_lab)
            } else {
                None
            };
            (Some(reward), tv)
        }
    };

    Ok(EvalReport {
        num_sources,
        mean_q,
        assignment,
        matched_responsibility,
        mean_matched_responsibility: matched_total / n_lab,
        gating_accuracy: gate_hits as f64 / n_lab,
        heldout_gating_accuracy,
        greedy_reward,
        tv_to_bayes,
        mean_log_likelihood: moedpo_core::em::dataset_log_likelihood(model, data)?,
    })
}
