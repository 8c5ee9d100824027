//! The four commands, as functions over paths plus in-memory variants used
//! by the determinism checks.

use std::fs;
use std::path::Path;

use moedpo_core::em::{Mode, Trainer};
use moedpo_core::synth::{make_ground_truth, sample_triplets, GroundTruth};
use moedpo_core::{Gating, Matrix, Model, PreferenceTriplet, ProblemSpace, ReferencePolicy, References};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{derive_seed, Config, ReferenceMode, Stream};
use crate::error::CliError;
use crate::eval::{evaluate, EvalReport};
use crate::io::{self, Checkpoint, Holdout};
use crate::verify::{run_battery, Fault, VerifyReport};

/// Output of `generate` before it touches disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub ground_truth: GroundTruth,
    pub triplets: Vec<PreferenceTriplet>,
    pub holdout: Holdout,
}

impl Generated {
    pub fn dataset_bytes(&self) -> Result<Vec<u8>, CliError> {
        io::dataset_bytes(&self.triplets, Some(&self.ground_truth.features))
    }
}

pub fn generate_in_memory(cfg: &Config) -> Result<Generated, CliError> {
    cfg.validate()?;
    let gt = make_ground_truth(&cfg.ground_truth())?;
    let nx = cfg.data.num_prompts;
    let train_prompts = nx - cfg.data.holdout_prompts;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Sampling));
    let mut triplets = Vec::with_capacity(cfg.data.num_triplets);
    while triplets.len() < cfg.data.num_triplets {
        let need = cfg.data.num_triplets - triplets.len();
        for t in sample_triplets(&gt, need, &mut rng)? {
            if t.prompt_id < train_prompts {
                triplets.push(t);
            }
        }
    }
    let prompts: Vec<usize> = (train_prompts..nx).collect();
    let labels = prompts.iter().map(|&x| gt.groups[x]).collect();
    Ok(Generated {
        ground_truth: gt,
        triplets,
        holdout: Holdout { prompts, labels },
    })
}

/// Writes the dataset, ground truth, held-out prompts and the resolved config.
pub fn generate(cfg: &Config, out: &Path) -> Result<Generated, CliError> {
    let g = generate_in_memory(cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    io::write_atomic(&out.join(io::DATASET_FILE), &g.dataset_bytes()?)?;
    io::write_json(&out.join(io::GROUND_TRUTH_FILE), &g.ground_truth)?;
    io::write_json(&out.join(io::HOLDOUT_FILE), &g.holdout)?;
    io::write_atomic(&out.join(io::CONFIG_FILE), cfg.to_toml_string()?.as_bytes())?;
    Ok(g)
}

/// Initial model for a run. Dimensions and reference come from the ground
/// truth when present, otherwise from the config with a uniform reference.
pub fn build_model(cfg: &Config, features: Option<&Matrix>, truth: Option<&GroundTruth>) -> Result<Model, CliError> {
    let (nx, ny, nk) = match truth {
        Some(gt) => (gt.config.num_prompts, gt.config.vocab_size, cfg.data.num_experts),
        None => (cfg.data.num_prompts, cfg.data.vocab_size, cfg.data.num_experts),
    };
    let space = match features.or(truth.map(|gt| &gt.features)) {
        Some(f) => ProblemSpace::with_features(nx, ny, nk, f.clone())?,
        None => ProblemSpace::new(nx, ny, nk)?,
    };
    let base = match truth {
        Some(gt) => gt.reference.clone(),
        None => ReferencePolicy::uniform(nx, ny),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Init));
    let references = match cfg.model.reference {
        ReferenceMode::Shared => References::Shared(base),
        ReferenceMode::PerExpert => {
            let mut refs = Vec::with_capacity(nk);
            for _ in 0..nk {
                let mut logits = Matrix::zeros(nx, ny);
                for x in 0..nx {
                    for y in 0..ny {
                        let noise: f64 = rng.sample(StandardNormal);
                        logits.set(x, y, base.log_prob(x, y) + cfg.model.reference_noise * noise);
                    }
                }
                refs.push(ReferencePolicy::from_logits(&logits)?);
            }
            References::PerExpert(refs)
        }
    };
    let gating = match cfg.train.mode {
        Mode::Mix => Gating::uniform(nk),
        Mode::Moe => {
            let d = space.feature_dim();
            let s = cfg.model.gate_init_scale;
            let weight: Vec<f64> = (0..nk * d)
                .map(|_| if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 })
                .collect();
            Gating::Linear {
                weight: Matrix::from_vec(nk, d, weight)?,
                bias: vec![0.0; nk],
            }
        }
    };
    Ok(Model::initialize(
        space,
        references,
        gating,
        &cfg.model.init,
        cfg.train.hyper.beta,
        &mut rng,
    )?)
}

fn run_trainer(
    mut trainer: Trainer<'_>,
    mut on_epoch: impl FnMut(&Trainer<'_>) -> Result<(), CliError>,
) -> Result<moedpo_core::em::TrainState, CliError> {
    on_epoch(&trainer)?;
    while trainer.state.epoch < trainer.config.epochs
        && !trainer.state.converged
        && trainer.state.iteration < trainer.config.hyper.max_iters
    {
        trainer.run_epoch()?;
        on_epoch(&trainer)?;
    }
    Ok(trainer.state)
}

pub fn train_in_memory(
    cfg: &Config,
    triplets: &[PreferenceTriplet],
    features: Option<&Matrix>,
    truth: Option<&GroundTruth>,
) -> Result<Checkpoint, CliError> {
    cfg.validate()?;
    let model = build_model(cfg, features, truth)?;
    let trainer = Trainer::new(model, cfg.trainer(), triplets)?;
    let state = run_trainer(trainer, |_| Ok(()))?;
    Ok(Checkpoint::new(cfg.clone(), cfg.trainer(), state))
}

fn load_truth(data_dir: &Path) -> Result<Option<GroundTruth>, CliError> {
    let path = data_dir.join(io::GROUND_TRUTH_FILE);
    if path.exists() {
        Ok(Some(io::read_json(&path)?))
    } else {
        Ok(None)
    }
}

fn load_holdout(data_dir: &Path) -> Result<Option<Holdout>, CliError> {
    let path = data_dir.join(io::HOLDOUT_FILE);
    if path.exists() {
        Ok(Some(io::read_json(&path)?))
    } else {
        Ok(None)
    }
}

/// Trains on `data_dir/dataset.jsonl`, rewriting the checkpoint after every
/// epoch. With `resume`, continues from an existing checkpoint in `out`.
pub fn train(cfg: &Config, data_dir: &Path, out: &Path, resume: bool) -> Result<Checkpoint, CliError> {
    cfg.validate()?;
    let data = io::read_dataset(&data_dir.join(io::DATASET_FILE))?;
    let truth = load_truth(data_dir)?;
    let nx = truth.as_ref().map_or(cfg.data.num_prompts, |gt| gt.config.num_prompts);
    let features = data.feature_matrix(nx)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ck_path = out.join(io::CHECKPOINT_FILE);
    let trainer_cfg = cfg.trainer();
    let trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        Trainer::resume(ck.state, trainer_cfg.clone(), &data.triplets)?
    } else {
        let model = build_model(cfg, features.as_ref(), truth.as_ref())?;
        Trainer::new(model, trainer_cfg.clone(), &data.triplets)?
    };
    let state = run_trainer(trainer, |t| {
        Checkpoint::new(cfg.clone(), trainer_cfg.clone(), t.state.clone()).save(&ck_path)?;
        io::write_metrics(&out.join(io::METRICS_FILE), &t.state.metrics, t.state.model.num_experts())
    })?;
    Ok(Checkpoint::new(cfg.clone(), trainer_cfg, state))
}

/// Evaluates a checkpoint on the dataset in `data_dir` and writes `eval.json`
/// next to the checkpoint.
pub fn eval(checkpoint: &Path, data_dir: &Path) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = io::read_dataset(&data_dir.join(io::DATASET_FILE))?;
    let truth = load_truth(data_dir)?;
    let holdout = load_holdout(data_dir)?;
    let report = evaluate(&ck.state.model, &data.triplets, truth.as_ref(), holdout.as_ref())?;
    let dir = match checkpoint.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    io::write_json(&dir.join(io::EVAL_FILE), &report)?;
    Ok(report)
}

/// Runs the battery and, if `out` is given, writes `verify.json` there.
pub fn verify(seed: u64, fault: Fault, out: Option<&Path>) -> Result<VerifyReport, CliError> {
    let report = run_battery(seed, fault);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        io::write_json(&dir.join(io::VERIFY_FILE), &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut cfg = Config::default();
        cfg.data.num_experts = 2;
        cfg.data.num_prompts = 6;
        cfg.data.vocab_size = 4;
        cfg.data.num_triplets = 120;
        cfg.data.holdout_prompts = 2;
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn holdout_prompts_get_no_triplets() {
        let g = generate_in_memory(&small()).unwrap();
        assert_eq!(g.triplets.len(), 120);
        assert!(g.triplets.iter().all(|t| t.prompt_id < 4));
        assert_eq!(g.holdout.prompts, vec![4, 5]);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut cfg = small();
        cfg.train.epochs = 0;
        let g = generate_in_memory(&cfg).unwrap();
        let ck = train_in_memory(&cfg, &g.triplets, None, Some(&g.ground_truth)).unwrap();
        assert_eq!(ck.state.model, build_model(&cfg, None, Some(&g.ground_truth)).unwrap());
        assert_eq!(ck.state.epoch, 0);
    }

    #[test]
    fn moe_uses_ground_truth_features() {
        let mut cfg = small();
        cfg.train.mode = Mode::Moe;
        let g = generate_in_memory(&cfg).unwrap();
        let m = build_model(&cfg, None, Some(&g.ground_truth)).unwrap();
        assert_eq!(m.space.features, g.ground_truth.features);
        assert!(matches!(m.gating, Gating::Linear { .. }));
    }

    #[test]
    fn per_expert_references_differ() {
        let mut cfg = small();
        cfg.model.reference = ReferenceMode::PerExpert;
        let m = build_model(&cfg, None, None).unwrap();
        assert_ne!(m.references.for_expert(0), m.references.for_expert(1));
    }
}
