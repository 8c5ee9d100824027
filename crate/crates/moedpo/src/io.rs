//! File formats: JSON-lines datasets, JSON ground truth and checkpoints,
//! CSV metrics. Every write goes to a sibling temporary file that is then
//! renamed over the target.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use moedpo_core::em::{EpochMetrics, TrainState, TrainerConfig};
use moedpo_core::{Matrix, PreferenceTriplet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const VERIFY_FILE: &str = "verify.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const CHECKPOINT_VERSION: u32 = 1;

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub prompt_id: usize,
    pub y_plus: usize,
    pub y_minus: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_label: Option<usize>,
    /// Gating features of the prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub triplets: Vec<PreferenceTriplet>,
    /// Features of every prompt that carried them.
    pub prompt_features: BTreeMap<usize, Vec<f64>>,
}

impl Dataset {
    /// Feature matrix for `num_prompts` prompts, if every prompt has
    /// features of one common dimension.
    pub fn feature_matrix(&self, num_prompts: usize) -> Result<Option<Matrix>, CliError> {
        if self.prompt_features.is_empty() {
            return Ok(None);
        }
        if (0..num_prompts).any(|x| !self.prompt_features.contains_key(&x)) {
            return Ok(None);
        }
        let rows: Vec<Vec<f64>> = (0..num_prompts).map(|x| self.prompt_features[&x].clone()).collect();
        Ok(Some(Matrix::from_rows(&rows)?))
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Format(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// JSON-lines encoding of a dataset, features repeated on every line.
pub fn dataset_bytes(triplets: &[PreferenceTriplet], features: Option<&Matrix>) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for t in triplets {
        let record = DatasetRecord {
            prompt_id: t.prompt_id,
            y_plus: t.y_plus,
            y_minus: t.y_minus,
            source_label: t.source_label,
            features: features.map(|f| f.row(t.prompt_id).to_vec()),
            user_features: t.user_features.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, triplets: &[PreferenceTriplet], features: Option<&Matrix>) -> Result<(), CliError> {
    write_atomic(path, &dataset_bytes(triplets, features)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut data = Dataset::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: DatasetRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(f) = &r.features {
            match data.prompt_features.get(&r.prompt_id) {
                Some(prev) if prev != f => {
                    return Err(parse_err(format!("features of prompt {} differ from an earlier line", r.prompt_id)))
                }
                Some(_) => {}
                None => {
                    data.prompt_features.insert(r.prompt_id, f.clone());
                }
            }
        }
        data.triplets.push(PreferenceTriplet {
            prompt_id: r.prompt_id,
            y_plus: r.y_plus,
            y_minus: r.y_minus,
            source_label: r.source_label,
            user_features: r.user_features,
        });
    }
    if data.triplets.is_empty() {
        return Err(CliError::Format(format!("{}: dataset is empty", path.display())));
    }
    Ok(data)
}

/// Prompts withheld from training, with their group labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub prompts: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: Config,
    pub trainer: TrainerConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: Config, trainer: TrainerConfig, state: TrainState) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config,
            trainer,
            state,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(CliError::Format(format!(
                "{}: checkpoint format {} is not supported",
                path.display(),
                ck.format_version
            )));
        }
        ck.state.model.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)
    }
}

/// CSV with one row per epoch.
pub fn metrics_csv(metrics: &[EpochMetrics], num_experts: usize) -> Result<Vec<u8>, CliError> {
    let labels: BTreeSet<usize> = metrics
        .iter()
        .flat_map(|m| m.mean_q_by_source.iter().map(|s| s.label))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "elbo".into(), "mbt_loss".into()];
    for s in &labels {
        for k in 0..num_experts {
            header.push(format!("q_source{s}_expert{k}"));
        }
    }
    header.extend(
        [
            "gating_ce",
            "tau",
            "lambda_ent",
            "lambda_conf",
            "lambda_kl_unif",
            "lambda_kl_w",
            "lambda_kl_w_global",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for m in metrics {
        let mut row = vec![m.epoch.to_string(), m.elbo.to_string(), m.mbt_loss.to_string()];
        for s in &labels {
            match m.mean_q_by_source.iter().find(|e| e.label == *s) {
                Some(e) => row.extend(e.mean_q.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat(String::new()).take(num_experts)),
            }
        }
        row.push(m.gating_ce.to_string());
        row.push(m.tau.map(|t| t.to_string()).unwrap_or_default());
        match &m.lambdas {
            Some(l) => row.extend([l.ent, l.conf, l.kl_unif, l.kl_w, l.kl_w_global].map(|v| v.to_string())),
            None => row.extend(std::iter::repeat(String::new()).take(5)),
        }
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Format(format!("metrics buffer: {e}")))
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics], num_experts: usize) -> Result<(), CliError> {
    write_atomic(path, &metrics_csv(metrics, num_experts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let triplets = vec![
            PreferenceTriplet::new(0, 1, 2).with_source(1),
            PreferenceTriplet::new(1, 2, 0).with_source(0),
        ];
        let feats = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.25, -1.0]]).unwrap();
        write_dataset(&path, &triplets, Some(&feats)).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.triplets, triplets);
        assert_eq!(back.feature_matrix(2).unwrap().unwrap(), feats);
        assert!(!dir.path().join(".d.jsonl.tmp").exists());
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"prompt_id\":0,\"y_plus\":1,\"y_minus\":0}\n{\"prompt_id\":0,\"y_plus\":1}\n").unwrap();
        match read_dataset(&path) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "{\"prompt_id\":0,\"y_plus\":1,\"y_minus\":0,\"extra\":1}\n").unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn conflicting_features_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"prompt_id\":0,\"y_plus\":1,\"y_minus\":0,\"features\":[1.0]}\n{\"prompt_id\":0,\"y_plus\":0,\"y_minus\":1,\"features\":[2.0]}\n",
        )
        .unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn metrics_header() {
        let m = EpochMetrics {
            epoch: 0,
            elbo: -0.5,
            mbt_loss: 0.7,
            mean_q_by_source: vec![moedpo_core::em::SourceMean {
                label: 1,
                count: 3,
                mean_q: vec![0.25, 0.75],
            }],
            gating_ce: 0.69,
            tau: Some(0.5),
            lambdas: None,
        };
        let text = String::from_utf8(metrics_csv(&[m], 2).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,elbo,mbt_loss,q_source1_expert0,q_source1_expert1,gating_ce,tau,lambda_ent,lambda_conf,lambda_kl_unif,lambda_kl_w,lambda_kl_w_global"
        );
        assert_eq!(lines.next().unwrap(), "0,-0.5,0.7,0.25,0.75,0.69,0.5,,,,,");
    }
}
