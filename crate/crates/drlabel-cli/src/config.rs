//! Experiment configuration: a single JSON file with defaults for every
//! section; CLI flags override individual fields after loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drlabel::graph::GraphPolicy;
use drlabel::model::{HeadMode, LossWeights, ModelDims, TrainConfig, DEFAULT_AEWT_THRESHOLD};
use drlabel::sim::DatasetConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub graph: GraphPolicy,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSection::default(),
            graph: GraphPolicy::default(),
            model: ModelSection::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub params: DatasetConfig,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { params: DatasetConfig::default(), seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    #[serde(flatten)]
    pub dims: ModelDims,
    pub head_mode: HeadMode,
    pub interpos_frequency: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dims: ModelDims::default(),
            head_mode: HeadMode::Drlabel,
            interpos_frequency: 0,
            init_seed: 0,
        }
    }
}

/// Train/val/test proportions, either as fractions summing to ~1 or as
/// absolute counts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SplitSpec {
    Counts { train: usize, val: usize, test: usize },
    Fractions { train: f64, val: f64, test: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize), CliError> {
        match *self {
            SplitSpec::Counts { train, val, test } => {
                if train + val + test > n {
                    return Err(CliError::validation(format!(
                        "split counts {train}+{val}+{test} exceed dataset size {n}"
                    )));
                }
                Ok((train, val, test))
            }
            SplitSpec::Fractions { train, val, test } => {
                let sum = train + val + test;
                if !(0.99..=1.01).contains(&sum) || train <= 0.0 || val < 0.0 || test < 0.0 {
                    return Err(CliError::validation(format!(
                        "split fractions must be non-negative and sum to 1, got {train}/{val}/{test}"
                    )));
                }
                let n_train = (train * n as f64).round() as usize;
                let n_val = (val * n as f64).round() as usize;
                let n_test = n.saturating_sub(n_train + n_val);
                Ok((n_train.min(n), n_val.min(n - n_train.min(n)), n_test))
            }
        }
    }
}

/// Deterministic split of `0..n` into train/val/test index lists.
pub fn split_indices(
    n: usize,
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), CliError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let (n_train, n_val, n_test) = spec.counts(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..n_train + n_val + n_test].to_vec();
    Ok((train, val, test))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub noisy_fraction: f64,
    pub noisy_sigma: f64,
    pub seed: u64,
    pub split: SplitSpec,
    pub split_seed: u64,
    pub n_splits: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 40,
            lr: 1e-3,
            batch_size: 16,
            noisy_fraction: 0.0,
            noisy_sigma: 0.05,
            seed: 1,
            split: SplitSpec::default(),
            split_seed: 1234,
            n_splits: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    pub aewt_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { aewt_threshold: DEFAULT_AEWT_THRESHOLD }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::validation(format!("cannot parse config {}: {e}", p.display()))
                })
            }
        }
    }

    /// The library-level training config assembled from the sections.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            noisy_fraction: self.train.noisy_fraction,
            noisy_sigma: self.train.noisy_sigma,
            seed: self.train.seed,
            weights: self.loss,
            aewt_threshold: self.eval.aewt_threshold,
        }
    }
}

/// Bookkeeping block embedded in checkpoints so later commands can
/// reconstruct splits and validate dataset compatibility.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointNote {
    pub config: ExperimentConfig,
    pub dataset_path: PathBuf,
    pub n_records: usize,
    pub split_seed: u64,
    pub split_index: usize,
    pub epochs_completed: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let config = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn split_spec_accepts_counts_and_fractions() {
        let counts: SplitSpec = serde_json::from_str(r#"{"train":2000,"val":500,"test":500}"#).unwrap();
        assert_eq!(counts.counts(3000).unwrap(), (2000, 500, 500));
        let fracs: SplitSpec = serde_json::from_str(r#"{"train":0.6,"val":0.2,"test":0.2}"#).unwrap();
        assert_eq!(fracs.counts(10).unwrap(), (6, 2, 2));
    }

    #[test]
    fn split_indices_are_deterministic_and_disjoint() {
        let spec = SplitSpec::Fractions { train: 0.6, val: 0.2, test: 0.2 };
        let (a1, b1, c1) = split_indices(50, &spec, 9).unwrap();
        let (a2, b2, c2) = split_indices(50, &spec, 9).unwrap();
        assert_eq!((&a1, &b1, &c1), (&a2, &b2, &c2));
        let mut all: Vec<usize> = a1.iter().chain(&b1).chain(&c1).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 50);
    }

    #[test]
    fn oversized_counts_rejected() {
        let spec = SplitSpec::Counts { train: 100, val: 10, test: 10 };
        assert!(split_indices(50, &spec, 0).is_err());
    }
}
