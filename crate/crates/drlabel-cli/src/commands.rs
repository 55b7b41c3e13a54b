//! The five harness commands: gen-data, train, eval, robustness, audit.
//! Every command is deterministic given its seed arguments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drlabel::audit::{run_audit, AuditReport};
use drlabel::dataset::{
    read_jsonl, read_meta, write_jsonl, write_meta, DatasetMeta, DatasetRecord,
};
use drlabel::graph::{perturb_graph, DirectedGraph, PerturbMode};
use drlabel::model::{
    evaluate, evaluate_with_graphs, train, Checkpoint, HeadMode, Metrics, ModelParams,
};
use drlabel::sim::generate_dataset;

use crate::config::{split_indices, CheckpointNote, ExperimentConfig};
use crate::report::{history_csv, robustness_csv, write_json, write_text, RobustnessRow};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub path: PathBuf,
    pub n_records: usize,
    pub attempted: usize,
    pub non_converged: usize,
    pub convergence_rate: f64,
    pub mean_free_displacement: f64,
    pub isolated_node_instances: usize,
}

/// Generates the dataset, builds each instance's graph under the configured
/// policy, and writes JSONL plus a metadata sidecar. Byte-identical for a
/// given config and seed.
pub fn gen_data(config: &ExperimentConfig, out_dir: &Path) -> Result<GenDataSummary, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let generated = generate_dataset(&config.dataset.params, config.dataset.seed)?;
    let mut records = Vec::with_capacity(generated.instances.len());
    let mut isolated_node_instances = 0usize;
    for instance in &generated.instances {
        let graph = config.graph.build(&instance.system)?;
        if !graph.isolated_nodes().is_empty() {
            isolated_node_instances += 1;
        }
        records.push(DatasetRecord::from_instance(instance, &graph));
    }
    let path = out_dir.join(DATASET_FILE);
    write_jsonl(&path, &records)?;
    let meta = DatasetMeta {
        n_records: records.len(),
        n_species: config.dataset.params.n_species,
        graph: config.graph.clone(),
        seed: config.dataset.seed,
        convergence_rate: generated.instances.len() as f64 / generated.attempted as f64,
        mean_free_displacement: generated.mean_free_displacement(),
    };
    write_meta(&path, &meta)?;
    Ok(GenDataSummary {
        path,
        n_records: records.len(),
        attempted: generated.attempted,
        non_converged: generated.non_converged,
        convergence_rate: meta.convergence_rate,
        mean_free_displacement: meta.mean_free_displacement,
        isolated_node_instances,
    })
}

fn load_records(dataset: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    if !dataset.exists() {
        return Err(CliError::validation(format!("dataset {} not found", dataset.display())));
    }
    Ok(read_jsonl(dataset)?)
}

fn check_species(records: &[DatasetRecord], n_species: usize) -> Result<(), CliError> {
    for record in records {
        if let Some(&t) = record.atom_types.iter().max() {
            if t as usize >= n_species {
                return Err(CliError::validation(format!(
                    "dataset contains atom type {t} but the model embeds only {n_species} species"
                )));
            }
        }
    }
    Ok(())
}

fn select<'a>(records: &'a [DatasetRecord], idx: &[usize]) -> Vec<DatasetRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub split_index: usize,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub head_mode: HeadMode,
    pub n_records: usize,
    pub splits: Vec<SplitOutcome>,
    /// mean and standard deviation of test metrics across splits (present
    /// when more than one split was trained)
    pub test_energy_mae_mean: Option<f64>,
    pub test_energy_mae_std: Option<f64>,
    pub test_node_mae_mean: Option<f64>,
    pub test_node_mae_std: Option<f64>,
}

pub struct TrainArgs {
    pub config: ExperimentConfig,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Trains one model per split (deterministic split and training seeds),
/// writing a checkpoint, a CSV history, and a summary JSON.
pub fn train_cmd(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let config = &args.config;
    let records = load_records(&args.dataset)?;
    check_species(&records, config.model.dims.n_species)?;
    if let Some(meta) = read_meta(&args.dataset)? {
        if meta.graph != config.graph {
            return Err(CliError::validation(format!(
                "config graph policy {:?} differs from the dataset's {:?}",
                config.graph, meta.graph
            )));
        }
    }
    let n_splits = config.train.n_splits.max(1);
    if args.resume.is_some() && n_splits != 1 {
        return Err(CliError::validation("--resume requires a single split"));
    }
    std::fs::create_dir_all(&args.out_dir)?;

    let mut outcomes = Vec::with_capacity(n_splits);
    for split_index in 0..n_splits {
        let split_seed = config.train.split_seed.wrapping_add(split_index as u64);
        let (train_idx, val_idx, test_idx) =
            split_indices(records.len(), &config.train.split, split_seed)?;
        let train_records = select(&records, &train_idx);
        let val_records = select(&records, &val_idx);
        let test_records = select(&records, &test_idx);

        let (initial, epochs_done) = match &args.resume {
            Some(path) => {
                let (params, note) = load_checkpoint(path)?;
                if params.head_mode != config.model.head_mode {
                    return Err(CliError::validation(
                        "resume checkpoint head mode differs from config",
                    ));
                }
                (params, note.epochs_completed)
            }
            None => (
                ModelParams::init(
                    &config.model.dims,
                    config.model.head_mode,
                    config.model.interpos_frequency,
                    config.model.init_seed.wrapping_add(split_index as u64),
                ),
                0,
            ),
        };

        let mut train_config = config.train_config();
        train_config.seed = train_config.seed.wrapping_add(split_index as u64);
        let (params, mut history) = train(initial, &train_records, &val_records, &train_config)?;
        for (offset, row) in history.iter_mut().enumerate() {
            row.epoch = epochs_done + offset;
        }

        let suffix = if n_splits == 1 { String::new() } else { format!("_split{split_index}") };
        let checkpoint_path = args.out_dir.join(format!("checkpoint{suffix}.json"));
        let history_path = args.out_dir.join(format!("history{suffix}.csv"));

        let note = CheckpointNote {
            config: config.clone(),
            dataset_path: args.dataset.clone(),
            n_records: records.len(),
            split_seed,
            split_index,
            epochs_completed: epochs_done + config.train.epochs,
        };
        let checkpoint = Checkpoint::from_params(&params, serde_json::to_value(&note)?);
        checkpoint.save(&checkpoint_path)?;
        write_text(&history_path, &history_csv(&history))?;

        let val = (!val_records.is_empty())
            .then(|| evaluate(&params, &val_records, config.eval.aewt_threshold))
            .transpose()?;
        let test = (!test_records.is_empty())
            .then(|| evaluate(&params, &test_records, config.eval.aewt_threshold))
            .transpose()?;
        outcomes.push(SplitOutcome {
            split_index,
            checkpoint: checkpoint_path,
            history: history_path,
            val,
            test,
        });
    }

    let test_metrics: Vec<&Metrics> = outcomes.iter().filter_map(|o| o.test.as_ref()).collect();
    let (mut e_mean, mut e_std, mut n_mean, mut n_std) = (None, None, None, None);
    if test_metrics.len() > 1 {
        let stats = |values: Vec<f64>| -> (f64, f64) {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            (mean, var.sqrt())
        };
        let (m, s) = stats(test_metrics.iter().map(|m| m.energy_mae).collect());
        e_mean = Some(m);
        e_std = Some(s);
        let (m, s) = stats(test_metrics.iter().map(|m| m.node_l2_mae).collect());
        n_mean = Some(m);
        n_std = Some(s);
    }
    let summary = TrainSummary {
        head_mode: config.model.head_mode,
        n_records: records.len(),
        splits: outcomes,
        test_energy_mae_mean: e_mean,
        test_energy_mae_std: e_std,
        test_node_mae_mean: n_mean,
        test_node_mae_std: n_std,
    };
    write_json(&args.out_dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointNote), CliError> {
    if !path.exists() {
        return Err(CliError::validation(format!("checkpoint {} not found", path.display())));
    }
    let checkpoint = Checkpoint::load(path)?;
    let note: CheckpointNote = serde_json::from_value(checkpoint.train_config.clone())
        .map_err(|e| CliError::validation(format!("checkpoint lacks a valid config note: {e}")))?;
    Ok((checkpoint.into_params()?, note))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub head_mode: HeadMode,
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

/// Evaluates a checkpoint on the dataset splits it was trained with.
pub fn eval_cmd(
    checkpoint: &Path,
    dataset: &Path,
    out_dir: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let (params, note) = load_checkpoint(checkpoint)?;
    let records = load_records(dataset)?;
    if records.len() != note.n_records {
        return Err(CliError::validation(format!(
            "dataset has {} records but the checkpoint was trained on {}",
            records.len(),
            note.n_records
        )));
    }
    if let Some(meta) = read_meta(dataset)? {
        if meta.graph != note.config.graph {
            return Err(CliError::validation(format!(
                "dataset graph policy {:?} differs from the checkpoint's {:?}",
                meta.graph, note.config.graph
            )));
        }
    }
    check_species(&records, params.dims.n_species)?;
    let (train_idx, val_idx, test_idx) =
        split_indices(records.len(), &note.config.train.split, note.split_seed)?;
    let threshold = note.config.eval.aewt_threshold;
    let eval_split = |idx: &Vec<usize>| -> Result<Option<Metrics>, CliError> {
        if idx.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(&params, &select(&records, idx), threshold)?))
    };
    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        head_mode: params.head_mode,
        train: eval_split(&train_idx)?,
        val: eval_split(&val_idx)?,
        test: eval_split(&test_idx)?,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(31);
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    }
    h
}

pub struct RobustnessArgs {
    pub checkpoint_sum: PathBuf,
    pub checkpoint_drlabel: PathBuf,
    pub dataset: PathBuf,
    pub fractions: Vec<f64>,
    pub modes: Vec<PerturbMode>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Edge add/drop robustness sweep: evaluates both heads' node L2-MAE on
/// seeded-perturbed test graphs and reports absolute and relative MAE
/// increases per fraction.
pub fn robustness_cmd(args: &RobustnessArgs) -> Result<Vec<RobustnessRow>, CliError> {
    let (params_sum, note_sum) = load_checkpoint(&args.checkpoint_sum)?;
    let (params_drl, note_drl) = load_checkpoint(&args.checkpoint_drlabel)?;
    if params_sum.head_mode != HeadMode::Sum {
        return Err(CliError::validation("--checkpoint-sum must hold a sum-head model"));
    }
    if params_drl.head_mode != HeadMode::Drlabel {
        return Err(CliError::validation("--checkpoint-drlabel must hold a drlabel-head model"));
    }
    if note_sum.n_records != note_drl.n_records
        || note_sum.split_seed != note_drl.split_seed
        || note_sum.config.train.split != note_drl.config.train.split
        || note_sum.config.graph != note_drl.config.graph
    {
        return Err(CliError::validation(
            "checkpoints were not trained on the same dataset/split/graph policy",
        ));
    }
    let records = load_records(&args.dataset)?;
    if records.len() != note_sum.n_records {
        return Err(CliError::validation("dataset does not match the checkpoints"));
    }
    let (_, _, test_idx) =
        split_indices(records.len(), &note_sum.config.train.split, note_sum.split_seed)?;
    if test_idx.is_empty() {
        return Err(CliError::validation("test split is empty"));
    }
    let test_records = select(&records, &test_idx);
    let threshold = note_sum.config.eval.aewt_threshold;

    let clean_sum = evaluate(&params_sum, &test_records, threshold)?.node_l2_mae;
    let clean_drl = evaluate(&params_drl, &test_records, threshold)?.node_l2_mae;

    let mut rows = Vec::new();
    for (mode_idx, &mode) in args.modes.iter().enumerate() {
        for (frac_idx, &fraction) in args.fractions.iter().enumerate() {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(CliError::validation(format!("fraction {fraction} outside [0, 1]")));
            }
            let (sum_mae, drl_mae) = if fraction == 0.0 {
                (clean_sum, clean_drl)
            } else {
                let graphs: Vec<DirectedGraph> = test_records
                    .iter()
                    .enumerate()
                    .map(|(rec_idx, record)| {
                        let sub_seed = mix_seed(
                            args.seed,
                            &[mode_idx as u64, frac_idx as u64, rec_idx as u64],
                        );
                        perturb_graph(&record.graph(), mode, fraction, sub_seed)
                            .map(|(graph, _)| graph)
                    })
                    .collect::<Result<_, _>>()?;
                (
                    evaluate_with_graphs(&params_sum, &test_records, &graphs, threshold)?
                        .node_l2_mae,
                    evaluate_with_graphs(&params_drl, &test_records, &graphs, threshold)?
                        .node_l2_mae,
                )
            };
            rows.push(RobustnessRow {
                mode: mode.to_string(),
                fraction,
                sum_node_mae: sum_mae,
                drlabel_node_mae: drl_mae,
                sum_delta: sum_mae - clean_sum,
                drlabel_delta: drl_mae - clean_drl,
                sum_relative: (sum_mae - clean_sum) / clean_sum,
                drlabel_relative: (drl_mae - clean_drl) / clean_drl,
            });
        }
    }
    std::fs::create_dir_all(&args.out_dir)?;
    write_text(&args.out_dir.join("robustness.csv"), &robustness_csv(&rows))?;
    Ok(rows)
}

/// Runs the randomized property audits; `corrupt` is the negative-control
/// hook that must fail.
pub fn audit_cmd(
    trials: usize,
    seed: u64,
    corrupt: bool,
    out_dir: Option<&Path>,
) -> Result<AuditReport, CliError> {
    let report = run_audit(trials, seed, corrupt);
    if let Some(dir) = out_dir {
        write_json(&dir.join("audit.json"), &report)?;
    }
    Ok(report)
}
