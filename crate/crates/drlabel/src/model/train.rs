//! Training: seeded shuffling, optional noisy-node augmentation appended to
//! each batch, exact batch-mean gradients (computed per instance in
//! parallel, reduced in deterministic order), and Adam updates.

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::geometry::edge_magnitude_list;

use super::loss::{attach_loss, effective_weights, LossTarget, LossTerms, LossWeights};
use super::metrics::{evaluate, Metrics};
use super::net::{forward, ForwardOptions, ModelInput};
use super::noisy::noisy_augment_record;
use super::params::{HeadMode, ModelParams};
use super::ModelError;

/// A record plus its precomputed edge magnitude targets (aligned with the
/// record's edge list).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub record: DatasetRecord,
    pub edge_magnitudes: Vec<f64>,
}

impl TrainItem {
    pub fn prepare(record: DatasetRecord) -> Result<Self, ModelError> {
        let edges: Vec<(usize, usize)> = record.edges.iter().map(|&[i, j]| (i, j)).collect();
        let edge_magnitudes = edge_magnitude_list(
            &record.initial_positions,
            &record.displacements(),
            &edges,
        )?;
        Ok(TrainItem { record, edge_magnitudes })
    }
}

/// Mean gradient of the total loss over a batch, plus the mean loss terms.
pub fn batch_gradient(
    params: &ModelParams,
    items: &[&TrainItem],
    weights: &LossWeights,
) -> Result<(ModelParams, LossTerms), ModelError> {
    if items.is_empty() {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    }
    let eff = effective_weights(params.head_mode, weights);
    let per_item: Vec<Result<(ModelParams, LossTerms), ModelError>> = items
        .par_iter()
        .map(|item| {
            let record = &item.record;
            let edges: Vec<(usize, usize)> = record.edges.iter().map(|&[i, j]| (i, j)).collect();
            let input = ModelInput {
                atom_types: &record.atom_types,
                positions: &record.initial_positions,
                edges: &edges,
            };
            let mut pass = forward(
                params,
                &input,
                ForwardOptions { param_grads: true, position_grads: false },
            )?;
            let displacements = record.displacements();
            let target = LossTarget {
                energy: record.equilibrium_energy,
                displacements: &displacements,
                free_mask: &record.free_mask,
                edge_magnitudes: matches!(params.head_mode, HeadMode::Drlabel)
                    .then_some(item.edge_magnitudes.as_slice()),
            };
            let ids = attach_loss(&mut pass, &target, &eff)?;
            let terms = pass.loss_terms(&ids);
            let (grads, _) = pass.backward(&ids, params);
            Ok((grads, terms))
        })
        .collect();

    let inv_n = 1.0 / items.len() as f64;
    let mut grad_sum = params.zeros_like();
    let mut terms = LossTerms::default();
    for result in per_item {
        let (g, t) = result?;
        add_scaled(&mut grad_sum, &g, inv_n);
        terms.total += t.total * inv_n;
        terms.graph += t.graph * inv_n;
        terms.node += t.node * inv_n;
        terms.edge += t.edge * inv_n;
    }
    Ok((grad_sum, terms))
}

fn add_scaled(dst: &mut ModelParams, src: &ModelParams, scale: f64) {
    let src_tensors = src.tensors();
    for ((_, d), (_, s)) in dst.tensors_mut().into_iter().zip(src_tensors) {
        d.scaled_add(scale, s);
    }
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bias2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let grad_tensors = grads.tensors();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        for (idx, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = grad_tensors[idx].1;
            let m = &mut *m_tensors[idx].1;
            let v = &mut *v_tensors[idx].1;
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of each batch that gets a noisy-augmented copy appended.
    pub noisy_fraction: f64,
    pub noisy_sigma: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub aewt_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr: 1e-3,
            batch_size: 16,
            noisy_fraction: 0.0,
            noisy_sigma: 0.05,
            seed: 1,
            weights: LossWeights::default(),
            aewt_threshold: super::metrics::DEFAULT_AEWT_THRESHOLD,
        }
    }
}

/// One row of training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_graph: f64,
    pub train_node: f64,
    pub train_edge: f64,
    pub val_energy_mae: f64,
    pub val_aewt: f64,
    pub val_node_mae: f64,
}

/// Trains for `config.epochs` epochs; returns the final parameters and the
/// per-epoch history. Deterministic for a given seed. Fails with
/// `DivergedLoss` if any batch loss goes non-finite.
pub fn train(
    mut params: ModelParams,
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), ModelError> {
    if train_records.is_empty() {
        return Err(ModelError::ShapeMismatch("empty train split".into()));
    }
    config.weights.validate()?;
    let items: Vec<TrainItem> = train_records
        .iter()
        .map(|r| TrainItem::prepare(r.clone()))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = LossTerms::default();
        let mut seen = 0usize;
        for batch_idx in order.chunks(config.batch_size.max(1)) {
            // Augmented copies are appended so the originals always train.
            let n_aug = (config.noisy_fraction * batch_idx.len() as f64).round() as usize;
            let mut aug_items = Vec::with_capacity(n_aug);
            if n_aug > 0 {
                let mut chosen =
                    rand::seq::index::sample(&mut rng, batch_idx.len(), n_aug.min(batch_idx.len()))
                        .into_vec();
                chosen.sort_unstable();
                for pos in chosen {
                    let base = &items[batch_idx[pos]];
                    let record = noisy_augment_record(&base.record, config.noisy_sigma, &mut rng);
                    aug_items.push(TrainItem::prepare(record)?);
                }
            }
            let mut batch: Vec<&TrainItem> = batch_idx.iter().map(|&i| &items[i]).collect();
            batch.extend(aug_items.iter());

            let (grads, terms) = batch_gradient(&params, &batch, &config.weights)?;
            if !terms.total.is_finite() {
                return Err(ModelError::DivergedLoss { epoch });
            }
            let n = batch.len();
            sums.total += terms.total * n as f64;
            sums.graph += terms.graph * n as f64;
            sums.node += terms.node * n as f64;
            sums.edge += terms.edge * n as f64;
            seen += n;
            adam.step(&mut params, &grads, config.lr);
        }

        let val: Option<Metrics> = if val_records.is_empty() {
            None
        } else {
            Some(evaluate(&params, val_records, config.aewt_threshold)?)
        };
        let inv = 1.0 / seen.max(1) as f64;
        history.push(EpochStats {
            epoch,
            train_total: sums.total * inv,
            train_graph: sums.graph * inv,
            train_node: sums.node * inv,
            train_edge: sums.edge * inv,
            val_energy_mae: val.map(|m| m.energy_mae).unwrap_or(f64::NAN),
            val_aewt: val.map(|m| m.aewt_percent).unwrap_or(f64::NAN),
            val_node_mae: val.map(|m| m.node_l2_mae).unwrap_or(f64::NAN),
        });
    }
    Ok((params, history))
}
