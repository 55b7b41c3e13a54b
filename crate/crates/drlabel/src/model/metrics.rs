//! Evaluation metrics: energy MAE, the fraction of energy errors strictly
//! inside a threshold (AEwT, percent), and the node position L2-MAE over
//! free atoms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::graph::DirectedGraph;

use super::net::{forward, ForwardOptions, ModelInput};
use super::params::ModelParams;
use super::ModelError;

pub const DEFAULT_AEWT_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub n_instances: usize,
    pub energy_mae: f64,
    /// Percentage of instances with |energy error| strictly below the
    /// threshold.
    pub aewt_percent: f64,
    pub node_l2_mae: f64,
    /// Mean fraction of nodes per instance whose sphere fit degenerated.
    pub degenerate_node_rate: f64,
}

struct InstanceEval {
    energy_err: f64,
    node_mae: Option<f64>,
    degenerate_fraction: f64,
}

fn eval_one(
    params: &ModelParams,
    record: &DatasetRecord,
    graph: &DirectedGraph,
) -> Result<InstanceEval, ModelError> {
    let input = ModelInput {
        atom_types: &record.atom_types,
        positions: &record.initial_positions,
        edges: graph.edges(),
    };
    let pass = forward(params, &input, ForwardOptions::default())?;
    let energy_err = (pass.energy() - record.equilibrium_energy).abs();
    let displacements = pass.displacements();
    let targets = record.displacements();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((d_hat, d_star), &free) in displacements.iter().zip(&targets).zip(&record.free_mask) {
        if free {
            sum += (*d_hat - *d_star).norm();
            count += 1;
        }
    }
    let node_mae = (count > 0).then(|| sum / count as f64);
    let degenerate_fraction = pass.degenerate_nodes.len() as f64 / record.n_atoms() as f64;
    Ok(InstanceEval { energy_err, node_mae, degenerate_fraction })
}

/// Evaluates with each record's stored edge set.
pub fn evaluate(
    params: &ModelParams,
    records: &[DatasetRecord],
    aewt_threshold: f64,
) -> Result<Metrics, ModelError> {
    let graphs: Vec<DirectedGraph> = records.iter().map(|r| r.graph()).collect();
    evaluate_with_graphs(params, records, &graphs, aewt_threshold)
}

/// Evaluates with caller-supplied (possibly perturbed) graphs, one per
/// record. Results are reduced in record order, so the output is
/// deterministic regardless of parallel scheduling.
pub fn evaluate_with_graphs(
    params: &ModelParams,
    records: &[DatasetRecord],
    graphs: &[DirectedGraph],
    aewt_threshold: f64,
) -> Result<Metrics, ModelError> {
    if records.is_empty() {
        return Err(ModelError::ShapeMismatch("empty evaluation set".into()));
    }
    if records.len() != graphs.len() {
        return Err(ModelError::ShapeMismatch("one graph per record required".into()));
    }
    let evals: Vec<Result<InstanceEval, ModelError>> = records
        .par_iter()
        .zip(graphs.par_iter())
        .map(|(record, graph)| eval_one(params, record, graph))
        .collect();

    let mut energy_sum = 0.0;
    let mut within = 0usize;
    let mut node_sum = 0.0;
    let mut node_count = 0usize;
    let mut degen_sum = 0.0;
    let n = records.len();
    for e in evals {
        let e = e?;
        energy_sum += e.energy_err;
        if e.energy_err < aewt_threshold {
            within += 1;
        }
        if let Some(mae) = e.node_mae {
            node_sum += mae;
            node_count += 1;
        }
        degen_sum += e.degenerate_fraction;
    }
    Ok(Metrics {
        n_instances: n,
        energy_mae: energy_sum / n as f64,
        aewt_percent: 100.0 * within as f64 / n as f64,
        node_l2_mae: if node_count > 0 { node_sum / node_count as f64 } else { 0.0 },
        degenerate_node_rate: degen_sum / n as f64,
    })
}
