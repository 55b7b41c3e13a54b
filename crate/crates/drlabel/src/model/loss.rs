//! Three-level loss: graph (absolute energy error), node (mean L2
//! displacement error over free atoms), edge (mean absolute magnitude
//! error), combined as `total = L_G + lambda L_V + gamma L_E`.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::vec3::Vec3;

use super::net::ForwardPass;
use super::params::{HeadMode, ModelParams};
use super::tape::ValueId;
use super::ModelError;

/// Relative weights of the node and edge supervision levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0)
            || !(self.gamma.is_finite() && self.gamma >= 0.0)
        {
            return Err(ModelError::ShapeMismatch(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Supervision targets for one instance. `edge_magnitudes` is aligned with
/// the forward pass's edge list and only consulted in drlabel mode.
#[derive(Debug, Clone)]
pub struct LossTarget<'a> {
    pub energy: f64,
    pub displacements: &'a [Vec3],
    pub free_mask: &'a [bool],
    pub edge_magnitudes: Option<&'a [f64]>,
}

/// Tape handles to the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossIds {
    pub total: ValueId,
    pub graph: ValueId,
    pub node: ValueId,
    pub edge: Option<ValueId>,
}

/// Realized loss values.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub graph: f64,
    pub node: f64,
    pub edge: f64,
}

/// Builds the loss on the pass's tape. In sum mode the edge term is forced
/// to zero (gamma is ignored); in drlabel mode edge magnitude targets are
/// required.
pub fn attach_loss(
    pass: &mut ForwardPass,
    target: &LossTarget,
    weights: &LossWeights,
) -> Result<LossIds, ModelError> {
    weights.validate()?;
    let n = target.displacements.len();
    if target.free_mask.len() != n {
        return Err(ModelError::ShapeMismatch("free mask length".into()));
    }
    let tape = &mut pass.tape;

    // L_G = |predicted energy - target energy|
    let e_target = tape.constant(Array2::from_elem((1, 1), target.energy));
    let e_diff = tape.sub(pass.energy_id, e_target);
    let graph_loss = tape.abs(e_diff);

    // L_V = mean over free atoms of || dp_hat - dp_star ||
    let mut target_mat = Array2::zeros((n, 3));
    for (r, d) in target.displacements.iter().enumerate() {
        target_mat[[r, 0]] = d.x;
        target_mat[[r, 1]] = d.y;
        target_mat[[r, 2]] = d.z;
    }
    let d_target = tape.constant(target_mat);
    let d_diff = tape.sub(pass.displacement_id, d_target);
    let norms = tape.row_norm(d_diff);
    let n_free = target.free_mask.iter().filter(|&&f| f).count();
    let weights_vec: Rc<Vec<f64>> = Rc::new(
        target
            .free_mask
            .iter()
            .map(|&f| if f && n_free > 0 { 1.0 / n_free as f64 } else { 0.0 })
            .collect(),
    );
    let node_loss = tape.weighted_sum_rows(norms, weights_vec);

    // L_E = mean over directed edge instances of |m_hat - m_star|
    let edge_loss = match (pass.magnitudes_id, target.edge_magnitudes) {
        (Some(mags_id), Some(m_star)) => {
            if m_star.len() != pass.n_edges {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} magnitude targets for {} edges",
                    m_star.len(),
                    pass.n_edges
                )));
            }
            let target_col =
                tape.constant(Array2::from_shape_vec((m_star.len(), 1), m_star.to_vec()).unwrap());
            let diff = tape.sub(mags_id, target_col);
            let abs = tape.abs(diff);
            Some(tape.mean_all(abs))
        }
        (Some(_), None) => {
            return Err(ModelError::ShapeMismatch(
                "drlabel mode requires edge magnitude targets".into(),
            ))
        }
        _ => None,
    };

    let weighted_node = tape.scale(node_loss, weights.lambda);
    let mut total = tape.add(graph_loss, weighted_node);
    if let Some(edge) = edge_loss {
        let weighted_edge = tape.scale(edge, weights.gamma);
        total = tape.add(total, weighted_edge);
    }

    Ok(LossIds { total, graph: graph_loss, node: node_loss, edge: edge_loss })
}

impl ForwardPass {
    pub fn loss_terms(&self, ids: &LossIds) -> LossTerms {
        LossTerms {
            total: self.tape.scalar(ids.total),
            graph: self.tape.scalar(ids.graph),
            node: self.tape.scalar(ids.node),
            edge: ids.edge.map(|id| self.tape.scalar(id)).unwrap_or(0.0),
        }
    }

    /// Backward from the total loss; returns parameter gradients in a
    /// params-shaped container, plus the input-position gradient when the
    /// pass was built with `position_grads`.
    pub fn backward(
        &self,
        ids: &LossIds,
        params: &ModelParams,
    ) -> (ModelParams, Option<Array2<f64>>) {
        let grads = self.tape.backward(ids.total);
        let mut out = params.zeros_like();
        for (name, slot) in out.tensors_mut() {
            let leaf = self.leaf_ids[&name];
            let shape = (slot.nrows(), slot.ncols());
            *slot = grads.get_or_zeros(leaf, shape);
        }
        let pos_grad = grads.get(self.positions_id).cloned();
        (out, pos_grad)
    }
}

/// Loss for a head mode: sum mode never carries an edge term.
pub fn effective_weights(mode: HeadMode, weights: &LossWeights) -> LossWeights {
    match mode {
        HeadMode::Sum => LossWeights { lambda: weights.lambda, gamma: 0.0 },
        HeadMode::Drlabel => *weights,
    }
}
