//! Forward pass of the invariant message-passing network.
//!
//! Node features start from a species embedding; edges carry Gaussian-basis
//! distance features. Each layer computes messages over
//! `[h_owner || h_neighbor || gbf]`, mean-aggregates them per owner, and
//! applies a residual node update. The displacement head turns per-edge
//! scalars into node vectors either by direction-scaled summation (sum
//! mode) or by sphere-fit reconstruction of projection magnitudes (drlabel
//! mode). All scalar features depend on geometry only through distances, so
//! predicted energies are E(3)-invariant and displacements equivariant.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;

use crate::geometry::MagnitudeMatrix;
use crate::vec3::Vec3;

use super::params::{HeadMode, ModelParams};
use super::tape::{GbfMeta, GraphIndex, Tape, ValueId};
use super::ModelError;

/// Borrowed view of one system fed to the network.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub atom_types: &'a [u32],
    pub positions: &'a [Vec3],
    pub edges: &'a [(usize, usize)],
}

/// What the forward builder should mark as differentiable.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub param_grads: bool,
    pub position_grads: bool,
}

/// Plain-data view of a finished forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub predicted_energy: f64,
    pub predicted_displacements: Vec<Vec3>,
    /// Final per-edge projection magnitudes (drlabel mode only).
    pub predicted_magnitudes: Option<MagnitudeMatrix>,
    pub intermediate_positions: Vec<Vec<Vec3>>,
    pub degenerate_nodes: Vec<usize>,
}

/// A forward pass with its tape still alive, ready for loss attachment and
/// backward.
pub struct ForwardPass {
    pub(super) tape: Tape,
    pub(super) leaf_ids: BTreeMap<String, ValueId>,
    pub(super) positions_id: ValueId,
    pub(super) energy_id: ValueId,
    pub(super) displacement_id: ValueId,
    pub(super) magnitudes_id: Option<ValueId>,
    pub(super) intermediate_ids: Vec<ValueId>,
    pub(super) degenerate_nodes: Vec<usize>,
    pub(super) n_edges: usize,
}

impl ForwardPass {
    pub fn energy(&self) -> f64 {
        self.tape.scalar(self.energy_id)
    }

    pub fn displacements(&self) -> Vec<Vec3> {
        rows_to_vec3(self.tape.value(self.displacement_id))
    }

    pub fn magnitudes(&self) -> Option<Vec<f64>> {
        self.magnitudes_id
            .map(|id| self.tape.value(id).column(0).to_vec())
    }

    pub fn output(&self, input: &ModelInput) -> ForwardOutput {
        let predicted_magnitudes = self.magnitudes().map(|mags| {
            let mut m = MagnitudeMatrix::new();
            for (&(i, j), value) in input.edges.iter().zip(mags) {
                m.insert(i, j, value);
            }
            m
        });
        ForwardOutput {
            predicted_energy: self.energy(),
            predicted_displacements: self.displacements(),
            predicted_magnitudes,
            intermediate_positions: self
                .intermediate_ids
                .iter()
                .map(|&id| rows_to_vec3(self.tape.value(id)))
                .collect(),
            degenerate_nodes: self.degenerate_nodes.clone(),
        }
    }
}

fn rows_to_vec3(arr: &Array2<f64>) -> Vec<Vec3> {
    arr.rows()
        .into_iter()
        .map(|r| Vec3::new(r[0], r[1], r[2]))
        .collect()
}

struct MlpIds {
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
}

fn apply_mlp(tape: &mut Tape, x: ValueId, ids: &MlpIds) -> ValueId {
    let h = tape.matmul(x, ids.w1);
    let hb = tape.add_row(h, ids.b1);
    let a = tape.silu(hb);
    let o = tape.matmul(a, ids.w2);
    tape.add_row(o, ids.b2)
}

/// Runs the network on one system, building the tape as it goes.
pub fn forward(
    params: &ModelParams,
    input: &ModelInput,
    opts: ForwardOptions,
) -> Result<ForwardPass, ModelError> {
    let n = input.positions.len();
    if input.atom_types.len() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "{} atom types for {} positions",
            input.atom_types.len(),
            n
        )));
    }
    for &t in input.atom_types {
        if t as usize >= params.dims.n_species {
            return Err(ModelError::ShapeMismatch(format!(
                "atom type {t} >= n_species {}",
                params.dims.n_species
            )));
        }
    }
    for &(i, j) in input.edges {
        if i == j || i >= n || j >= n {
            return Err(ModelError::ShapeMismatch(format!("bad edge ({i}, {j}) for {n} atoms")));
        }
    }

    let mut tape = Tape::new();
    let mut leaf_ids = BTreeMap::new();
    for (name, tensor) in params.tensors() {
        let id = tape.leaf(tensor.clone(), opts.param_grads);
        leaf_ids.insert(name, id);
    }
    let id_of = |name: &str, ids: &BTreeMap<String, ValueId>| -> ValueId {
        *ids.get(name).expect("registered parameter tensor")
    };
    let mlp_ids = |prefix: &str, ids: &BTreeMap<String, ValueId>| MlpIds {
        w1: id_of(&format!("{prefix}.w1"), ids),
        b1: id_of(&format!("{prefix}.b1"), ids),
        w2: id_of(&format!("{prefix}.w2"), ids),
        b2: id_of(&format!("{prefix}.b2"), ids),
    };

    let graph = Rc::new(GraphIndex::new(n, input.edges.to_vec()));
    let owners: Rc<Vec<usize>> = Rc::new(input.edges.iter().map(|&(i, _)| i).collect());
    let neighbors: Rc<Vec<usize>> = Rc::new(input.edges.iter().map(|&(_, j)| j).collect());
    let species = params.dims.n_species;
    let gbf_meta = Rc::new(GbfMeta {
        centers: params.gbf_centers.clone(),
        gammas: params.gbf_gammas.clone(),
        edge_types: input
            .edges
            .iter()
            .map(|&(i, j)| input.atom_types[i] as usize * species + input.atom_types[j] as usize)
            .collect(),
    });

    let mut pos_mat = Array2::zeros((n, 3));
    for (r, p) in input.positions.iter().enumerate() {
        pos_mat[[r, 0]] = p.x;
        pos_mat[[r, 1]] = p.y;
        pos_mat[[r, 2]] = p.z;
    }
    let p0 = tape.leaf(pos_mat, opts.position_grads);

    let type_indices: Rc<Vec<usize>> =
        Rc::new(input.atom_types.iter().map(|&t| t as usize).collect());
    let mut h = tape.gather_rows(id_of("embedding", &leaf_ids), type_indices);

    let affine_id = id_of("gbf_affine", &leaf_ids);
    let mut p_cur = p0;
    let mut dist = tape.edge_distances(p_cur, graph.clone())?;
    let mut gbf = tape.gbf(dist, affine_id, gbf_meta.clone());

    let sender = (id_of("sender_w", &leaf_ids), id_of("sender_b", &leaf_ids));
    let receiver = (id_of("receiver_w", &leaf_ids), id_of("receiver_b", &leaf_ids));
    let magnitude_ids = mlp_ids("magnitude_head", &leaf_ids);
    let sum_ids = mlp_ids("sum_head", &leaf_ids);
    let energy_ids = mlp_ids("energy_head", &leaf_ids);

    // Shared-parameter displacement head; used for intermediate position
    // updates and the final prediction.
    let run_head = |tape: &mut Tape,
                        h: ValueId,
                        gbf: ValueId,
                        p_cur: ValueId|
     -> Result<(ValueId, Option<ValueId>, Vec<usize>), ModelError> {
        let dirs = tape.edge_directions(p_cur, graph.clone())?;
        let h_own = tape.gather_rows(h, owners.clone());
        let h_nb = tape.gather_rows(h, neighbors.clone());
        let s_lin = tape.matmul(h_own, sender.0);
        let s_bias = tape.add_row(s_lin, sender.1);
        let s_emb = tape.silu(s_bias);
        let r_lin = tape.matmul(h_nb, receiver.0);
        let r_bias = tape.add_row(r_lin, receiver.1);
        let r_emb = tape.silu(r_bias);
        let z = tape.concat_cols(&[gbf, s_emb, r_emb]);
        match params.head_mode {
            HeadMode::Drlabel => {
                let mags = apply_mlp(tape, z, &magnitude_ids);
                let disp = tape.sphere_fit_agg(mags, dirs, graph.clone());
                let degen: Vec<usize> = tape
                    .degenerate_nodes(disp)
                    .iter()
                    .enumerate()
                    .filter(|(_, &d)| d)
                    .map(|(i, _)| i)
                    .collect();
                Ok((disp, Some(mags), degen))
            }
            HeadMode::Sum => {
                let scalars = apply_mlp(tape, z, &sum_ids);
                let disp = tape.sum_agg(scalars, dirs, graph.clone());
                Ok((disp, None, Vec::new()))
            }
        }
    };

    let mut intermediate_ids = Vec::new();
    let mut degenerate = std::collections::BTreeSet::new();
    let freq = params.interpos_frequency;
    for (l, layer_param) in (1..=params.dims.layers).zip(0..) {
        let prefix = format!("layer{layer_param}");
        let message_ids = mlp_ids(&format!("{prefix}.message"), &leaf_ids);
        let update_ids = mlp_ids(&format!("{prefix}.update"), &leaf_ids);

        let h_own = tape.gather_rows(h, owners.clone());
        let h_nb = tape.gather_rows(h, neighbors.clone());
        let msg_in = tape.concat_cols(&[h_own, h_nb, gbf]);
        let msg = apply_mlp(&mut tape, msg_in, &message_ids);
        let agg = tape.scatter_mean(msg, owners.clone(), n);
        let upd_in = tape.concat_cols(&[h, agg]);
        let delta = apply_mlp(&mut tape, upd_in, &update_ids);
        h = tape.add(h, delta);

        if freq > 0 && l % freq == 0 && l < params.dims.layers {
            let (disp, _, degen) = run_head(&mut tape, h, gbf, p_cur)?;
            p_cur = tape.add(p_cur, disp);
            intermediate_ids.push(p_cur);
            degenerate.extend(degen);
            dist = tape.edge_distances(p_cur, graph.clone())?;
            gbf = tape.gbf(dist, affine_id, gbf_meta.clone());
        }
    }
    let _ = dist;

    let (final_disp, magnitudes_id, degen) = run_head(&mut tape, h, gbf, p_cur)?;
    degenerate.extend(degen);
    let p_final = tape.add(p_cur, final_disp);
    let displacement_id = tape.sub(p_final, p0);

    let pooled = tape.mean_rows(h);
    let energy_id = apply_mlp(&mut tape, pooled, &energy_ids);

    Ok(ForwardPass {
        tape,
        leaf_ids,
        positions_id: p0,
        energy_id,
        displacement_id,
        magnitudes_id,
        intermediate_ids,
        degenerate_nodes: degenerate.into_iter().collect(),
        n_edges: input.edges.len(),
    })
}

/// Standalone Gaussian-basis encoding of one distance for a given edge
/// type; matches the in-network featurization exactly.
pub fn gbf_encode(distance: f64, edge_type: usize, params: &ModelParams) -> Vec<f64> {
    let a = params.gbf_affine[[edge_type, 0]];
    let b = params.gbf_affine[[edge_type, 1]];
    let scaled = a * distance + b;
    params
        .gbf_centers
        .iter()
        .zip(&params.gbf_gammas)
        .map(|(&mu, &gamma)| {
            let s = scaled - mu;
            (-gamma * s * s).exp()
        })
        .collect()
}

