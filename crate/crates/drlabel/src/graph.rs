//! Directed graph construction over atomic systems (radius, k-NN, full)
//! and seeded edge perturbation for robustness sweeps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::vec3::Vec3;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("atomic system needs at least 2 atoms, got {0}")]
    TooFewAtoms(usize),
    #[error("atom_types ({types}), positions ({positions}) and free_mask ({mask}) lengths differ")]
    LengthMismatch { types: usize, positions: usize, mask: usize },
    #[error("atoms {i} and {j} are {dist:.3e} apart (minimum 1e-6)")]
    AtomsTooClose { i: usize, j: usize, dist: f64 },
    #[error("position component is not finite")]
    NonFinitePosition,
    #[error("k = {k} outside valid range 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("cutoff must be positive, got {0}")]
    InvalidCutoff(f64),
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("duplicate directed edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("perturbation fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
}

/// An N-body system: per-atom species id, position, and a free/fixed flag
/// (`true` = relaxed, `false` = held fixed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomicSystem {
    pub atom_types: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub free_mask: Vec<bool>,
}

impl AtomicSystem {
    pub fn new(
        atom_types: Vec<u32>,
        positions: Vec<Vec3>,
        free_mask: Vec<bool>,
    ) -> Result<Self, GraphError> {
        if atom_types.len() != positions.len() || free_mask.len() != positions.len() {
            return Err(GraphError::LengthMismatch {
                types: atom_types.len(),
                positions: positions.len(),
                mask: free_mask.len(),
            });
        }
        if positions.len() < 2 {
            return Err(GraphError::TooFewAtoms(positions.len()));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.is_finite() {
                return Err(GraphError::NonFinitePosition);
            }
            for (j, q) in positions.iter().enumerate().skip(i + 1) {
                let dist = (*p - *q).norm();
                if dist <= 1e-6 {
                    return Err(GraphError::AtomsTooClose { i, j, dist });
                }
            }
        }
        Ok(AtomicSystem { atom_types, positions, free_mask })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Directed edge list plus per-node neighbor lists. The edge `(i, j)` is
/// owned by node `i`: its direction points from atom `j` toward atom `i`,
/// and it carries node `i`'s projection label. `neighbors[i]` lists the `j`
/// of every edge instance `(i, j)`, in edge-list order.
///
/// Freshly built graphs have unique edges; perturbation may duplicate edge
/// instances, turning the structure into a multigraph.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl DirectedGraph {
    /// Builds from a unique edge list; rejects self-loops and duplicates.
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &edges {
            if i == j {
                return Err(GraphError::SelfLoop(i, j));
            }
            if i >= n_nodes || j >= n_nodes {
                return Err(GraphError::EdgeOutOfRange(i, j, n_nodes));
            }
            if !seen.insert((i, j)) {
                return Err(GraphError::DuplicateEdge(i, j));
            }
        }
        Ok(Self::from_edges_unchecked(n_nodes, edges))
    }

    /// Multigraph constructor used by perturbation: duplicates allowed,
    /// self-loops still rejected by debug assertion.
    pub(crate) fn from_edges_unchecked(n_nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); n_nodes];
        for &(i, j) in &edges {
            debug_assert!(i != j && i < n_nodes && j < n_nodes);
            neighbors[i].push(j);
        }
        DirectedGraph { n_nodes, edges, neighbors }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Nodes owning no edges; they cannot be reconstructed and fall back to
    /// zero displacement downstream.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&i| self.neighbors[i].is_empty()).collect()
    }

    pub fn has_duplicate_edges(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.edges.iter().any(|&e| !seen.insert(e))
    }

    /// Sorted copy of the edge list, for set-style comparisons in tests.
    pub fn sorted_edges(&self) -> Vec<(usize, usize)> {
        let mut e = self.edges.clone();
        e.sort_unstable();
        e
    }

    /// Applies a node relabeling: edge `(i, j)` becomes `(perm[i], perm[j])`.
    pub fn relabel(&self, perm: &[usize]) -> DirectedGraph {
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges_unchecked(self.n_nodes, edges)
    }
}

/// All `n (n - 1)` directed edges over `n` nodes.
pub fn complete_graph(n: usize) -> DirectedGraph {
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push((i, j));
            }
        }
    }
    DirectedGraph::from_edges_unchecked(n, edges)
}

/// Radius graph: edge `(i, j)` exists iff `0 < |p_i - p_j| < cutoff`. With
/// `max_neighbors` set, each node keeps only its nearest senders (ties by
/// lower atom index), which can break directional symmetry.
pub fn build_radius_graph(
    system: &AtomicSystem,
    cutoff: f64,
    max_neighbors: Option<usize>,
) -> Result<DirectedGraph, GraphError> {
    if cutoff <= 0.0 {
        return Err(GraphError::InvalidCutoff(cutoff));
    }
    let n = system.len();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist = (system.positions[i] - system.positions[j]).norm();
            if dist > 0.0 && dist < cutoff {
                candidates.push((dist, j));
            }
        }
        if let Some(m) = max_neighbors {
            candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            candidates.truncate(m);
            candidates.sort_by_key(|&(_, j)| j);
        }
        edges.extend(candidates.iter().map(|&(_, j)| (i, j)));
    }
    Ok(DirectedGraph::from_edges_unchecked(n, edges))
}

/// k-nearest-neighbor graph: node `i` receives edges `(i, j)` from its `k`
/// nearest distinct atoms; distance ties break toward the lower atom index.
pub fn build_knn_graph(system: &AtomicSystem, k: usize) -> Result<DirectedGraph, GraphError> {
    let n = system.len();
    if k == 0 || k > n - 1 {
        return Err(GraphError::InvalidK { k, max: n - 1 });
    }
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((system.positions[i] - system.positions[j]).norm(), j))
            .collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        candidates.truncate(k);
        candidates.sort_by_key(|&(_, j)| j);
        edges.extend(candidates.iter().map(|&(_, j)| (i, j)));
    }
    Ok(DirectedGraph::from_edges_unchecked(n, edges))
}

/// Fully connected directed graph over the system's atoms.
pub fn build_full_graph(system: &AtomicSystem) -> DirectedGraph {
    complete_graph(system.len())
}

/// How edges are chosen during perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Remove a random fraction of the existing directed edges.
    Drop,
    /// Duplicate a random fraction of the existing directed edges,
    /// producing a multigraph. Duplicates are appended after the original
    /// edge list.
    AddDuplicate,
    /// Add edges between previously unconnected ordered pairs (an
    /// extension for sparse graphs, where new-pair directions remain
    /// well defined).
    AddNewPair,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerturbMode::Drop => write!(f, "drop"),
            PerturbMode::AddDuplicate => write!(f, "add"),
            PerturbMode::AddNewPair => write!(f, "add-new-pair"),
        }
    }
}

/// Dense boolean selection matrix recording which ordered pairs a
/// perturbation touched. The diagonal is always false; in drop mode the
/// true entries are a subset of the existing edges.
#[derive(Debug, Clone)]
pub struct PerturbationMask {
    pub n: usize,
    pub mode: PerturbMode,
    pub seed: u64,
    selected: Vec<bool>,
}

impl PerturbationMask {
    pub fn is_selected(&self, i: usize, j: usize) -> bool {
        self.selected[i * self.n + j]
    }

    pub fn selected_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.selected[i * self.n + j] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Applies a seeded random edge perturbation. Deterministic for a given
/// `(mode, fraction, seed)`; the selected pair set is returned alongside the
/// new graph. `fraction` is taken relative to the existing edge count.
pub fn perturb_graph(
    graph: &DirectedGraph,
    mode: PerturbMode,
    fraction: f64,
    seed: u64,
) -> Result<(DirectedGraph, PerturbationMask), GraphError> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(GraphError::InvalidFraction(fraction));
    }
    let n = graph.n_nodes();
    let n_edges = graph.n_edges();
    let count = (fraction * n_edges as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; n * n];
    let mark = |selected: &mut Vec<bool>, i: usize, j: usize| selected[i * n + j] = true;

    let new_edges = match mode {
        PerturbMode::Drop => {
            let chosen = sample_indices(&mut rng, n_edges, count);
            let mut drop = vec![false; n_edges];
            for idx in &chosen {
                drop[*idx] = true;
                let (i, j) = graph.edges()[*idx];
                mark(&mut selected, i, j);
            }
            graph
                .edges()
                .iter()
                .enumerate()
                .filter(|(idx, _)| !drop[*idx])
                .map(|(_, &e)| e)
                .collect()
        }
        PerturbMode::AddDuplicate => {
            let chosen = sample_indices(&mut rng, n_edges, count);
            let mut edges = graph.edges().to_vec();
            for idx in &chosen {
                let (i, j) = graph.edges()[*idx];
                mark(&mut selected, i, j);
                edges.push((i, j));
            }
            edges
        }
        PerturbMode::AddNewPair => {
            let existing: std::collections::BTreeSet<(usize, usize)> =
                graph.edges().iter().copied().collect();
            let mut absent: Vec<(usize, usize)> = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && !existing.contains(&(i, j)) {
                        absent.push((i, j));
                    }
                }
            }
            let take = count.min(absent.len());
            let chosen = sample_indices(&mut rng, absent.len(), take);
            let mut edges = graph.edges().to_vec();
            for idx in &chosen {
                let (i, j) = absent[*idx];
                mark(&mut selected, i, j);
                edges.push((i, j));
            }
            edges
        }
    };
    let mask = PerturbationMask { n, mode, seed, selected };
    Ok((DirectedGraph::from_edges_unchecked(n, new_edges), mask))
}

/// `count` distinct indices in `0..len`, ascending, via seeded sampling.
fn sample_indices(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    if count == 0 {
        return Vec::new();
    }
    let mut idx = rand::seq::index::sample(rng, len, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Which graph construction to use over a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum GraphPolicy {
    Radius { cutoff: f64, max_neighbors: Option<usize> },
    Knn { k: usize },
    Full,
}

impl GraphPolicy {
    pub fn build(&self, system: &AtomicSystem) -> Result<DirectedGraph, GraphError> {
        match self {
            GraphPolicy::Radius { cutoff, max_neighbors } => {
                build_radius_graph(system, *cutoff, *max_neighbors)
            }
            GraphPolicy::Knn { k } => build_knn_graph(system, *k),
            GraphPolicy::Full => Ok(build_full_graph(system)),
        }
    }
}

impl Default for GraphPolicy {
    fn default() -> Self {
        GraphPolicy::Radius { cutoff: 2.0, max_neighbors: None }
    }
}
