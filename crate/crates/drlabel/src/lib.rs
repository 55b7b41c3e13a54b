//! Edge-projection supervision for equilibrium-state graph networks.
//!
//! The core idea: a node-level displacement label can be deconstructed
//! exactly onto graph edges (project it on each incident edge direction),
//! and reconstructed from per-edge scalar magnitudes by fitting a sphere
//! through the node's initial position. The round trip is exact whenever
//! the projections span 3D, is invariant to how the graph was built, and
//! commutes with rigid motions. A model supervised this way keeps its node
//! predictions stable when edges are added or dropped, unlike plain
//! sum-aggregation heads.
//!
//! Crate layout:
//! - [`vec3`]: small fixed-size linear algebra and rigid transforms
//! - [`geometry`]: label deconstruction, sphere-fit reconstruction
//! - [`graph`]: radius / k-NN / full graph builders and edge perturbation
//! - [`sim`]: synthetic relaxation data under a harmonic pair potential
//! - [`dataset`]: JSONL records
//! - [`model`]: a toy invariant message-passing network with sum and
//!   projection-fit displacement heads, losses, training, metrics
//! - [`audit`]: randomized property audits with tolerances

pub mod audit;
pub mod dataset;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod sim;
pub mod vec3;

pub use geometry::{
    deconstruct_labels, project_displacement, reconstruct_positions, sphere_fit, unit_direction,
    MagnitudeMatrix,
};
pub use graph::{
    build_full_graph, build_knn_graph, build_radius_graph, perturb_graph, AtomicSystem,
    DirectedGraph, GraphPolicy, PerturbMode,
};
pub use vec3::{apply_e3, E3Transform, Mat3, UnitVec3, Vec3};
