//! Exact deconstruction of node displacement labels onto graph edges, and
//! sphere-fit reconstruction of node displacements from edge magnitudes.
//!
//! The two operations are inverse to each other: projecting a displacement
//! `dp` onto a set of edge directions puts every projection endpoint on the
//! sphere through the origin with center `dp / 2`, so fitting that sphere
//! back recovers `dp` whenever the projections span 3D. Both directions are
//! E(3)-equivariant because the only geometric input is the edge direction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::DirectedGraph;
use crate::vec3::{Mat3, UnitVec3, Vec3};

/// Magnitudes below this are treated as "no projection at all" by the
/// sphere fit (the zero-shortcut).
pub const ZERO_SHORTCUT_TOL: f64 = 1e-10;

/// Relative residual threshold above which a sphere fit is declared
/// degenerate.
pub const RESIDUAL_REL_TOL: f64 = 1e-6;

/// A fitted center longer than this multiple of the largest projection is
/// treated as degenerate: the projections do not meaningfully constrain a
/// displacement that large, and near-singular normal matrices would
/// otherwise let predicted-magnitude noise explode the reconstruction.
pub const BLOWUP_FACTOR: f64 = 30.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("coincident atoms: separation {dist:.3e} is below 1e-9")]
    CoincidentAtoms { dist: f64 },
    #[error("positions ({positions}) and displacements ({displacements}) differ in length")]
    LengthMismatch { positions: usize, displacements: usize },
    #[error("edge ({0}, {1}) references an atom index out of range")]
    IndexOutOfRange(usize, usize),
    #[error("sphere fit requires a non-empty projection list")]
    EmptyProjections,
    #[error("matrix is not orthogonal: max deviation {deviation:.3e}")]
    NotOrthogonal { deviation: f64 },
    #[error("magnitude matrix does not cover the graph edge set: edge ({0}, {1}) missing")]
    MissingMagnitude(usize, usize),
    #[error("magnitude matrix has {extra} entries outside the graph edge set")]
    ExtraMagnitudes { extra: usize },
}

/// Sparse per-edge scalar projection magnitudes, keyed by directed edge
/// `(i, j)`. Entry `(i, j)` is node `i`'s displacement projected on the
/// direction from atom `j` toward atom `i`. Not symmetric in general.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MagnitudeMatrix {
    entries: BTreeMap<(usize, usize), f64>,
}

impl MagnitudeMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, i: usize, j: usize, magnitude: f64) {
        self.entries.insert((i, j), magnitude);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i, j)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deterministic iteration in key order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &m)| (i, j, m))
    }

    /// Checks the entry set covers exactly the graph's (deduplicated)
    /// directed edge set.
    pub fn check_covers(&self, graph: &DirectedGraph) -> Result<(), GeometryError> {
        let mut seen = 0usize;
        let mut unique = std::collections::BTreeSet::new();
        for &(i, j) in graph.edges() {
            if unique.insert((i, j)) {
                seen += 1;
                if !self.entries.contains_key(&(i, j)) {
                    return Err(GeometryError::MissingMagnitude(i, j));
                }
            }
        }
        if self.entries.len() > seen {
            return Err(GeometryError::ExtraMagnitudes { extra: self.entries.len() - seen });
        }
        Ok(())
    }
}

/// Per-node projection vectors, the deconstructed form of a displacement
/// label set: `per_node[i]` lists `(neighbor, projection)` pairs where each
/// projection is parallel to the stored edge direction.
#[derive(Debug, Clone)]
pub struct EdgeProjectionSet {
    pub per_node: Vec<Vec<(usize, Vec3)>>,
}

impl EdgeProjectionSet {
    /// Expands a magnitude matrix back into full projection vectors using
    /// the graph's edge instances (duplicated edges yield duplicated
    /// projections).
    pub fn from_magnitudes(
        magnitudes: &MagnitudeMatrix,
        graph: &DirectedGraph,
        positions: &[Vec3],
    ) -> Result<Self, GeometryError> {
        let mut per_node = vec![Vec::new(); graph.n_nodes()];
        for &(i, j) in graph.edges() {
            let m = magnitudes
                .get(i, j)
                .ok_or(GeometryError::MissingMagnitude(i, j))?;
            let d = unit_direction(&positions[i], &positions[j])?;
            per_node[i].push((j, d.as_vec3().scale(m)));
        }
        Ok(EdgeProjectionSet { per_node })
    }
}

/// Unit direction of edge `(i, j)`: points from atom `j` toward atom `i`.
pub fn unit_direction(p_i: &Vec3, p_j: &Vec3) -> Result<UnitVec3, GeometryError> {
    UnitVec3::try_new(*p_i - *p_j)
}

/// Projects `delta_p` onto direction `d`, returning the signed magnitude and
/// the projection vector `magnitude * d`.
pub fn project_displacement(delta_p: &Vec3, d: &UnitVec3) -> (f64, Vec3) {
    let magnitude = d.dot(delta_p);
    (magnitude, d.as_vec3().scale(magnitude))
}

/// Projects each node's displacement label onto all of its edges, producing
/// the per-edge scalar magnitude matrix. The magnitude for edge `(i, j)`
/// depends only on `(p_i, p_j, dp_i)`, so it is identical across any graph
/// construction that contains the edge.
pub fn deconstruct_labels(
    positions: &[Vec3],
    displacements: &[Vec3],
    graph: &DirectedGraph,
) -> Result<MagnitudeMatrix, GeometryError> {
    if positions.len() != displacements.len() {
        return Err(GeometryError::LengthMismatch {
            positions: positions.len(),
            displacements: displacements.len(),
        });
    }
    let n = positions.len();
    let mut out = MagnitudeMatrix::new();
    for &(i, j) in graph.edges() {
        if i >= n || j >= n {
            return Err(GeometryError::IndexOutOfRange(i, j));
        }
        let d = unit_direction(&positions[i], &positions[j])?;
        let (m, _) = project_displacement(&displacements[i], &d);
        out.insert(i, j, m);
    }
    Ok(out)
}

/// Edge-list-aligned variant of [`deconstruct_labels`]: one magnitude per
/// edge instance, in edge order, computed by the identical per-edge rule.
pub fn edge_magnitude_list(
    positions: &[Vec3],
    displacements: &[Vec3],
    edges: &[(usize, usize)],
) -> Result<Vec<f64>, GeometryError> {
    if positions.len() != displacements.len() {
        return Err(GeometryError::LengthMismatch {
            positions: positions.len(),
            displacements: displacements.len(),
        });
    }
    let n = positions.len();
    edges
        .iter()
        .map(|&(i, j)| {
            if i >= n || j >= n {
                return Err(GeometryError::IndexOutOfRange(i, j));
            }
            let d = unit_direction(&positions[i], &positions[j])?;
            Ok(project_displacement(&displacements[i], &d).0)
        })
        .collect()
}

/// Result of fitting a sphere through the origin to a set of projection
/// endpoints. `displacement = 2 * center`; `degenerate` is raised when the
/// projections cannot pin down a unique center (rank < 3, all-zero input,
/// or a solve whose residual stays large).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereFit {
    pub center: Vec3,
    pub displacement: Vec3,
    pub degenerate: bool,
}

impl SphereFit {
    fn degenerate() -> Self {
        SphereFit { center: Vec3::ZERO, displacement: Vec3::ZERO, degenerate: true }
    }
}

/// Solves the normal system `(2A) C = b` of a sphere fit. The factorization
/// is Tikhonov-regularized for stability, then refined against the
/// unregularized system so the regularization leaves no bias on
/// well-conditioned inputs. Returns `None` when `2A` is rank-deficient (by
/// elimination pivots) or when the residual stays above
/// `RESIDUAL_REL_TOL * |b|`.
pub(crate) fn solve_sphere_normal_system(two_a: &Mat3, b: &Vec3, eps: f64) -> Option<Vec3> {
    if two_a.rank(eps) < 3 {
        return None;
    }
    let mut regularized = *two_a;
    for k in 0..3 {
        regularized.0[k][k] += eps;
    }
    let mut center = regularized.solve(b)?;
    for _ in 0..3 {
        let r = *b - two_a.mul_vec(&center);
        let dc = regularized.solve(&r)?;
        center = center + dc;
    }
    let residual = (two_a.mul_vec(&center) - *b).norm();
    if residual > RESIDUAL_REL_TOL * b.norm() {
        return None;
    }
    Some(center)
}

/// Tikhonov scale used for the sphere-fit solve and its rank threshold.
pub(crate) fn sphere_fit_epsilon(a: &Mat3) -> f64 {
    1e-10 * (1.0 + a.trace())
}

/// Least-squares sphere through the origin: accumulates
/// `b = mean |x|^2 x` and `A = mean x x^T`, solves `(2A) C = b`, and
/// returns `displacement = 2C`.
///
/// Exact projections of a true displacement recover it exactly whenever the
/// projections span 3D, regardless of duplicated entries.
pub fn sphere_fit(projections: &[Vec3]) -> Result<SphereFit, GeometryError> {
    if projections.is_empty() {
        return Err(GeometryError::EmptyProjections);
    }
    if projections.iter().all(|x| x.norm() < ZERO_SHORTCUT_TOL) {
        return Ok(SphereFit::degenerate());
    }
    let inv_n = 1.0 / projections.len() as f64;
    let mut b = Vec3::ZERO;
    let mut a = Mat3::zero();
    for x in projections {
        b += x.scale(x.norm_sq() * inv_n);
        a = a.add(&Mat3::outer(x, x).scale(inv_n));
    }
    let two_a = a.scale(2.0);
    let max_proj = projections.iter().map(Vec3::norm).fold(0.0_f64, f64::max);
    match solve_sphere_normal_system(&two_a, &b, sphere_fit_epsilon(&a)) {
        Some(center) if center.norm() <= BLOWUP_FACTOR * max_proj => {
            Ok(SphereFit { center, displacement: center.scale(2.0), degenerate: false })
        }
        _ => Ok(SphereFit::degenerate()),
    }
}

/// Per-node reconstruction output. Degenerate nodes fall back to zero
/// displacement and are listed rather than treated as fatal.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub positions: Vec<Vec3>,
    pub displacements: Vec<Vec3>,
    pub degenerate_nodes: Vec<usize>,
}

/// Rebuilds node positions from edge magnitudes: per node, forms projection
/// vectors `m * d` over its edge instances, sphere-fits them, and returns
/// `p0 + displacement`. Nodes with no edges count as degenerate.
pub fn reconstruct_positions(
    magnitudes: &MagnitudeMatrix,
    graph: &DirectedGraph,
    initial_positions: &[Vec3],
) -> Result<Reconstruction, GeometryError> {
    magnitudes.check_covers(graph)?;
    let n = graph.n_nodes();
    if initial_positions.len() != n {
        return Err(GeometryError::LengthMismatch {
            positions: initial_positions.len(),
            displacements: n,
        });
    }
    let mut projections: Vec<Vec<Vec3>> = vec![Vec::new(); n];
    for &(i, j) in graph.edges() {
        let m = magnitudes.get(i, j).expect("coverage checked above");
        let d = unit_direction(&initial_positions[i], &initial_positions[j])?;
        projections[i].push(d.as_vec3().scale(m));
    }
    let mut positions = Vec::with_capacity(n);
    let mut displacements = Vec::with_capacity(n);
    let mut degenerate_nodes = Vec::new();
    for (i, projs) in projections.iter().enumerate() {
        let disp = if projs.is_empty() {
            degenerate_nodes.push(i);
            Vec3::ZERO
        } else {
            let fit = sphere_fit(projs)?;
            if fit.degenerate {
                degenerate_nodes.push(i);
            }
            fit.displacement
        };
        displacements.push(disp);
        positions.push(initial_positions[i] + disp);
    }
    Ok(Reconstruction { positions, displacements, degenerate_nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DirectedGraph;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn unit_direction_axis_aligned() {
        let d = unit_direction(&v(1.0, 0.0, 0.0), &v(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(d.as_vec3(), v(1.0, 0.0, 0.0));
    }

    #[test]
    fn unit_direction_normalizes_and_orients() {
        let d = unit_direction(&v(0.0, 0.0, 0.0), &v(0.0, 2.0, 0.0)).unwrap();
        assert_eq!(d.as_vec3(), v(0.0, -1.0, 0.0));

        let d = unit_direction(&v(1.0, 1.0, 0.0), &v(0.0, 0.0, 0.0)).unwrap();
        let s = 1.0 / 2.0_f64.sqrt();
        assert!((d.as_vec3() - v(s, s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn unit_direction_rejects_coincident() {
        let err = unit_direction(&v(0.0, 0.0, 0.0), &v(0.0, 0.0, 5e-10));
        assert!(matches!(err, Err(GeometryError::CoincidentAtoms { .. })));
    }

    #[test]
    fn project_parallel_case() {
        let d = UnitVec3::try_new(v(1.0, 0.0, 0.0)).unwrap();
        let (m, p) = project_displacement(&v(1.0, 0.0, 0.0), &d);
        assert_eq!(m, 1.0);
        assert_eq!(p, v(1.0, 0.0, 0.0));
    }

    #[test]
    fn project_axis_component() {
        let d = UnitVec3::try_new(v(0.0, 0.0, 1.0)).unwrap();
        let (m, p) = project_displacement(&v(1.0, 2.0, 3.0), &d);
        assert_eq!(m, 3.0);
        assert_eq!(p, v(0.0, 0.0, 3.0));
    }

    #[test]
    fn project_diagonal_direction() {
        // Hand-computed: (1,2,3) . (1/sqrt2, 1/sqrt2, 0) = 3/sqrt2,
        // projection = 3/sqrt2 * d = (1.5, 1.5, 0).
        let s = 1.0 / 2.0_f64.sqrt();
        let d = UnitVec3::try_new(v(s, s, 0.0)).unwrap();
        let (m, p) = project_displacement(&v(1.0, 2.0, 3.0), &d);
        assert!((m - 3.0 / 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((p - v(1.5, 1.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn deconstruct_single_edge_sign_convention() {
        // Edge (0,1): direction from p1 to p0 is (-1,0,0), so the magnitude
        // of dp0 = (0.5, 0, 0) is -0.5.
        let graph = DirectedGraph::new(2, vec![(0, 1)]).unwrap();
        let positions = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let disps = vec![v(0.5, 0.0, 0.0), Vec3::ZERO];
        let m = deconstruct_labels(&positions, &disps, &graph).unwrap();
        assert_eq!(m.get(0, 1), Some(-0.5));
    }

    #[test]
    fn deconstruct_zero_displacements() {
        let graph = DirectedGraph::new(3, vec![(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        let positions = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.5)];
        let disps = vec![Vec3::ZERO; 3];
        let m = deconstruct_labels(&positions, &disps, &graph).unwrap();
        for (_, _, mag) in m.iter() {
            assert_eq!(mag, 0.0);
        }
    }

    #[test]
    fn deconstruct_length_mismatch() {
        let graph = DirectedGraph::new(2, vec![(0, 1)]).unwrap();
        let err = deconstruct_labels(&[Vec3::ZERO, v(1.0, 0.0, 0.0)], &[Vec3::ZERO], &graph);
        assert!(matches!(err, Err(GeometryError::LengthMismatch { .. })));
    }

    /// Independent 3x3 solve via Cramer's rule, used as the oracle for the
    /// frozen sphere-fit example.
    fn cramer_solve(m: &Mat3, rhs: &Vec3) -> Vec3 {
        let det = m.det();
        let col = |mat: &Mat3, c: usize, v: &Vec3| {
            let mut out = *mat;
            let arr = v.as_array();
            for r in 0..3 {
                out.0[r][c] = arr[r];
            }
            out
        };
        Vec3::new(
            col(m, 0, rhs).det() / det,
            col(m, 1, rhs).det() / det,
            col(m, 2, rhs).det() / det,
        )
    }

    #[test]
    fn sphere_fit_recovers_known_displacement() {
        // Projections of dp = (2,0,0) onto (1,0,0), (1,1,0)/sqrt2, (1,0,1)/sqrt2.
        let xs = vec![v(2.0, 0.0, 0.0), v(1.0, 1.0, 0.0), v(1.0, 0.0, 1.0)];
        let fit = sphere_fit(&xs).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.center - v(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((fit.displacement - v(2.0, 0.0, 0.0)).norm() < 1e-12);

        // Oracle: solve the normal equations independently by Cramer's rule
        // and confirm every point satisfies |x - C|^2 = |C|^2.
        let inv_n = 1.0 / xs.len() as f64;
        let mut b = Vec3::ZERO;
        let mut a = Mat3::zero();
        for x in &xs {
            b += x.scale(x.norm_sq() * inv_n);
            a = a.add(&Mat3::outer(x, x).scale(inv_n));
        }
        let oracle_c = cramer_solve(&a.scale(2.0), &b);
        assert!((oracle_c - fit.center).norm() < 1e-12);
        for x in &xs {
            let lhs = (*x - oracle_c).norm_sq();
            assert!((lhs - oracle_c.norm_sq()).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_fit_zero_shortcut() {
        let fit = sphere_fit(&[Vec3::ZERO, Vec3::ZERO, Vec3::ZERO]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.displacement, Vec3::ZERO);
    }

    #[test]
    fn sphere_fit_duplicate_points_change_nothing() {
        let xs = vec![v(2.0, 0.0, 0.0), v(1.0, 1.0, 0.0), v(1.0, 0.0, 1.0)];
        let mut with_dup = xs.clone();
        with_dup.push(xs[0]);
        let a = sphere_fit(&xs).unwrap();
        let b = sphere_fit(&with_dup).unwrap();
        assert!((a.displacement - b.displacement).norm() < 1e-12);
        assert!((b.displacement - v(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn sphere_fit_empty_is_error() {
        assert!(matches!(sphere_fit(&[]), Err(GeometryError::EmptyProjections)));
    }

    #[test]
    fn reconstruct_round_trip_full_graph() {
        let positions = vec![
            v(0.0, 0.0, 0.0),
            v(1.1, 0.1, -0.2),
            v(-0.3, 1.2, 0.4),
            v(0.2, -0.4, 1.3),
            v(0.9, 1.0, 1.1),
        ];
        let disps = vec![
            v(0.05, -0.02, 0.03),
            v(-0.04, 0.01, 0.02),
            v(0.0, 0.0, 0.0),
            v(0.07, 0.06, -0.05),
            v(-0.01, 0.03, 0.04),
        ];
        let graph = crate::graph::complete_graph(5);
        let m = deconstruct_labels(&positions, &disps, &graph).unwrap();
        let rec = reconstruct_positions(&m, &graph, &positions).unwrap();
        for i in 0..5 {
            let expect = positions[i] + disps[i];
            assert!(
                (rec.positions[i] - expect).norm() < 1e-9,
                "node {i}: {:?} vs {:?}",
                rec.positions[i],
                expect
            );
        }
        assert!(rec.degenerate_nodes.len() <= 1); // node 2 has a zero label
    }

    #[test]
    fn reconstruct_zero_magnitudes_is_identity() {
        let positions = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let graph = crate::graph::complete_graph(3);
        let mut m = MagnitudeMatrix::new();
        for &(i, j) in graph.edges() {
            m.insert(i, j, 0.0);
        }
        let rec = reconstruct_positions(&m, &graph, &positions).unwrap();
        assert_eq!(rec.positions, positions);
    }

    #[test]
    fn reconstruct_flags_coplanar_node() {
        // Node 0 has two coplanar neighbors; its projections have rank < 3.
        let positions = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let disps = vec![v(0.3, 0.2, 0.1), Vec3::ZERO, Vec3::ZERO];
        let graph = DirectedGraph::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let m = deconstruct_labels(&positions, &disps, &graph).unwrap();

        // Independent rank check: both projections lie along the x/y axes,
        // so A = mean x x^T has a zero z row/column.
        let x1 = v(-0.3, 0.0, 0.0); // dp0 . (-1,0,0) = -0.3 along (-1,0,0)
        let x2 = v(0.0, -0.2, 0.0);
        let mut a = Mat3::zero();
        for x in [x1, x2] {
            a = a.add(&Mat3::outer(&x, &x).scale(0.5));
        }
        assert!(a.rank(1e-12) < 3);

        let rec = reconstruct_positions(&m, &graph, &positions).unwrap();
        assert!(rec.degenerate_nodes.contains(&0));
        assert_eq!(rec.positions[0], positions[0]);
        // Nodes 1 and 2 own no edges at all, also degenerate.
        assert!(rec.degenerate_nodes.contains(&1));
        assert!(rec.degenerate_nodes.contains(&2));
    }

    #[test]
    fn magnitude_coverage_checked() {
        let graph = DirectedGraph::new(2, vec![(0, 1), (1, 0)]).unwrap();
        let mut m = MagnitudeMatrix::new();
        m.insert(0, 1, 0.5);
        let err = reconstruct_positions(&m, &graph, &[Vec3::ZERO, v(1.0, 0.0, 0.0)]);
        assert!(matches!(err, Err(GeometryError::MissingMagnitude(1, 0))));
    }
}
