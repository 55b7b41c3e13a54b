//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! Values are eagerly computed `Array2<f64>` nodes on a tape; `backward`
//! walks the tape in reverse accumulating cotangents. Besides the usual
//! dense ops there are graph-aware ops (gather/scatter over edge indices,
//! distances and unit directions from positions) and the two displacement
//! aggregators: plain direction-scaled summation and the sphere fit, whose
//! adjoint differentiates through the regularized 3x3 linear solve.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::geometry::ZERO_SHORTCUT_TOL;
use crate::vec3::{Mat3, Vec3};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Edge structure shared by the graph-aware ops. `owner_edges[i]` lists the
/// edge-list indices owned by node `i`, in edge-list order, so sums over a
/// node's edges are left folds over the edge list.
#[derive(Debug)]
pub struct GraphIndex {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub owner_edges: Vec<Vec<usize>>,
}

impl GraphIndex {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut owner_edges = vec![Vec::new(); n_nodes];
        for (idx, &(i, _)) in edges.iter().enumerate() {
            owner_edges[i].push(idx);
        }
        GraphIndex { n_nodes, edges, owner_edges }
    }
}

/// Fixed Gaussian-basis layout plus the per-edge type assignment.
#[derive(Debug)]
pub struct GbfMeta {
    pub centers: Vec<f64>,
    pub gammas: Vec<f64>,
    pub edge_types: Vec<usize>,
}

enum Op {
    Leaf { requires_grad: bool },
    MatMul(ValueId, ValueId),
    AddRow(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Scale(ValueId, f64),
    Silu(ValueId),
    ConcatCols(Vec<ValueId>),
    GatherRows(ValueId, Rc<Vec<usize>>),
    ScatterMean(ValueId, Rc<Vec<usize>>, usize),
    MeanRows(ValueId),
    WeightedSumRows(ValueId, Rc<Vec<f64>>),
    RowNorm(ValueId),
    Abs(ValueId),
    MeanAll(ValueId),
    EdgeDistances(ValueId, Rc<GraphIndex>),
    EdgeDirections(ValueId, Rc<GraphIndex>),
    Gbf { dist: ValueId, affine: ValueId, meta: Rc<GbfMeta> },
    SphereFitAgg { mags: ValueId, dirs: ValueId, graph: Rc<GraphIndex>, degenerate: Vec<bool> },
    SumAgg { scalars: ValueId, dirs: ValueId, graph: Rc<GraphIndex> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("edge ({i}, {j}) endpoints are {dist:.3e} apart; directions are undefined")]
    CoincidentPositions { i: usize, j: usize, dist: f64 },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> ValueId {
        self.push(value, Op::Leaf { requires_grad })
    }

    pub fn constant(&mut self, value: Array2<f64>) -> ValueId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x + row` with `row` broadcast over rows (a bias).
    pub fn add_row(&mut self, x: ValueId, row: ValueId) -> ValueId {
        let value = self.value(x) + &self.value(row).row(0);
        self.push(value, Op::AddRow(x, row))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        let value = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            debug_assert_eq!(v.nrows(), rows);
            value
                .slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            offset += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: ValueId, indices: Rc<Vec<usize>>) -> ValueId {
        let src = self.value(x);
        let mut value = Array2::zeros((indices.len(), src.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        self.push(value, Op::GatherRows(x, indices))
    }

    /// Mean of the rows mapped to each output index; output rows with no
    /// contributors stay zero.
    pub fn scatter_mean(&mut self, x: ValueId, indices: Rc<Vec<usize>>, n_out: usize) -> ValueId {
        let src = self.value(x);
        let mut value = Array2::zeros((n_out, src.ncols()));
        let mut counts = vec![0usize; n_out];
        for (r, &i) in indices.iter().enumerate() {
            let mut row = value.row_mut(i);
            row += &src.row(r);
            counts[i] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                let mut row = value.row_mut(i);
                row /= c as f64;
            }
        }
        self.push(value, Op::ScatterMean(x, indices, n_out))
    }

    pub fn mean_rows(&mut self, x: ValueId) -> ValueId {
        let src = self.value(x);
        let value = src
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(x))
    }

    /// `sum_i w_i * row_i`, a weighted reduction to one row.
    pub fn weighted_sum_rows(&mut self, x: ValueId, weights: Rc<Vec<f64>>) -> ValueId {
        let src = self.value(x);
        debug_assert_eq!(src.nrows(), weights.len());
        let mut value = Array2::zeros((1, src.ncols()));
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                let mut out = value.row_mut(0);
                out.scaled_add(w, &src.row(r));
            }
        }
        self.push(value, Op::WeightedSumRows(x, weights))
    }

    /// Euclidean norm of each row (n x d -> n x 1); gradient is zero at the
    /// origin.
    pub fn row_norm(&mut self, x: ValueId) -> ValueId {
        let src = self.value(x);
        let mut value = Array2::zeros((src.nrows(), 1));
        for (r, row) in src.rows().into_iter().enumerate() {
            value[[r, 0]] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        self.push(value, Op::RowNorm(x))
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let value = self.value(x).mapv(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let src = self.value(x);
        let mean = src.mean().expect("non-empty");
        self.push(Array2::from_elem((1, 1), mean), Op::MeanAll(x))
    }

    /// Per-edge Euclidean distances from an `n x 3` position matrix.
    pub fn edge_distances(
        &mut self,
        positions: ValueId,
        graph: Rc<GraphIndex>,
    ) -> Result<ValueId, TapeError> {
        let pos = self.value(positions);
        let mut value = Array2::zeros((graph.edges.len(), 1));
        for (e, &(i, j)) in graph.edges.iter().enumerate() {
            let d = row_diff(pos, i, j).norm();
            if d < 1e-12 {
                return Err(TapeError::CoincidentPositions { i, j, dist: d });
            }
            value[[e, 0]] = d;
        }
        Ok(self.push(value, Op::EdgeDistances(positions, graph)))
    }

    /// Per-edge unit directions `(p_i - p_j) / |p_i - p_j|` (E x 3).
    pub fn edge_directions(
        &mut self,
        positions: ValueId,
        graph: Rc<GraphIndex>,
    ) -> Result<ValueId, TapeError> {
        let pos = self.value(positions);
        let mut value = Array2::zeros((graph.edges.len(), 3));
        for (e, &(i, j)) in graph.edges.iter().enumerate() {
            let diff = row_diff(pos, i, j);
            let d = diff.norm();
            if d < 1e-12 {
                return Err(TapeError::CoincidentPositions { i, j, dist: d });
            }
            let u = diff.scale(1.0 / d);
            value[[e, 0]] = u.x;
            value[[e, 1]] = u.y;
            value[[e, 2]] = u.z;
        }
        Ok(self.push(value, Op::EdgeDirections(positions, graph)))
    }

    /// Gaussian basis features per edge: `exp(-gamma_k (a_t d + b_t - mu_k)^2)`
    /// with a learnable per-edge-type affine `(a_t, b_t)` (T x 2 matrix).
    pub fn gbf(&mut self, dist: ValueId, affine: ValueId, meta: Rc<GbfMeta>) -> ValueId {
        let d = self.value(dist);
        let aff = self.value(affine);
        let n_edges = d.nrows();
        let k = meta.centers.len();
        let mut value = Array2::zeros((n_edges, k));
        for e in 0..n_edges {
            let t = meta.edge_types[e];
            let (a, b) = (aff[[t, 0]], aff[[t, 1]]);
            let scaled = a * d[[e, 0]] + b;
            for (c, (&mu, &gamma)) in meta.centers.iter().zip(&meta.gammas).enumerate() {
                let s = scaled - mu;
                value[[e, c]] = (-gamma * s * s).exp();
            }
        }
        self.push(value, Op::Gbf { dist, affine, meta })
    }

    /// Sphere-fit displacement aggregation (N x 3 output): per node, fits a
    /// sphere through the origin to the projection endpoints `m_e * u_e`
    /// over the node's edge instances; degenerate nodes output zero and
    /// block gradient flow.
    pub fn sphere_fit_agg(
        &mut self,
        mags: ValueId,
        dirs: ValueId,
        graph: Rc<GraphIndex>,
    ) -> ValueId {
        let m = self.value(mags);
        let u = self.value(dirs);
        let mut value = Array2::zeros((graph.n_nodes, 3));
        let mut degenerate = vec![false; graph.n_nodes];
        for i in 0..graph.n_nodes {
            match node_fit(m, u, &graph.owner_edges[i]) {
                Some(fit) => {
                    value[[i, 0]] = 2.0 * fit.center.x;
                    value[[i, 1]] = 2.0 * fit.center.y;
                    value[[i, 2]] = 2.0 * fit.center.z;
                }
                None => degenerate[i] = true,
            }
        }
        self.push(value, Op::SphereFitAgg { mags, dirs, graph, degenerate })
    }

    /// Flags recorded by a `sphere_fit_agg` node.
    pub fn degenerate_nodes(&self, id: ValueId) -> &[bool] {
        match &self.nodes[id.0].op {
            Op::SphereFitAgg { degenerate, .. } => degenerate,
            _ => panic!("not a sphere-fit node"),
        }
    }

    /// Sum-aggregation displacement head (N x 3): `D_i = sum_e s_e u_e`
    /// over node i's edge instances, accumulated in edge-list order.
    pub fn sum_agg(&mut self, scalars: ValueId, dirs: ValueId, graph: Rc<GraphIndex>) -> ValueId {
        let s = self.value(scalars);
        let u = self.value(dirs);
        let mut value = Array2::zeros((graph.n_nodes, 3));
        for i in 0..graph.n_nodes {
            let mut acc = Vec3::ZERO;
            for &e in &graph.owner_edges[i] {
                acc += vec3_row(u, e).scale(s[[e, 0]]);
            }
            value[[i, 0]] = acc.x;
            value[[i, 1]] = acc.y;
            value[[i, 2]] = acc.z;
        }
        self.push(value, Op::SumAgg { scalars, dirs, graph })
    }

    /// Reverse pass from a scalar output; returns per-node cotangents for
    /// every grad-requiring leaf.
    pub fn backward(&self, output: ValueId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[output.0].value.len(), 1);
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[idx] = Some(grad);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = grad.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&grad);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let grow = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, grad);
                    accumulate(&mut grads, *row, grow);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, -grad);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, grad * *c);
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).mapv(silu_derivative) * &grad;
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = gx.row_mut(i);
                        row += &grad.row(r);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScatterMean(x, indices, n_out) => {
                    let mut counts = vec![0usize; *n_out];
                    for &i in indices.iter() {
                        counts[i] += 1;
                    }
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = gx.row_mut(r);
                        row.scaled_add(1.0 / counts[i] as f64, &grad.row(i));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).nrows() as f64;
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for mut row in gx.rows_mut() {
                        row.scaled_add(1.0 / n, &grad.row(0));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedSumRows(x, weights) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            let mut row = gx.row_mut(r);
                            row.scaled_add(w, &grad.row(0));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowNorm(x) => {
                    let src = self.value(*x);
                    let out = &self.nodes[idx].value;
                    let mut gx = Array2::zeros(src.raw_dim());
                    for r in 0..src.nrows() {
                        let norm = out[[r, 0]];
                        if norm > 0.0 {
                            let g = grad[[r, 0]] / norm;
                            let mut row = gx.row_mut(r);
                            row.scaled_add(g, &src.row(r));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let gx = self.value(*x).mapv(signum_zero) * &grad;
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).len() as f64;
                    let gx = Array2::from_elem(self.value(*x).raw_dim(), grad[[0, 0]] / n);
                    accumulate(&mut grads, *x, gx);
                }
                Op::EdgeDistances(positions, graph) => {
                    let pos = self.value(*positions);
                    let mut gp = Array2::zeros(pos.raw_dim());
                    for (e, &(i, j)) in graph.edges.iter().enumerate() {
                        let diff = row_diff(pos, i, j);
                        let u = diff.scale(1.0 / diff.norm());
                        let g = grad[[e, 0]];
                        add_vec3_row(&mut gp, i, u.scale(g));
                        add_vec3_row(&mut gp, j, u.scale(-g));
                    }
                    accumulate(&mut grads, *positions, gp);
                }
                Op::EdgeDirections(positions, graph) => {
                    let pos = self.value(*positions);
                    let mut gp = Array2::zeros(pos.raw_dim());
                    for (e, &(i, j)) in graph.edges.iter().enumerate() {
                        let diff = row_diff(pos, i, j);
                        let d = diff.norm();
                        let u = diff.scale(1.0 / d);
                        let gu = vec3_row(&grad, e);
                        // d(u)/d(p_i) = (I - u u^T) / d
                        let v = (gu - u.scale(u.dot(&gu))).scale(1.0 / d);
                        add_vec3_row(&mut gp, i, v);
                        add_vec3_row(&mut gp, j, -v);
                    }
                    accumulate(&mut grads, *positions, gp);
                }
                Op::Gbf { dist, affine, meta } => {
                    let d = self.value(*dist);
                    let aff = self.value(*affine);
                    let out = &self.nodes[idx].value;
                    let mut gd = Array2::zeros(d.raw_dim());
                    let mut gaff = Array2::zeros(aff.raw_dim());
                    for e in 0..d.nrows() {
                        let t = meta.edge_types[e];
                        let (a, b) = (aff[[t, 0]], aff[[t, 1]]);
                        let scaled = a * d[[e, 0]] + b;
                        for (c, (&mu, &gamma)) in meta.centers.iter().zip(&meta.gammas).enumerate()
                        {
                            let s = scaled - mu;
                            let common = grad[[e, c]] * out[[e, c]] * (-2.0 * gamma * s);
                            gd[[e, 0]] += common * a;
                            gaff[[t, 0]] += common * d[[e, 0]];
                            gaff[[t, 1]] += common;
                        }
                    }
                    accumulate(&mut grads, *dist, gd);
                    accumulate(&mut grads, *affine, gaff);
                }
                Op::SphereFitAgg { mags, dirs, graph, degenerate } => {
                    let m = self.value(*mags);
                    let u = self.value(*dirs);
                    let mut gm = Array2::zeros(m.raw_dim());
                    let mut gu = Array2::zeros(u.raw_dim());
                    for i in 0..graph.n_nodes {
                        if degenerate[i] {
                            continue;
                        }
                        let g_disp = vec3_row(&grad, i);
                        if g_disp == Vec3::ZERO {
                            continue;
                        }
                        let fit = node_fit(m, u, &graph.owner_edges[i])
                            .expect("non-degenerate in forward");
                        // The refined solve realizes C = (2A)^{-1} b, so the
                        // adjoint is w = (2A)^{-1} g_C, g_b = w, g_A = -2 w C^T.
                        let g_c = g_disp.scale(2.0);
                        let Some(w) =
                            crate::geometry::solve_sphere_normal_system(&fit.two_a, &g_c, fit.eps)
                        else {
                            continue;
                        };
                        let g_b = w;
                        let g_a = Mat3::outer(&w, &fit.center).scale(-2.0);
                        let inv_n = 1.0 / graph.owner_edges[i].len() as f64;
                        let g_a_sym = g_a.add(&g_a.transpose());
                        for &e in &graph.owner_edges[i] {
                            let ue = vec3_row(u, e);
                            let me = m[[e, 0]];
                            let x = ue.scale(me);
                            // b-path: b = mean |x|^2 x
                            let gb_term =
                                (x.scale(2.0 * g_b.dot(&x)) + g_b.scale(x.norm_sq())).scale(inv_n);
                            // A-path: A = mean x x^T
                            let ga_term = g_a_sym.mul_vec(&x).scale(inv_n);
                            let g_x = gb_term + ga_term;
                            gm[[e, 0]] += ue.dot(&g_x);
                            add_vec3_row(&mut gu, e, g_x.scale(me));
                        }
                    }
                    accumulate(&mut grads, *mags, gm);
                    accumulate(&mut grads, *dirs, gu);
                }
                Op::SumAgg { scalars, dirs, graph } => {
                    let s = self.value(*scalars);
                    let u = self.value(*dirs);
                    let mut gs = Array2::zeros(s.raw_dim());
                    let mut gu = Array2::zeros(u.raw_dim());
                    for i in 0..graph.n_nodes {
                        let g = vec3_row(&grad, i);
                        for &e in &graph.owner_edges[i] {
                            gs[[e, 0]] += vec3_row(u, e).dot(&g);
                            add_vec3_row(&mut gu, e, g.scale(s[[e, 0]]));
                        }
                    }
                    accumulate(&mut grads, *scalars, gs);
                    accumulate(&mut grads, *dirs, gu);
                }
            }
        }
        Gradients { grads }
    }
}

/// Cotangents from a backward pass, indexed by the leaf's `ValueId`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a leaf, zeros if it never received a contribution.
    pub fn get_or_zeros(&self, id: ValueId, shape: (usize, usize)) -> Array2<f64> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: ValueId, delta: Array2<f64>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn signum_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn vec3_row(arr: &Array2<f64>, r: usize) -> Vec3 {
    Vec3::new(arr[[r, 0]], arr[[r, 1]], arr[[r, 2]])
}

fn row_diff(arr: &Array2<f64>, i: usize, j: usize) -> Vec3 {
    Vec3::new(
        arr[[i, 0]] - arr[[j, 0]],
        arr[[i, 1]] - arr[[j, 1]],
        arr[[i, 2]] - arr[[j, 2]],
    )
}

fn add_vec3_row(arr: &mut Array2<f64>, r: usize, v: Vec3) {
    arr[[r, 0]] += v.x;
    arr[[r, 1]] += v.y;
    arr[[r, 2]] += v.z;
}

struct NodeFit {
    center: Vec3,
    two_a: Mat3,
    eps: f64,
}

/// Shared fit used by forward and backward: mirrors
/// `geometry::sphere_fit` (same accumulators, regularization, rank and
/// residual rules) on the projection endpoints `m_e u_e`.
fn node_fit(mags: &Array2<f64>, dirs: &Array2<f64>, edge_ids: &[usize]) -> Option<NodeFit> {
    if edge_ids.is_empty() {
        return None;
    }
    if edge_ids.iter().all(|&e| mags[[e, 0]].abs() < ZERO_SHORTCUT_TOL) {
        return None;
    }
    let inv_n = 1.0 / edge_ids.len() as f64;
    let mut b = Vec3::ZERO;
    let mut a = Mat3::zero();
    let mut max_proj = 0.0_f64;
    for &e in edge_ids {
        let x = vec3_row(dirs, e).scale(mags[[e, 0]]);
        max_proj = max_proj.max(x.norm());
        b += x.scale(x.norm_sq() * inv_n);
        a = a.add(&Mat3::outer(&x, &x).scale(inv_n));
    }
    let two_a = a.scale(2.0);
    let eps = crate::geometry::sphere_fit_epsilon(&a);
    let center = crate::geometry::solve_sphere_normal_system(&two_a, &b, eps)?;
    if center.norm() > crate::geometry::BLOWUP_FACTOR * max_proj {
        return None;
    }
    Some(NodeFit { center, two_a, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences over every entry of a leaf.
    fn fd_check<F>(build: F, leaf_value: Array2<f64>, tol: f64)
    where
        F: Fn(&mut Tape, ValueId) -> ValueId,
    {
        let shape = (leaf_value.nrows(), leaf_value.ncols());
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_value.clone(), true);
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out);
        let analytic = grads.get_or_zeros(leaf, shape);

        let h = 1e-6;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = leaf_value.clone();
                plus[[r, c]] += h;
                let mut tp = Tape::new();
                let lp = tp.leaf(plus, false);
                let op = build(&mut tp, lp);
                let fp = tp.scalar(op);

                let mut minus = leaf_value.clone();
                minus[[r, c]] -= h;
                let mut tm = Tape::new();
                let lm = tm.leaf(minus, false);
                let om = build(&mut tm, lm);
                let fm = tm.scalar(om);

                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[[r, c]];
                // central differences carry ~eps*f/h of noise; below that
                // floor agreement is meaningless
                if (a - fd).abs() < 1e-9 {
                    continue;
                }
                let denom = a.abs().max(fd.abs());
                assert!(
                    ((a - fd) / denom).abs() < tol,
                    "entry ({r},{c}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_silu_gradients() {
        let w = array![[0.3, -0.6], [0.9, 0.2], [-0.4, 0.8]];
        fd_check(
            move |tape, leaf| {
                let wid = tape.constant(w.clone());
                let h = tape.matmul(leaf, wid);
                let act = tape.silu(h);
                tape.mean_all(act)
            },
            array![[0.5, -1.2, 0.7], [1.1, 0.4, -0.9]],
            1e-6,
        );
    }

    #[test]
    fn gather_scatter_gradients() {
        let idx = Rc::new(vec![0usize, 1, 1, 2, 0]);
        fd_check(
            move |tape, leaf| {
                let g = tape.gather_rows(leaf, idx.clone());
                let sg = tape.silu(g);
                let back = tape.scatter_mean(sg, idx.clone(), 3);
                tape.mean_all(back)
            },
            array![[0.2, 0.8], [-0.5, 0.3], [0.9, -0.1]],
            1e-6,
        );
    }

    #[test]
    fn row_norm_and_weighted_sum_gradients() {
        let w = Rc::new(vec![0.5, 0.0, 0.5]);
        fd_check(
            move |tape, leaf| {
                let n = tape.row_norm(leaf);
                tape.weighted_sum_rows(n, w.clone())
            },
            array![[0.3, -0.4, 1.0], [2.0, 0.1, -0.3], [-0.7, 0.8, 0.2]],
            1e-6,
        );
    }

    #[test]
    fn distance_and_direction_gradients() {
        let graph = Rc::new(GraphIndex::new(3, vec![(0, 1), (1, 2), (2, 0), (0, 2)]));
        let positions = array![[0.0, 0.0, 0.0], [1.1, 0.2, -0.3], [0.4, 0.9, 0.8]];
        let g2 = graph.clone();
        fd_check(
            move |tape, leaf| {
                let d = tape.edge_distances(leaf, g2.clone()).unwrap();
                let u = tape.edge_directions(leaf, g2.clone()).unwrap();
                let sd = tape.silu(d);
                let picked = tape.concat_cols(&[u, sd]);
                tape.mean_all(picked)
            },
            positions,
            1e-5,
        );
    }

    #[test]
    fn gbf_gradients() {
        let meta = Rc::new(GbfMeta {
            centers: vec![0.0, 0.7, 1.4],
            gammas: vec![2.0, 2.0, 2.0],
            edge_types: vec![0, 1, 0],
        });
        let dist = array![[0.9], [1.2], [0.5]];
        let m2 = meta.clone();
        let d2 = dist.clone();
        // affine is the differentiated leaf
        fd_check(
            move |tape, leaf| {
                let d = tape.constant(d2.clone());
                let g = tape.gbf(d, leaf, m2.clone());
                tape.mean_all(g)
            },
            array![[1.0, 0.0], [0.9, 0.1]],
            1e-6,
        );
        // distances as the leaf
        let m3 = meta.clone();
        fd_check(
            move |tape, leaf| {
                let aff = tape.constant(array![[1.0, 0.0], [0.9, 0.1]]);
                let g = tape.gbf(leaf, aff, m3.clone());
                tape.mean_all(g)
            },
            dist,
            1e-6,
        );
    }

    #[test]
    fn sum_agg_gradients() {
        let graph = Rc::new(GraphIndex::new(2, vec![(0, 1), (1, 0), (0, 1)]));
        let dirs = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0]];
        let g2 = graph.clone();
        let d2 = dirs.clone();
        fd_check(
            move |tape, leaf| {
                let u = tape.constant(d2.clone());
                let agg = tape.sum_agg(leaf, u, g2.clone());
                let n = tape.row_norm(agg);
                tape.mean_all(n)
            },
            array![[0.4], [-0.7], [0.9]],
            1e-6,
        );
    }

    #[test]
    fn sphere_fit_agg_matches_geometry_and_gradients() {
        // One node owning three spanning edges; magnitudes of a known
        // displacement reconstruct it exactly.
        let s = 1.0 / 2.0_f64.sqrt();
        let dirs = array![
            [1.0, 0.0, 0.0],
            [s, s, 0.0],
            [s, 0.0, s],
        ];
        let graph = Rc::new(GraphIndex::new(4, vec![(0, 1), (0, 2), (0, 3)]));
        let dp = Vec3::new(2.0, 0.0, 0.0);
        let mags = array![
            [dp.dot(&Vec3::new(1.0, 0.0, 0.0))],
            [dp.dot(&Vec3::new(s, s, 0.0))],
            [dp.dot(&Vec3::new(s, 0.0, s))],
        ];
        let mut tape = Tape::new();
        let m = tape.leaf(mags.clone(), true);
        let u = tape.constant(dirs.clone());
        let agg = tape.sphere_fit_agg(m, u, graph.clone());
        let out = tape.value(agg);
        assert!((out[[0, 0]] - 2.0).abs() < 1e-10);
        assert!(out[[0, 1]].abs() < 1e-10);
        assert!(!tape.degenerate_nodes(agg)[0]);

        let g2 = graph.clone();
        let d2 = dirs.clone();
        fd_check(
            move |tape, leaf| {
                let u = tape.constant(d2.clone());
                let agg = tape.sphere_fit_agg(leaf, u, g2.clone());
                let n = tape.row_norm(agg);
                tape.mean_all(n)
            },
            mags,
            1e-5,
        );
        // directions as the leaf
        let g3 = graph.clone();
        fd_check(
            move |tape, leaf| {
                let m = tape.constant(array![[2.0], [1.3], [0.9]]);
                let agg = tape.sphere_fit_agg(m, leaf, g3.clone());
                let n = tape.row_norm(agg);
                tape.mean_all(n)
            },
            dirs,
            1e-5,
        );
    }

    #[test]
    fn degenerate_node_blocks_gradient() {
        // Two coplanar directions: rank < 3, output zero, gradient zero.
        let graph = Rc::new(GraphIndex::new(3, vec![(0, 1), (0, 2)]));
        let dirs = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mut tape = Tape::new();
        let m = tape.leaf(array![[0.5], [0.7]], true);
        let u = tape.constant(dirs);
        let agg = tape.sphere_fit_agg(m, u, graph);
        assert!(tape.degenerate_nodes(agg)[0]);
        assert_eq!(tape.value(agg)[[0, 0]], 0.0);
        let n = tape.row_norm(agg);
        let out = tape.mean_all(n);
        let grads = tape.backward(out);
        let gm = grads.get_or_zeros(m, (2, 1));
        assert_eq!(gm, Array2::<f64>::zeros((2, 1)));
    }
}
