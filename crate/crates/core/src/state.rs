//! Discretized estimation variables on a time × arclength lattice.
//!
//! Nodes are stored time-major: node `(n, k)` lives at `k * (N + 1) + n`.
//! Poses between knots come from sequential geodesic interpolation (along
//! arclength at the two bounding times, then along time), which reproduces
//! knots exactly and is continuous across cell edges. Strain and velocity
//! are interpolated bilinearly.

use nalgebra::{DVector, Matrix6, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{adjoint, exp_se3, geodesic_interpolate, twist, Transform, Twist};

pub type NodeCovariance = SMatrix<f64, 18, 18>;

/// Degrees of freedom per node: pose (6), strain (6), velocity (6).
pub const NODE_DOF: usize = 18;

/// Component offsets inside a node's 18-dof block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Pose = 0,
    Strain = 6,
    Velocity = 12,
}

impl Component {
    pub fn offset(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIndex {
    pub n: usize,
    pub k: usize,
}

impl NodeIndex {
    pub fn new(n: usize, k: usize) -> Self {
        Self { n, k }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateNode {
    pub pose: Transform,
    pub strain: Twist,
    pub velocity: Twist,
    /// Posterior covariance; the pose block holds the body-frame pose
    /// covariance `Σ_b` (perturbation of `T_bi`).
    pub covariance: NodeCovariance,
}

impl StateNode {
    pub fn new(pose: Transform, strain: Twist, velocity: Twist) -> Self {
        Self { pose, strain, velocity, covariance: NodeCovariance::zeros() }
    }

    pub fn body_pose_covariance(&self) -> Matrix6<f64> {
        self.covariance.fixed_view::<6, 6>(0, 0).into_owned()
    }
}

/// Straight-backbone strain: unit stretch along body x, no bending.
pub fn straight_strain() -> Twist {
    Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
}

/// Change of perturbation coordinates from the solver's inertial-left pose
/// perturbation `δ_i` to the body-frame `δt_bi = -Ad(T)⁻¹ δ_i`.
pub fn to_body_coordinates(pose: &Transform) -> NodeCovariance {
    let mut m = NodeCovariance::identity();
    let adj_inv = adjoint(&pose.inverse());
    m.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-adj_inv));
    m
}

/// Inverse of [`to_body_coordinates`].
pub fn from_body_coordinates(pose: &Transform) -> NodeCovariance {
    let mut m = NodeCovariance::identity();
    m.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-adjoint(pose)));
    m
}

/// Where a query `(s, t)` falls on the lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLocation {
    pub n0: usize,
    pub n1: usize,
    pub k0: usize,
    pub k1: usize,
    /// Fraction along arclength.
    pub u: f64,
    /// Fraction along time.
    pub v: f64,
}

impl CellLocation {
    /// Corner nodes in order `(n0,k0), (n1,k0), (n0,k1), (n1,k1)`.
    pub fn corners(&self) -> [NodeIndex; 4] {
        [
            NodeIndex::new(self.n0, self.k0),
            NodeIndex::new(self.n1, self.k0),
            NodeIndex::new(self.n0, self.k1),
            NodeIndex::new(self.n1, self.k1),
        ]
    }

    /// Bilinear weights matching [`CellLocation::corners`].
    pub fn weights(&self) -> [f64; 4] {
        let (u, v) = (self.u, self.v);
        [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v]
    }
}

/// Interpolated pose together with its left-perturbation Jacobians with
/// respect to the four cell corners.
#[derive(Debug, Clone)]
pub struct PoseInterpolation {
    pub pose: Transform,
    pub cell: CellLocation,
    pub jacobians: [Matrix6<f64>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    arclengths: Vec<f64>,
    times: Vec<f64>,
    nodes: Vec<StateNode>,
    base_pose: Transform,
    /// Columns `< frozen_columns` are excluded from updates.
    frozen_columns: usize,
}

fn check_knots(name: &str, knots: &[f64]) -> Result<()> {
    if knots.is_empty() {
        return Err(Error::InvalidGrid(format!("{name} knots are empty")));
    }
    if knots.iter().any(|x| !x.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!("{name} knots must be finite and strictly increasing")));
    }
    Ok(())
}

fn bracket(knots: &[f64], x: f64) -> (usize, usize, f64) {
    let last = knots.len() - 1;
    if last == 0 {
        return (0, 0, 0.0);
    }
    // first index with knot > x, clamped so x == last knot lands in the final cell
    let upper = knots.partition_point(|&k| k <= x).clamp(1, last);
    let lo = upper - 1;
    let frac = (x - knots[lo]) / (knots[upper] - knots[lo]);
    (lo, upper, frac.clamp(0.0, 1.0))
}

impl StateGrid {
    /// Build a grid, filling each node from `init(n, k)`. Base nodes are
    /// clamped to `base_pose` with zero velocity regardless of `init`.
    pub fn new<F>(arclengths: Vec<f64>, times: Vec<f64>, base_pose: Transform, mut init: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> StateNode,
    {
        check_knots("arclength", &arclengths)?;
        check_knots("time", &times)?;
        if arclengths[0] != 0.0 {
            return Err(Error::InvalidGrid("first arclength knot must be 0 (the base)".into()));
        }
        let mut nodes = Vec::with_capacity(arclengths.len() * times.len());
        for k in 0..times.len() {
            for n in 0..arclengths.len() {
                let mut node = init(n, k);
                if n == 0 {
                    node.pose = base_pose;
                    node.velocity = Twist::zeros();
                }
                nodes.push(node);
            }
        }
        Ok(Self { arclengths, times, nodes, base_pose, frozen_columns: 0 })
    }

    /// Assemble a grid from whole time columns, oldest first.
    pub fn from_columns(arclengths: Vec<f64>, base_pose: Transform, columns: Vec<(f64, Vec<StateNode>)>) -> Result<Self> {
        let per = arclengths.len();
        if let Some((_, c)) = columns.iter().find(|(_, c)| c.len() != per) {
            return Err(Error::DimensionMismatch { expected: per, got: c.len() });
        }
        let times: Vec<f64> = columns.iter().map(|(t, _)| *t).collect();
        let nodes: Vec<StateNode> = columns.into_iter().flat_map(|(_, c)| c).collect();
        let mut it = nodes.into_iter();
        Self::new(arclengths, times, base_pose, |_, _| it.next().unwrap())
    }

    /// Straight, static robot extending along the base's body x axis.
    pub fn home(arclengths: Vec<f64>, times: Vec<f64>, base_pose: Transform) -> Result<Self> {
        let s_knots = arclengths.clone();
        Self::new(arclengths, times, base_pose, |n, _| {
            let pose = base_pose * exp_se3(&(straight_strain() * s_knots[n]));
            StateNode::new(pose, straight_strain(), Twist::zeros())
        })
    }

    /// Uniformly spaced knots `0, step, …` covering `[0, end]`; `end` is
    /// always included as the last knot.
    pub fn uniform_knots(start: f64, end: f64, step: f64) -> Vec<f64> {
        let mut knots = vec![start];
        let count = ((end - start) / step - 1e-9).ceil().max(0.0) as usize;
        for i in 1..=count {
            knots.push((start + i as f64 * step).min(end));
        }
        if end > start && *knots.last().unwrap() < end {
            knots.push(end);
        }
        knots.dedup();
        knots
    }

    pub fn arclengths(&self) -> &[f64] {
        &self.arclengths
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn base_pose(&self) -> &Transform {
        &self.base_pose
    }

    pub fn num_arclengths(&self) -> usize {
        self.arclengths.len()
    }

    pub fn num_times(&self) -> usize {
        self.times.len()
    }

    pub fn frozen_columns(&self) -> usize {
        self.frozen_columns
    }

    pub fn set_frozen_columns(&mut self, frozen: usize) {
        self.frozen_columns = frozen.min(self.times.len());
    }

    /// Nodes that take part in updates, in stacking order.
    pub fn free_nodes(&self) -> impl Iterator<Item = NodeIndex> + '_ {
        let per = self.arclengths.len();
        (self.frozen_columns..self.times.len()).flat_map(move |k| (0..per).map(move |n| NodeIndex::new(n, k)))
    }

    pub fn num_free_nodes(&self) -> usize {
        (self.times.len() - self.frozen_columns) * self.arclengths.len()
    }

    pub fn is_free(&self, idx: NodeIndex) -> bool {
        idx.k >= self.frozen_columns && idx.k < self.times.len() && idx.n < self.arclengths.len()
    }

    fn flat(&self, idx: NodeIndex) -> usize {
        idx.k * self.arclengths.len() + idx.n
    }

    pub fn node(&self, idx: NodeIndex) -> &StateNode {
        &self.nodes[self.flat(idx)]
    }

    pub fn node_mut(&mut self, idx: NodeIndex) -> &mut StateNode {
        let i = self.flat(idx);
        &mut self.nodes[i]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeIndex, &StateNode)> {
        let per = self.arclengths.len();
        self.nodes.iter().enumerate().map(move |(i, node)| (NodeIndex::new(i % per, i / per), node))
    }

    /// Append a time column. Base entries are clamped.
    pub fn push_column(&mut self, time: f64, mut column: Vec<StateNode>) -> Result<()> {
        if column.len() != self.arclengths.len() {
            return Err(Error::DimensionMismatch { expected: self.arclengths.len(), got: column.len() });
        }
        if time <= *self.times.last().unwrap() || !time.is_finite() {
            return Err(Error::InvalidGrid(format!("new column time {time} must exceed the last knot")));
        }
        column[0].pose = self.base_pose;
        column[0].velocity = Twist::zeros();
        self.times.push(time);
        self.nodes.extend(column);
        Ok(())
    }

    /// Remove the oldest `count` columns, returning `(time, column)` pairs
    /// oldest first. At least one column always remains.
    pub fn drop_front_columns(&mut self, count: usize) -> Vec<(f64, Vec<StateNode>)> {
        let count = count.min(self.times.len() - 1);
        let per = self.arclengths.len();
        let nodes: Vec<StateNode> = self.nodes.drain(..count * per).collect();
        let times: Vec<f64> = self.times.drain(..count).collect();
        self.frozen_columns = self.frozen_columns.saturating_sub(count);
        times.into_iter().zip(nodes.chunks(per).map(|c| c.to_vec())).collect()
    }

    pub fn locate(&self, s: f64, t: f64) -> Result<CellLocation> {
        let (s_min, s_max) = (self.arclengths[0], *self.arclengths.last().unwrap());
        let (t_min, t_max) = (self.times[0], *self.times.last().unwrap());
        if !(s >= s_min && s <= s_max && t >= t_min && t <= t_max) {
            return Err(Error::QueryOutOfBounds { s, t, s_min, s_max, t_min, t_max });
        }
        let (n0, n1, u) = bracket(&self.arclengths, s);
        let (k0, k1, v) = bracket(&self.times, t);
        Ok(CellLocation { n0, n1, k0, k1, u, v })
    }

    pub fn interpolate_pose(&self, s: f64, t: f64) -> Result<Transform> {
        Ok(self.interpolate_pose_with_jacobians(s, t)?.pose)
    }

    pub fn interpolate_pose_with_jacobians(&self, s: f64, t: f64) -> Result<PoseInterpolation> {
        let cell = self.locate(s, t)?;
        let [c00, c10, c01, c11] = cell.corners();
        let (a, a0, a1) = geodesic_interpolate(&self.node(c00).pose, &self.node(c10).pose, cell.u);
        let (b, b0, b1) = geodesic_interpolate(&self.node(c01).pose, &self.node(c11).pose, cell.u);
        let (pose, ja, jb) = geodesic_interpolate(&a, &b, cell.v);
        let mut jacobians = [ja * a0, ja * a1, jb * b0, jb * b1];
        // degenerate cells collapse corners onto the same node; keep each
        // node's contribution on a single entry
        merge_duplicate_corners(&cell, &mut jacobians);
        Ok(PoseInterpolation { pose, cell, jacobians })
    }

    fn bilinear<F: Fn(&StateNode) -> Twist>(&self, cell: &CellLocation, field: F) -> Twist {
        let w = cell.weights();
        cell.corners().iter().zip(w).fold(Twist::zeros(), |acc, (c, w)| {
            if w == 0.0 {
                acc
            } else {
                acc + field(self.node(*c)) * w
            }
        })
    }

    pub fn interpolate_strain(&self, s: f64, t: f64) -> Result<(Twist, CellLocation)> {
        let cell = self.locate(s, t)?;
        Ok((self.bilinear(&cell, |n| n.strain), cell))
    }

    pub fn interpolate_velocity(&self, s: f64, t: f64) -> Result<(Twist, CellLocation)> {
        let cell = self.locate(s, t)?;
        Ok((self.bilinear(&cell, |n| n.velocity), cell))
    }

    /// Covariance of the nearest knot to `(s, t)`.
    pub fn nearest_covariance(&self, s: f64, t: f64) -> Result<NodeCovariance> {
        let cell = self.locate(s, t)?;
        let n = if cell.u <= 0.5 { cell.n0 } else { cell.n1 };
        let k = if cell.v <= 0.5 { cell.k0 } else { cell.k1 };
        Ok(self.node(NodeIndex::new(n, k)).covariance)
    }

    /// Apply a stacked perturbation over the free nodes, 18 entries per node
    /// in [`StateGrid::free_nodes`] order. Poses update on the left,
    /// strains and velocities additively; base poses and velocities stay
    /// clamped.
    pub fn apply_update(&self, delta: &DVector<f64>) -> Result<StateGrid> {
        let expected = NODE_DOF * self.num_free_nodes();
        if delta.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: delta.len() });
        }
        let mut out = self.clone();
        for (i, idx) in self.free_nodes().enumerate() {
            let block = delta.fixed_rows::<NODE_DOF>(i * NODE_DOF);
            let node = out.node_mut(idx);
            node.strain += block.fixed_rows::<6>(Component::Strain.offset());
            if idx.n != 0 {
                let d_pose: Twist = block.fixed_rows::<6>(Component::Pose.offset()).into_owned();
                node.pose = exp_se3(&d_pose) * node.pose;
                node.velocity += block.fixed_rows::<6>(Component::Velocity.offset());
            }
        }
        Ok(out)
    }

    /// Largest deviation of a base node from the clamped base pose.
    pub fn base_clamp_error(&self) -> f64 {
        (0..self.times.len())
            .map(|k| (self.node(NodeIndex::new(0, k)).pose.to_matrix() - self.base_pose.to_matrix()).amax())
            .fold(0.0, f64::max)
    }

    pub fn to_document(&self) -> GridDocument {
        GridDocument {
            arclengths: self.arclengths.clone(),
            times: self.times.clone(),
            frozen_columns: self.frozen_columns,
            base_pose: PoseDocument::from(&self.base_pose),
            nodes: self
                .nodes()
                .map(|(idx, node)| NodeDocument {
                    n: idx.n,
                    k: idx.k,
                    pose: PoseDocument::from(&node.pose),
                    strain: node.strain.as_slice().try_into().unwrap(),
                    velocity: node.velocity.as_slice().try_into().unwrap(),
                    covariance_diagonal: node.covariance.diagonal().as_slice().to_vec(),
                    pose_covariance: {
                        let p = node.body_pose_covariance();
                        (0..36).map(|i| p[(i / 6, i % 6)]).collect()
                    },
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &GridDocument) -> Result<Self> {
        let per = doc.arclengths.len();
        let expected = per * doc.times.len();
        if doc.nodes.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: doc.nodes.len() });
        }
        let mut slots: Vec<Option<StateNode>> = vec![None; expected];
        for nd in &doc.nodes {
            if nd.n >= per || nd.k >= doc.times.len() {
                return Err(Error::InvalidGrid(format!("node ({}, {}) outside lattice", nd.n, nd.k)));
            }
            let mut node = StateNode::new(
                nd.pose.to_transform(),
                Twist::from_column_slice(&nd.strain),
                Twist::from_column_slice(&nd.velocity),
            );
            if nd.covariance_diagonal.len() != NODE_DOF || nd.pose_covariance.len() != 36 {
                return Err(Error::InvalidGrid("covariance entries have the wrong length".into()));
            }
            for (i, d) in nd.covariance_diagonal.iter().enumerate() {
                node.covariance[(i, i)] = *d;
            }
            for (i, c) in nd.pose_covariance.iter().enumerate() {
                node.covariance[(i / 6, i % 6)] = *c;
            }
            slots[nd.k * per + nd.n] = Some(node);
        }
        let nodes = slots.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::InvalidGrid("missing nodes".into()))?;
        let mut grid = StateGrid::new(doc.arclengths.clone(), doc.times.clone(), doc.base_pose.to_transform(), |n, k| {
            nodes[k * per + n].clone()
        })?;
        grid.frozen_columns = doc.frozen_columns.min(doc.times.len());
        Ok(grid)
    }
}

fn merge_duplicate_corners(cell: &CellLocation, jac: &mut [Matrix6<f64>; 4]) {
    if cell.n0 == cell.n1 {
        jac[0] += jac[1];
        jac[1] = Matrix6::zeros();
        jac[2] += jac[3];
        jac[3] = Matrix6::zeros();
    }
    if cell.k0 == cell.k1 {
        jac[0] += jac[2];
        jac[2] = Matrix6::zeros();
        jac[1] += jac[3];
        jac[3] = Matrix6::zeros();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDocument {
    /// Row-major 3×3 rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Transform> for PoseDocument {
    fn from(t: &Transform) -> Self {
        Self { rotation: t.row_major_rotation(), translation: [t.translation.x, t.translation.y, t.translation.z] }
    }
}

impl PoseDocument {
    pub fn to_transform(&self) -> Transform {
        Transform::from_row_major(&self.rotation, &self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub n: usize,
    pub k: usize,
    pub pose: PoseDocument,
    pub strain: [f64; 6],
    pub velocity: [f64; 6],
    pub covariance_diagonal: Vec<f64>,
    /// Row-major 6×6 body-frame pose covariance.
    pub pose_covariance: Vec<f64>,
}

/// JSON form of a [`StateGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub arclengths: Vec<f64>,
    pub times: Vec<f64>,
    pub frozen_columns: usize,
    pub base_pose: PoseDocument,
    pub nodes: Vec<NodeDocument>,
}

/// Pose of a straight segment of length `s` starting at `base`.
pub fn straight_pose(base: &Transform, s: f64) -> Transform {
    *base * exp_se3(&twist(Vector3::new(s, 0.0, 0.0), Vector3::zeros()))
}
