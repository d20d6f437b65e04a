//! Measurement and prior factors: residuals, whitened Jacobians and robust
//! weights.
//!
//! Every factor linearizes into a [`Linearized`] block: a whitened residual
//! and one whitened Jacobian block (rows × 18) per touched node, expressed
//! in the solver's perturbation coordinates (inertial-left pose, additive
//! strain and velocity).

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, RowVector6, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::envmap::{EnvironmentMap, MapPoint};
use crate::error::{Error, Result};
use crate::geom::{
    adjoint, exp_se3, log_se3, odot3, rot_x, se3_left_jacobian, se3_left_jacobian_inv, Transform, Twist, TwistParts,
};
use crate::state::{CellLocation, Component, NodeIndex, StateGrid, StateNode, NODE_DOF};

/// Returns closer than this are invalid.
pub const TOF_MIN_RANGE: f64 = 0.025;

#[derive(Debug, Clone, PartialEq)]
pub struct ToFMeasurement {
    pub distance: f64,
    pub ray_direction: Vector3<f64>,
    /// Sensor frame to the body frame of its ring.
    pub sensor_extrinsic: Transform,
    pub arclength: f64,
    pub timestamp: f64,
    pub sensor_id: u32,
}

impl ToFMeasurement {
    /// `q_j^b`: the measured point in the body frame.
    pub fn body_point(&self) -> Vector3<f64> {
        self.sensor_extrinsic.transform_point(&(self.ray_direction * self.distance))
    }
}

/// One frame of a multi-zone ToF sensor. `ranges[i]` belongs to
/// `directions[i]`; `None` is a missing return.
#[derive(Debug, Clone, PartialEq)]
pub struct ToFScan {
    pub sensor_id: u32,
    pub timestamp: f64,
    pub arclength: f64,
    pub extrinsic: Transform,
    pub directions: Vec<Vector3<f64>>,
    pub ranges: Vec<Option<f64>>,
}

impl ToFScan {
    /// Valid returns as individual measurements.
    pub fn measurements(&self) -> impl Iterator<Item = ToFMeasurement> + '_ {
        self.directions.iter().zip(&self.ranges).filter_map(move |(dir, r)| {
            let d = (*r)?;
            (d >= TOF_MIN_RANGE && d.is_finite()).then_some(ToFMeasurement {
                distance: d,
                ray_direction: *dir,
                sensor_extrinsic: self.extrinsic,
                arclength: self.arclength,
                timestamp: self.timestamp,
                sensor_id: self.sensor_id,
            })
        })
    }
}

/// Unit ray directions at the centers of an `n × n` angular partition of a
/// square field of view, row-major with rows along sensor y. Boresight is +z.
pub fn ray_grid(n: usize, fov: f64) -> Vec<Vector3<f64>> {
    let cell = fov / n as f64;
    let angle = |i: usize| -fov / 2.0 + (i as f64 + 0.5) * cell;
    let mut dirs = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            dirs.push(Vector3::new(angle(col).tan(), angle(row).tan(), 1.0).normalize());
        }
    }
    dirs
}

#[derive(Debug, Clone, PartialEq)]
pub struct GyroMeasurement {
    pub angular_rate: Vector3<f64>,
    pub arclength: f64,
    pub timestamp: f64,
    pub sensor_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrainMeasurement {
    pub bending_angle: f64,
    /// Non-negative; the bending direction is carried by the angle.
    pub curvature: f64,
    pub arclength: f64,
    pub timestamp: f64,
    pub sensor_id: u32,
}

/// Measurement and process noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Added in quadrature to the range-dependent ToF sigma, meters.
    pub tof_extra_sigma: f64,
    pub gyro_sigma: f64,
    pub strain_sigma: f64,
    /// Arclength consistency, per unit of `Δs`.
    pub shape_sigma: f64,
    /// Time consistency, per unit of `Δt`.
    pub motion_sigma: f64,
    /// Random-walk intensities for strain and velocity along arclength and
    /// along time (variance `σ² Δ`).
    pub strain_smoothness_s: f64,
    pub strain_smoothness_t: f64,
    pub velocity_smoothness_s: f64,
    pub velocity_smoothness_t: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            tof_extra_sigma: 0.005,
            gyro_sigma: 0.02,
            strain_sigma: 0.05,
            shape_sigma: 0.02,
            motion_sigma: 0.05,
            strain_smoothness_s: 1.0,
            strain_smoothness_t: 1.0,
            velocity_smoothness_s: 0.5,
            velocity_smoothness_t: 0.5,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("tof_extra_sigma", self.tof_extra_sigma, true),
            ("gyro_sigma", self.gyro_sigma, false),
            ("strain_sigma", self.strain_sigma, false),
            ("shape_sigma", self.shape_sigma, false),
            ("motion_sigma", self.motion_sigma, false),
            ("strain_smoothness_s", self.strain_smoothness_s, false),
            ("strain_smoothness_t", self.strain_smoothness_t, false),
            ("velocity_smoothness_s", self.velocity_smoothness_s, false),
            ("velocity_smoothness_t", self.velocity_smoothness_t, false),
        ];
        for (name, v, zero_ok) in all {
            if !v.is_finite() || v < 0.0 || (v == 0.0 && !zero_ok) {
                return Err(Error::InvalidMeasurement(format!("noise parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Scalar point-to-plane variance `nᵀ R_ToF n` at range `d`.
    pub fn tof_variance(&self, d: f64) -> Result<f64> {
        Ok(tof_sigma(d)?.powi(2) + self.tof_extra_sigma.powi(2))
    }

    pub fn gyro_covariance(&self) -> Matrix3<f64> {
        Matrix3::identity() * self.gyro_sigma.powi(2)
    }

    pub fn strain_covariance(&self) -> Matrix6<f64> {
        Matrix6::identity() * self.strain_sigma.powi(2)
    }
}

/// Range-dependent ToF standard deviation, meters.
pub fn tof_sigma(d: f64) -> Result<f64> {
    if !(d >= TOF_MIN_RANGE) {
        return Err(Error::InvalidMeasurement(format!("ToF range {d} m below {TOF_MIN_RANGE} m")));
    }
    let lerp = |a: f64, b: f64, x0: f64, x1: f64| a + (b - a) * (d - x0) / (x1 - x0);
    let c = if d < 0.6 {
        lerp(0.014, 0.012, TOF_MIN_RANGE, 0.6)
    } else if d < 1.2 {
        lerp(0.012, 0.006, 0.6, 1.2)
    } else {
        0.006
    };
    Ok(c * d)
}

/// IRLS weight of the Cauchy loss: `R⁻¹ / (1 + e² R⁻¹)`.
pub fn cauchy_weight(e: f64, r: f64) -> f64 {
    (1.0 / r) / (1.0 + e * e / r)
}

/// The loss whose IRLS weight is [`cauchy_weight`]: `½ ln(1 + e²/R)`.
pub fn cauchy_cost(e: f64, r: f64) -> f64 {
    0.5 * (e * e / r).ln_1p()
}

/// `ε̃ = Ad(rot_x(θ)) [1, 0, 0, 0, 0, κ]ᵀ`.
pub fn strain_from_angle_curvature(theta: f64, kappa: f64) -> Twist {
    adjoint(&Transform::from_rotation(rot_x(theta))) * Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, kappa)
}

/// Point-to-plane error `α nᵀ (p_nn − T q)` for a fixed correspondence.
pub fn tof_error(pose: &Transform, body_point: &Vector3<f64>, matched: &MapPoint) -> f64 {
    matched.planarity * matched.normal.dot(&(matched.position - pose.transform_point(body_point)))
}

/// `G = α nᵀ D (T q)^⊙ Ad(T)`: sensitivity of [`tof_error`] to the
/// body-frame perturbation `T = T̄ exp(−δ^)`.
pub fn tof_body_jacobian(pose: &Transform, body_point: &Vector3<f64>, matched: &MapPoint) -> RowVector6<f64> {
    let p = pose.transform_point(body_point);
    (matched.normal.transpose() * odot3(&p) * adjoint(pose)) * matched.planarity
}

/// Sensitivity of [`tof_error`] to the solver's left perturbation
/// `T = exp(δ^) T̄`.
pub fn tof_inertial_jacobian(pose: &Transform, body_point: &Vector3<f64>, matched: &MapPoint) -> RowVector6<f64> {
    let p = pose.transform_point(body_point);
    -(matched.normal.transpose() * odot3(&p)) * matched.planarity
}

/// Error and match for one ray, or `None` when nothing lies within
/// `max_radius` of the projected point.
pub fn tof_residual<'a>(
    grid: &StateGrid,
    m: &ToFMeasurement,
    map: &'a EnvironmentMap,
    max_radius: f64,
) -> Result<Option<(f64, f64, &'a MapPoint)>> {
    let pose = grid.interpolate_pose(m.arclength, m.timestamp)?;
    let q = m.body_point();
    Ok(map
        .query_nn(&pose.transform_point(&q), max_radius)
        .map(|nn| (tof_error(&pose, &q, nn.point), nn.point.planarity, nn.point)))
}

/// `ϖ_angular(s, t) − (ω_meas − bias)`.
pub fn gyro_residual(grid: &StateGrid, m: &GyroMeasurement, bias: &Vector3<f64>) -> Result<Vector3<f64>> {
    let (w, _) = grid.interpolate_velocity(m.arclength, m.timestamp)?;
    Ok(w.angular() - (m.angular_rate - bias))
}

/// `ε(s, t) − ε̃`.
pub fn strain_residual(grid: &StateGrid, m: &StrainMeasurement) -> Result<Twist> {
    let (eps, _) = grid.interpolate_strain(m.arclength, m.timestamp)?;
    Ok(eps - strain_from_angle_curvature(m.bending_angle, m.curvature))
}

/// `Λ^{-1/2} Vᵀ` for `Σ = V Λ Vᵀ`, so that `LᵀL = Σ⁺`. Directions with
/// (numerically) zero variance carry no information.
pub fn sqrt_information(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut l = eig.eigenvectors.transpose();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let scale = if lam > 1e-14 * max.max(1e-300) { 1.0 / lam.sqrt() } else { 0.0 };
        l.row_mut(i).scale_mut(scale);
    }
    l
}

/// Unary prior on every free component of one node. The pose residual is
/// `log(T T_mean⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePrior {
    pub node: NodeIndex,
    pub mean: StateNode,
    /// 18×18 square-root information in solver coordinates.
    pub sqrt_information: DMatrix<f64>,
}

impl NodePrior {
    /// Independent isotropic sigmas per component block.
    pub fn diagonal(node: NodeIndex, mean: StateNode, pose_sigma: f64, strain_sigma: f64, velocity_sigma: f64) -> Self {
        let mut l = DMatrix::zeros(NODE_DOF, NODE_DOF);
        for i in 0..6 {
            l[(i, i)] = 1.0 / pose_sigma;
            l[(6 + i, 6 + i)] = 1.0 / strain_sigma;
            l[(12 + i, 12 + i)] = 1.0 / velocity_sigma;
        }
        Self { node, mean, sqrt_information: l }
    }

    /// Prior from a node's own posterior, converting its stored body-frame
    /// covariance back to solver coordinates.
    pub fn from_posterior(node: NodeIndex, state: &StateNode) -> Self {
        let m = crate::state::from_body_coordinates(&state.pose);
        let cov = m * state.covariance * m.transpose();
        let cov = DMatrix::from_iterator(NODE_DOF, NODE_DOF, cov.iter().cloned());
        let sym = (&cov + cov.transpose()) * 0.5;
        Self { node, mean: state.clone(), sqrt_information: sqrt_information(&sym) }
    }

    fn raw_residual(&self, state: &StateNode) -> DVector<f64> {
        let mut r = DVector::zeros(NODE_DOF);
        r.fixed_rows_mut::<6>(0).copy_from(&log_se3(&(state.pose * self.mean.pose.inverse())));
        r.fixed_rows_mut::<6>(6).copy_from(&(state.strain - self.mean.strain));
        r.fixed_rows_mut::<6>(12).copy_from(&(state.velocity - self.mean.velocity));
        r
    }
}

/// All factor kinds. Noise comes from the [`NoiseModel`] in the
/// [`FactorContext`] at linearization time.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// One scan; correspondences are re-found on every linearization.
    Tof(ToFScan),
    Gyro { measurement: GyroMeasurement, bias: Vector3<f64> },
    Strain(StrainMeasurement),
    /// Between `(n, k)` and `(n + 1, k)`.
    ArclengthConsistency { n: usize, k: usize },
    /// Between `(n, k)` and `(n, k + 1)`.
    TimeConsistency { n: usize, k: usize },
    StrainSmoothness { a: NodeIndex, b: NodeIndex },
    VelocitySmoothness { a: NodeIndex, b: NodeIndex },
    /// Records the base clamp. Base pose and velocity are not free, so
    /// this factor only reports the clamp violation as its residual.
    BaseClamp,
    NodePrior(NodePrior),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Tof,
    Gyro,
    Strain,
    ArclengthConsistency,
    TimeConsistency,
    StrainSmoothness,
    VelocitySmoothness,
    BaseClamp,
    NodePrior,
}

/// Everything a factor needs besides the state.
#[derive(Debug, Clone, Copy)]
pub struct FactorContext<'a> {
    pub noise: &'a NoiseModel,
    pub map: Option<&'a EnvironmentMap>,
    pub max_radius: f64,
    /// Cauchy IRLS on ToF factors; plain least squares otherwise.
    pub robust: bool,
}

/// Whitened linearization of one factor at the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearized {
    pub residual: DVector<f64>,
    /// `(node, rows × 18 block)`; each node appears once.
    pub blocks: Vec<(NodeIndex, DMatrix<f64>)>,
    /// Cost contribution: `½‖r‖²` for quadratic factors, the Cauchy loss
    /// for robust ToF.
    pub cost: f64,
}

impl Linearized {
    pub fn rows(&self) -> usize {
        self.residual.len()
    }

    fn empty() -> Self {
        Self { residual: DVector::zeros(0), blocks: Vec::new(), cost: 0.0 }
    }

    fn add_block(&mut self, node: NodeIndex, component: Component, jac: &DMatrix<f64>) {
        let rows = self.residual.len();
        let slot = match self.blocks.iter().position(|(n, _)| *n == node) {
            Some(i) => i,
            None => {
                self.blocks.push((node, DMatrix::zeros(rows, NODE_DOF)));
                self.blocks.len() - 1
            }
        };
        let mut view = self.blocks[slot].1.view_mut((0, component.offset()), (rows, jac.ncols()));
        view += jac;
    }

    fn quadratic(residual: DVector<f64>) -> Self {
        let cost = 0.5 * residual.norm_squared();
        Self { residual, blocks: Vec::new(), cost }
    }
}

fn to_dmatrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Jacobian of `log(T_b⁻¹ T_a exp(Δ x̄^))` with `x̄ = (x_a + x_b)/2`.
fn consistency_jacobians(
    ta: &Transform,
    tb: &Transform,
    xa: &Twist,
    xb: &Twist,
    delta: f64,
) -> (Twist, Matrix6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let step = (xa + xb) * (0.5 * delta);
    let y = tb.inverse() * *ta;
    let r = log_se3(&(y * exp_se3(&step)));
    let jr_inv = se3_left_jacobian_inv(&r);
    let adj_binv = adjoint(&tb.inverse());
    let d_pose_a = jr_inv * adj_binv;
    let d_x = jr_inv * adjoint(&y) * se3_left_jacobian(&step) * (0.5 * delta);
    (r, d_pose_a, -d_pose_a, d_x)
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Tof(_) => FactorKind::Tof,
            Factor::Gyro { .. } => FactorKind::Gyro,
            Factor::Strain(_) => FactorKind::Strain,
            Factor::ArclengthConsistency { .. } => FactorKind::ArclengthConsistency,
            Factor::TimeConsistency { .. } => FactorKind::TimeConsistency,
            Factor::StrainSmoothness { .. } => FactorKind::StrainSmoothness,
            Factor::VelocitySmoothness { .. } => FactorKind::VelocitySmoothness,
            Factor::BaseClamp => FactorKind::BaseClamp,
            Factor::NodePrior(_) => FactorKind::NodePrior,
        }
    }

    /// Latest timestamp the factor reads, if it is a measurement.
    pub fn timestamp(&self) -> Option<f64> {
        match self {
            Factor::Tof(s) => Some(s.timestamp),
            Factor::Gyro { measurement, .. } => Some(measurement.timestamp),
            Factor::Strain(m) => Some(m.timestamp),
            _ => None,
        }
    }

    pub fn linearize(&self, grid: &StateGrid, ctx: &FactorContext) -> Result<Linearized> {
        match self {
            Factor::Tof(scan) => linearize_tof(grid, scan, ctx),
            Factor::Gyro { measurement, bias } => {
                let r = gyro_residual(grid, measurement, bias)?;
                let cell = grid.locate(measurement.arclength, measurement.timestamp)?;
                let l = 1.0 / ctx.noise.gyro_sigma;
                let mut lin = Linearized::quadratic(to_dmatrix(&(r * l)).column(0).into_owned());
                let mut jac = DMatrix::zeros(3, 6);
                jac.view_mut((0, 3), (3, 3)).fill_with_identity();
                distribute(&mut lin, &cell, Component::Velocity, &(jac * l));
                Ok(lin)
            }
            Factor::Strain(m) => {
                let r = strain_residual(grid, m)?;
                let cell = grid.locate(m.arclength, m.timestamp)?;
                let l = 1.0 / ctx.noise.strain_sigma;
                let mut lin = Linearized::quadratic(to_dmatrix(&(r * l)).column(0).into_owned());
                distribute(&mut lin, &cell, Component::Strain, &(DMatrix::identity(6, 6) * l));
                Ok(lin)
            }
            Factor::ArclengthConsistency { n, k } => {
                let (ia, ib) = (NodeIndex::new(*n, *k), NodeIndex::new(n + 1, *k));
                check_nodes(grid, &[ia, ib])?;
                let ds = grid.arclengths()[n + 1] - grid.arclengths()[*n];
                let (a, b) = (grid.node(ia), grid.node(ib));
                let (r, ja, jb, jx) = consistency_jacobians(&a.pose, &b.pose, &a.strain, &b.strain, ds);
                let l = 1.0 / (ctx.noise.shape_sigma * ds);
                let mut lin = Linearized::quadratic(to_dmatrix(&(r * l)).column(0).into_owned());
                lin.add_block(ia, Component::Pose, &to_dmatrix(&(ja * l)));
                lin.add_block(ib, Component::Pose, &to_dmatrix(&(jb * l)));
                lin.add_block(ia, Component::Strain, &to_dmatrix(&(jx * l)));
                lin.add_block(ib, Component::Strain, &to_dmatrix(&(jx * l)));
                Ok(lin)
            }
            Factor::TimeConsistency { n, k } => {
                let (ia, ib) = (NodeIndex::new(*n, *k), NodeIndex::new(*n, k + 1));
                check_nodes(grid, &[ia, ib])?;
                let dt = grid.times()[k + 1] - grid.times()[*k];
                let (a, b) = (grid.node(ia), grid.node(ib));
                let (r, ja, jb, jx) = consistency_jacobians(&a.pose, &b.pose, &a.velocity, &b.velocity, dt);
                let l = 1.0 / (ctx.noise.motion_sigma * dt);
                let mut lin = Linearized::quadratic(to_dmatrix(&(r * l)).column(0).into_owned());
                lin.add_block(ia, Component::Pose, &to_dmatrix(&(ja * l)));
                lin.add_block(ib, Component::Pose, &to_dmatrix(&(jb * l)));
                lin.add_block(ia, Component::Velocity, &to_dmatrix(&(jx * l)));
                lin.add_block(ib, Component::Velocity, &to_dmatrix(&(jx * l)));
                Ok(lin)
            }
            Factor::StrainSmoothness { a, b } => {
                smoothness(grid, *a, *b, Component::Strain, ctx.noise.strain_smoothness_s, ctx.noise.strain_smoothness_t)
            }
            Factor::VelocitySmoothness { a, b } => smoothness(
                grid,
                *a,
                *b,
                Component::Velocity,
                ctx.noise.velocity_smoothness_s,
                ctx.noise.velocity_smoothness_t,
            ),
            Factor::BaseClamp => {
                let r = DVector::from_element(1, grid.base_clamp_error());
                Ok(Linearized::quadratic(r))
            }
            Factor::NodePrior(p) => {
                check_nodes(grid, &[p.node])?;
                let state = grid.node(p.node);
                let raw = p.raw_residual(state);
                let mut lin = Linearized::quadratic(&p.sqrt_information * raw.clone());
                let mut jac = DMatrix::<f64>::identity(NODE_DOF, NODE_DOF);
                let r_pose: Twist = raw.fixed_rows::<6>(0).into_owned();
                jac.view_mut((0, 0), (6, 6)).copy_from(&to_dmatrix(&se3_left_jacobian_inv(&r_pose)));
                lin.add_block(p.node, Component::Pose, &(&p.sqrt_information * jac));
                Ok(lin)
            }
        }
    }
}

fn check_nodes(grid: &StateGrid, nodes: &[NodeIndex]) -> Result<()> {
    for idx in nodes {
        if idx.n >= grid.num_arclengths() || idx.k >= grid.num_times() {
            return Err(Error::InvalidGrid(format!("factor references node ({}, {}) outside the grid", idx.n, idx.k)));
        }
    }
    Ok(())
}

/// Spread a Jacobian with respect to an interpolated strain/velocity onto
/// the cell corners with the bilinear weights.
fn distribute(lin: &mut Linearized, cell: &CellLocation, component: Component, jac: &DMatrix<f64>) {
    for (node, w) in cell.corners().into_iter().zip(cell.weights()) {
        if w != 0.0 {
            lin.add_block(node, component, &(jac * w));
        }
    }
}

fn smoothness(grid: &StateGrid, a: NodeIndex, b: NodeIndex, component: Component, sigma_s: f64, sigma_t: f64) -> Result<Linearized> {
    check_nodes(grid, &[a, b])?;
    let (sigma, gap) = match (a.n == b.n, a.k == b.k) {
        (false, true) => (sigma_s, grid.arclengths()[b.n] - grid.arclengths()[a.n]),
        (true, false) => (sigma_t, grid.times()[b.k] - grid.times()[a.k]),
        _ => return Err(Error::InvalidGrid("smoothness factor needs neighbors along one axis".into())),
    };
    let l = 1.0 / (sigma * gap.abs().sqrt());
    let pick = |node: &StateNode| match component {
        Component::Strain => node.strain,
        _ => node.velocity,
    };
    let r = (pick(grid.node(b)) - pick(grid.node(a))) * l;
    let mut lin = Linearized::quadratic(to_dmatrix(&r).column(0).into_owned());
    let eye = DMatrix::<f64>::identity(6, 6) * l;
    lin.add_block(a, component, &(-&eye));
    lin.add_block(b, component, &eye);
    Ok(lin)
}

fn linearize_tof(grid: &StateGrid, scan: &ToFScan, ctx: &FactorContext) -> Result<Linearized> {
    let Some(map) = ctx.map else {
        return Ok(Linearized::empty());
    };
    let interp = grid.interpolate_pose_with_jacobians(scan.arclength, scan.timestamp)?;
    let mut residual = Vec::new();
    let mut rows: Vec<RowVector6<f64>> = Vec::new();
    let mut cost = 0.0;
    for m in scan.measurements() {
        let q = m.body_point();
        let Some(nn) = map.query_nn(&interp.pose.transform_point(&q), ctx.max_radius) else {
            continue;
        };
        if nn.point.planarity == 0.0 {
            continue;
        }
        let e = tof_error(&interp.pose, &q, nn.point);
        let var = ctx.noise.tof_variance(m.distance)?;
        let (w, c) = if ctx.robust { (cauchy_weight(e, var), cauchy_cost(e, var)) } else { (1.0 / var, 0.5 * e * e / var) };
        let sw = w.sqrt();
        residual.push(e * sw);
        rows.push(tof_inertial_jacobian(&interp.pose, &q, nn.point) * sw);
        cost += c;
    }
    let mut lin = Linearized { residual: DVector::from_vec(residual), blocks: Vec::new(), cost };
    if lin.rows() == 0 {
        return Ok(lin);
    }
    let g = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
    for (node, jac) in interp.cell.corners().into_iter().zip(&interp.jacobians) {
        if jac.iter().any(|x| *x != 0.0) {
            lin.add_block(node, Component::Pose, &(&g * to_dmatrix(jac)));
        }
    }
    Ok(lin)
}

/// Consistency and smoothness priors over the whole lattice plus the base
/// clamp. Consistency factors touching only clamped base entries are
/// skipped.
pub fn prior_factors(grid: &StateGrid) -> Vec<Factor> {
    let (ns, nt) = (grid.num_arclengths(), grid.num_times());
    let mut out = vec![Factor::BaseClamp];
    for k in 0..nt {
        for n in 0..ns {
            let here = NodeIndex::new(n, k);
            if n + 1 < ns {
                out.push(Factor::ArclengthConsistency { n, k });
                out.push(Factor::StrainSmoothness { a: here, b: NodeIndex::new(n + 1, k) });
                if n > 0 {
                    out.push(Factor::VelocitySmoothness { a: here, b: NodeIndex::new(n + 1, k) });
                }
            }
            if k + 1 < nt {
                out.push(Factor::StrainSmoothness { a: here, b: NodeIndex::new(n, k + 1) });
                if n > 0 {
                    out.push(Factor::TimeConsistency { n, k });
                    out.push(Factor::VelocitySmoothness { a: here, b: NodeIndex::new(n, k + 1) });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmap::MapBuildOptions;
    use crate::geom::twist;
    use crate::state::straight_pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_map() -> EnvironmentMap {
        let mut pts = Vec::new();
        for i in -20..=20 {
            for j in -20..=20 {
                pts.push(Vector3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0));
            }
        }
        EnvironmentMap::build(&pts, &MapBuildOptions::default()).unwrap()
    }

    fn rand_twist(rng: &mut ChaCha8Rng, scale: f64) -> Twist {
        Twist::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    fn random_grid(rng: &mut ChaCha8Rng) -> StateGrid {
        let base = Transform::new(rot_x(0.3), Vector3::new(0.1, -0.2, 0.5));
        let s = vec![0.0, 0.1, 0.2];
        let t = vec![0.0, 0.1, 0.2];
        let mut perturb = Vec::new();
        for _ in 0..9 {
            perturb.push((rand_twist(rng, 0.05), rand_twist(rng, 0.3), rand_twist(rng, 0.3)));
        }
        StateGrid::new(s.clone(), t, base, |n, k| {
            let (dp, de, dv) = perturb[k * 3 + n];
            StateNode::new(exp_se3(&dp) * straight_pose(&base, s[n]), straight_strain_plus(de), dv)
        })
        .unwrap()
    }

    fn straight_strain_plus(d: Twist) -> Twist {
        crate::state::straight_strain() + d
    }

    fn perturbed(grid: &StateGrid, node: NodeIndex, dof: usize, h: f64) -> StateGrid {
        let mut g = grid.clone();
        let st = g.node_mut(node);
        match dof {
            0..=5 => {
                let mut d = Twist::zeros();
                d[dof] = h;
                st.pose = exp_se3(&d) * st.pose;
            }
            6..=11 => st.strain[dof - 6] += h,
            _ => st.velocity[dof - 12] += h,
        }
        g
    }

    fn fd_check(factor: &Factor, grid: &StateGrid, ctx: &FactorContext) -> f64 {
        let lin = factor.linearize(grid, ctx).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (node, block) in &lin.blocks {
            let mut fd = DMatrix::zeros(lin.rows(), NODE_DOF);
            for dof in 0..NODE_DOF {
                let plus = factor.linearize(&perturbed(grid, *node, dof, h), ctx).unwrap().residual;
                let minus = factor.linearize(&perturbed(grid, *node, dof, -h), ctx).unwrap().residual;
                fd.set_column(dof, &((plus - minus) / (2.0 * h)));
            }
            let err = (block - &fd).norm() / fd.norm().max(1e-8);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn tof_sigma_regimes() {
        assert!((tof_sigma(1.5).unwrap() - 0.009).abs() < 1e-15);
        assert!((tof_sigma(0.6).unwrap() - 0.0072).abs() < 1e-15);
        assert!((tof_sigma(0.6 - 1e-13).unwrap() - 0.0072).abs() < 1e-12);
        assert!((tof_sigma(1.2 - 1e-13).unwrap() - tof_sigma(1.2).unwrap()).abs() < 1e-12);
        assert!((tof_sigma(TOF_MIN_RANGE).unwrap() - 0.014 * TOF_MIN_RANGE).abs() < 1e-15);
        assert!(tof_sigma(0.02).is_err());
        assert!(tof_sigma(f64::NAN).is_err());
    }

    #[test]
    fn cauchy_weight_shape() {
        assert_eq!(cauchy_weight(0.0, 0.04), 1.0 / 0.04);
        assert!((cauchy_weight(0.2, 0.04) - 0.5 / 0.04).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for i in 0..100 {
            let w = cauchy_weight(i as f64 * 0.01, 0.01);
            assert!(w < last);
            last = w;
        }
        // bounded influence: w·e → 0
        assert!(cauchy_weight(1e6, 1.0) * 1e6 < 1e-5);
    }

    #[test]
    fn strain_mapping_cases() {
        assert_eq!(strain_from_angle_curvature(0.0, 3.0), Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 3.0));
        let e = strain_from_angle_curvature(std::f64::consts::FRAC_PI_2, 2.0);
        assert!((e - Twist::new(1.0, 0.0, 0.0, 0.0, -2.0, 0.0)).norm() < 1e-15);
        assert_eq!(strain_from_angle_curvature(1.234, 0.0), crate::state::straight_strain());
    }

    #[test]
    fn ray_grid_is_symmetric_and_unit() {
        let dirs = ray_grid(8, 45f64.to_radians());
        assert_eq!(dirs.len(), 64);
        for d in &dirs {
            assert!((d.norm() - 1.0).abs() < 1e-15 && d.z > 0.0);
        }
        assert!((dirs[0].x + dirs[7].x).abs() < 1e-15);
        assert!((dirs[0].y + dirs[56].y).abs() < 1e-15);
        let corner = (22.5f64 - 45.0 / 16.0).to_radians();
        assert!((dirs[63].x / dirs[63].z - corner.tan()).abs() < 1e-15);
    }

    #[test]
    fn point_to_plane_substitution() {
        let map = plane_map();
        let target = Vector3::new(0.3, 0.2, 0.05);
        let pose = Transform::from_translation(target);
        let m = &MapPoint { planarity: 1.0, ..map.query_nn(&target, 0.1).unwrap().point.clone() };
        assert!((tof_error(&pose, &Vector3::zeros(), m) + 0.05).abs() < 1e-12);
        let on_plane = Transform::from_translation(Vector3::new(0.3, 0.2, 0.0));
        assert_eq!(tof_error(&on_plane, &Vector3::zeros(), m), 0.0);
        let flat = MapPoint { planarity: 0.0, ..m.clone() };
        assert_eq!(tof_error(&pose, &Vector3::zeros(), &flat), 0.0);
        assert_eq!(tof_body_jacobian(&pose, &Vector3::zeros(), &flat), RowVector6::zeros());
    }

    #[test]
    fn point_to_plane_jacobian_matches_body_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = plane_map();
        for _ in 0..100 {
            let pose = exp_se3(&rand_twist(&mut rng, 0.5)) * Transform::from_translation(Vector3::new(0.0, 0.0, 0.3));
            let q = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let m = map.query_nn(&pose.transform_point(&q), 5.0).unwrap().point;
            let g = tof_body_jacobian(&pose, &q, m);
            let h = 1e-6;
            let mut fd = RowVector6::zeros();
            for i in 0..6 {
                let mut d = Twist::zeros();
                d[i] = h;
                let plus = tof_error(&(pose * exp_se3(&(-d))), &q, m);
                let minus = tof_error(&(pose * exp_se3(&d)), &q, m);
                fd[i] = (plus - minus) / (2.0 * h);
            }
            assert!((g - fd).norm() <= 1e-5 * fd.norm().max(1e-12), "{g} vs {fd}");
        }
    }

    #[test]
    fn pure_translation_sensitivity() {
        let map = plane_map();
        let pose = Transform::from_translation(Vector3::new(0.1, 0.1, 0.2));
        let m = map.query_nn(&pose.translation, 1.0).unwrap().point;
        let g = tof_body_jacobian(&pose, &Vector3::zeros(), m);
        assert!((g.fixed_columns::<3>(0) - RowVector6::new(0.0, 0.0, m.planarity, 0.0, 0.0, 0.0).fixed_columns::<3>(0)).norm() < 1e-12);
        let gi = tof_inertial_jacobian(&pose, &Vector3::zeros(), m);
        assert!((gi[2] + m.planarity).abs() < 1e-12);
    }

    #[test]
    fn gyro_and_strain_substitution() {
        let base = Transform::identity();
        let mut grid = StateGrid::home(vec![0.0, 0.1], vec![0.0, 0.1], base).unwrap();
        grid.node_mut(NodeIndex::new(1, 0)).velocity = twist(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.1));
        let m = GyroMeasurement { angular_rate: Vector3::new(0.01, 0.0, 0.11), arclength: 0.1, timestamp: 0.0, sensor_id: 0 };
        let r = gyro_residual(&grid, &m, &Vector3::new(0.01, 0.0, 0.01)).unwrap();
        assert!(r.norm() < 1e-15);
        let m2 = GyroMeasurement { angular_rate: Vector3::new(0.05, 0.0, 0.0), arclength: 0.1, timestamp: 0.1, sensor_id: 0 };
        assert_eq!(gyro_residual(&grid, &m2, &Vector3::zeros()).unwrap(), Vector3::new(-0.05, 0.0, 0.0));

        grid.node_mut(NodeIndex::new(1, 1)).strain = Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = StrainMeasurement { bending_angle: 0.0, curvature: 0.9, arclength: 0.1, timestamp: 0.1, sensor_id: 0 };
        let r = strain_residual(&grid, &s).unwrap();
        assert!((r - Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.1)).norm() < 1e-15);

        let noise = NoiseModel::default();
        let doubled = NoiseModel { strain_sigma: noise.strain_sigma * 2f64.sqrt(), ..noise.clone() };
        let ctx = |n| FactorContext { noise: n, map: None, max_radius: 0.1, robust: false };
        let f = Factor::Strain(s);
        let c1 = f.linearize(&grid, &ctx(&noise)).unwrap().cost;
        let c2 = f.linearize(&grid, &ctx(&doubled)).unwrap().cost;
        assert!((c1 - 2.0 * c2).abs() < 1e-12);
    }

    #[test]
    fn consistent_straight_grid_has_zero_prior_residuals() {
        let base = Transform::new(rot_x(0.2), Vector3::new(0.0, 0.0, 0.1));
        let grid = StateGrid::home(vec![0.0, 0.1, 0.25], vec![0.0, 0.1, 0.2], base).unwrap();
        let noise = NoiseModel::default();
        let ctx = FactorContext { noise: &noise, map: None, max_radius: 0.1, robust: true };
        for f in prior_factors(&grid) {
            assert!(f.linearize(&grid, &ctx).unwrap().residual.norm() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn static_time_residual_is_pose_log_difference() {
        let base = Transform::identity();
        let mut grid = StateGrid::home(vec![0.0, 0.1], vec![0.0, 0.1], base).unwrap();
        let moved = exp_se3(&Twist::new(0.0, 0.01, 0.0, 0.0, 0.0, 0.02)) * grid.node(NodeIndex::new(1, 1)).pose;
        grid.node_mut(NodeIndex::new(1, 1)).pose = moved;
        let noise = NoiseModel::default();
        let ctx = FactorContext { noise: &noise, map: None, max_radius: 0.1, robust: true };
        let lin = Factor::TimeConsistency { n: 1, k: 0 }.linearize(&grid, &ctx).unwrap();
        let expected = log_se3(&(moved.inverse() * grid.node(NodeIndex::new(1, 0)).pose));
        let scale = noise.motion_sigma * 0.1;
        assert!((lin.residual.clone() * scale - to_dmatrix(&expected).column(0)).norm() < 1e-12);
    }

    #[test]
    fn single_node_grid_only_clamps() {
        let grid = StateGrid::home(vec![0.0], vec![0.0], Transform::identity()).unwrap();
        assert_eq!(prior_factors(&grid), vec![Factor::BaseClamp]);
    }

    #[test]
    fn all_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = plane_map();
        let noise = NoiseModel::default();
        let ctx = FactorContext { noise: &noise, map: Some(&map), max_radius: 10.0, robust: false };
        for trial in 0..20 {
            let grid = random_grid(&mut rng);
            let (s, t) = (rng.random_range(0.0..0.2), rng.random_range(0.0..0.2));
            let mut factors = prior_factors(&grid);
            let dirs = ray_grid(4, 0.8);
            let pose = grid.interpolate_pose(s, t).unwrap();
            // aim the sensor at the plane from wherever the body sits
            let down = Transform::new(pose.rotation.transpose() * rot_x(std::f64::consts::PI), Vector3::zeros());
            let height = pose.translation.z.abs() + 0.3;
            let extr = Transform::new(down.rotation, pose.rotation.transpose() * Vector3::new(0.0, 0.0, height - pose.translation.z));
            factors.push(Factor::Tof(ToFScan {
                sensor_id: 0,
                timestamp: t,
                arclength: s,
                extrinsic: extr,
                directions: dirs.clone(),
                ranges: dirs.iter().map(|_| Some(rng.random_range(0.2..0.4))).collect(),
            }));
            factors.push(Factor::Gyro {
                measurement: GyroMeasurement { angular_rate: Vector3::new(0.1, 0.2, 0.3), arclength: s, timestamp: t, sensor_id: 1 },
                bias: Vector3::new(0.01, 0.0, 0.0),
            });
            factors.push(Factor::Strain(StrainMeasurement {
                bending_angle: 0.3,
                curvature: 2.0,
                arclength: s,
                timestamp: t,
                sensor_id: 2,
            }));
            let node = NodeIndex::new(1, 1);
            let mut prior = NodePrior::diagonal(node, grid.node(node).clone(), 0.01, 0.1, 0.2);
            prior.mean.pose = exp_se3(&rand_twist(&mut rng, 0.2)) * prior.mean.pose;
            factors.push(Factor::NodePrior(prior));
            for f in &factors {
                let err = fd_check(f, &grid, &ctx);
                assert!(err <= 1e-5, "trial {trial}: {:?} rel err {err}", f.kind());
            }
        }
    }

    #[test]
    fn robust_cost_is_bounded_influence() {
        let map = plane_map();
        let noise = NoiseModel::default();
        let grid = StateGrid::home(vec![0.0, 0.1], vec![0.0, 1.0], Transform::from_translation(Vector3::new(0.0, 0.0, 0.5)))
            .unwrap();
        let scan = |d: f64| {
            Factor::Tof(ToFScan {
                sensor_id: 0,
                timestamp: 0.5,
                arclength: 0.1,
                extrinsic: Transform::from_rotation(rot_x(std::f64::consts::PI)),
                directions: vec![Vector3::z()],
                ranges: vec![Some(d)],
            })
        };
        let robust = FactorContext { noise: &noise, map: Some(&map), max_radius: 1e4, robust: true };
        let quad = FactorContext { robust: false, ..robust };
        let step = |f: &Factor, c: &FactorContext| {
            let lin = f.linearize(&grid, c).unwrap();
            let j = &lin.blocks[0].1;
            (j.transpose() * &lin.residual).norm()
        };
        let (near, far) = (scan(0.6), scan(4.0));
        assert!(step(&far, &robust) < step(&near, &robust));
        assert!(step(&far, &quad) > step(&near, &quad));
        let huge = scan(400.0);
        assert!(step(&huge, &robust) < 1e-2 * step(&huge, &quad));
    }

    #[test]
    fn posterior_prior_round_trips_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = exp_se3(&rand_twist(&mut rng, 0.5));
        let a = DMatrix::from_fn(18, 18, |_, _| rng.random_range(-1.0..1.0));
        let cov_i = &a * a.transpose() + DMatrix::identity(18, 18);
        let m = crate::state::to_body_coordinates(&pose);
        let cov_i_s = crate::state::NodeCovariance::from_iterator(cov_i.iter().cloned());
        let mut state = StateNode::new(pose, crate::state::straight_strain(), Twist::zeros());
        state.covariance = m * cov_i_s * m.transpose();
        let prior = NodePrior::from_posterior(NodeIndex::new(1, 0), &state);
        let info = prior.sqrt_information.transpose() * &prior.sqrt_information;
        assert!((info * &cov_i - DMatrix::identity(18, 18)).amax() < 1e-8);
    }
}
