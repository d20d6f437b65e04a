//! Sliding-window Gauss-Newton with IRLS reweighting and Laplace
//! covariances.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::BandedMatrix;
use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::factors::{
    prior_factors, Factor, FactorContext, FactorKind, GyroMeasurement, Linearized, NodePrior, NoiseModel,
    StrainMeasurement, ToFScan,
};
use crate::geom::{exp_se3, Transform};
use crate::state::{to_body_coordinates, NodeCovariance, NodeIndex, StateGrid, StateNode, NODE_DOF};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once `‖δ‖∞` falls below this.
    pub step_tolerance: f64,
    /// Also stop once an iteration changes the cost by less than this
    /// fraction. Re-matching makes the ToF cost piecewise, so tiny
    /// increases near the optimum are expected.
    pub cost_tolerance: f64,
    /// Cauchy IRLS on ToF factors.
    pub robust: bool,
    /// Correspondence search radius, meters.
    pub max_radius: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
    pub compute_covariance: bool,
    /// Reports flag weak observability above this pose-covariance trace.
    pub observability_trace: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-6,
            cost_tolerance: 1e-6,
            robust: true,
            max_radius: 0.1,
            initial_damping: 0.0,
            max_damping: 1e2,
            compute_covariance: true,
            observability_trace: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: StateGrid,
    pub factors: Vec<Factor>,
    pub options: SolverOptions,
}

fn is_structural(f: &Factor) -> bool {
    matches!(
        f.kind(),
        FactorKind::ArclengthConsistency
            | FactorKind::TimeConsistency
            | FactorKind::StrainSmoothness
            | FactorKind::VelocitySmoothness
            | FactorKind::BaseClamp
    )
}

impl Problem {
    /// Problem over `grid` with the lattice priors plus `factors`.
    pub fn new(grid: StateGrid, factors: Vec<Factor>, options: SolverOptions) -> Self {
        let mut all = prior_factors(&grid);
        all.extend(factors.into_iter().filter(|f| !is_structural(f)));
        Self { grid, factors: all, options }
    }

    pub fn window(&self) -> (f64, f64) {
        (self.grid.times()[0], *self.grid.times().last().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCovarianceSummary {
    pub n: usize,
    pub k: usize,
    pub arclength: f64,
    pub time: f64,
    /// Trace of the 6×6 body-frame pose block.
    pub pose_trace: f64,
    pub diagonal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub window: [f64; 2],
    pub iterations: usize,
    pub final_cost: f64,
    /// Cost before the first step, then after every accepted step.
    pub cost_trace: Vec<f64>,
    /// Damping used by each accepted step.
    pub damping_trace: Vec<f64>,
    pub converged: bool,
    pub factor_counts: BTreeMap<FactorKind, usize>,
    /// Matched ToF rays at the final state.
    pub tof_matches: usize,
    pub active_dofs: usize,
    pub bandwidth: usize,
    /// Damping added to make the final information matrix invertible.
    pub covariance_damping: f64,
    pub max_pose_covariance_trace: f64,
    pub weakly_observable: bool,
    pub node_covariances: Vec<NodeCovarianceSummary>,
}

impl SolveReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Normal equations over the active degrees of freedom.
struct System {
    h: BandedMatrix,
    g: DVector<f64>,
    /// Stacked free-dof slot of each compact index.
    slots: Vec<usize>,
    total_slots: usize,
}

impl System {
    fn expand(&self, step: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_slots);
        for (i, &s) in self.slots.iter().enumerate() {
            out[s] = step[i];
        }
        out
    }
}

fn clamped(node: NodeIndex, dof: usize) -> bool {
    node.n == 0 && !(6..12).contains(&dof)
}

fn node_slot(grid: &StateGrid, node: NodeIndex) -> Option<usize> {
    grid.is_free(node).then(|| (node.k - grid.frozen_columns()) * grid.num_arclengths() + node.n)
}

fn linearize_all(grid: &StateGrid, factors: &[Factor], ctx: &FactorContext) -> Result<Vec<Linearized>> {
    factors.par_iter().map(|f| f.linearize(grid, ctx)).collect()
}

fn total_cost(lins: &[Linearized]) -> f64 {
    lins.iter().map(|l| l.cost).sum()
}

struct Contribution {
    idx: Vec<usize>,
    h: DMatrix<f64>,
    g: DVector<f64>,
}

fn assemble(grid: &StateGrid, lins: &[Linearized]) -> System {
    let total_slots = grid.num_free_nodes() * NODE_DOF;
    let mut active = vec![false; total_slots];
    for lin in lins {
        for (node, block) in &lin.blocks {
            let Some(base) = node_slot(grid, *node) else { continue };
            for c in 0..NODE_DOF {
                if !clamped(*node, c) && block.column(c).iter().any(|x| *x != 0.0) {
                    active[base * NODE_DOF + c] = true;
                }
            }
        }
    }
    let mut compact = vec![usize::MAX; total_slots];
    let mut slots = Vec::new();
    for (s, &a) in active.iter().enumerate() {
        if a {
            compact[s] = slots.len();
            slots.push(s);
        }
    }
    let contributions: Vec<Option<Contribution>> = lins
        .par_iter()
        .map(|lin| {
            let mut idx = Vec::new();
            let mut cols: Vec<(usize, usize)> = Vec::new();
            for (b, (node, block)) in lin.blocks.iter().enumerate() {
                let Some(base) = node_slot(grid, *node) else { continue };
                for c in 0..NODE_DOF {
                    let ci = compact[base * NODE_DOF + c];
                    if ci != usize::MAX && block.column(c).iter().any(|x| *x != 0.0) {
                        idx.push(ci);
                        cols.push((b, c));
                    }
                }
            }
            if idx.is_empty() {
                return None;
            }
            let j = DMatrix::from_fn(lin.rows(), idx.len(), |r, i| {
                let (b, c) = cols[i];
                lin.blocks[b].1[(r, c)]
            });
            let jt = j.transpose();
            Some(Contribution { h: &jt * &j, g: &jt * &lin.residual, idx })
        })
        .collect();
    let n = slots.len();
    let mut bw = NODE_DOF - 1;
    for c in contributions.iter().flatten() {
        let (lo, hi) = c.idx.iter().fold((usize::MAX, 0), |(lo, hi), &i| (lo.min(i), hi.max(i)));
        bw = bw.max(hi - lo);
    }
    let mut h = BandedMatrix::zeros(n, bw);
    let mut g = DVector::zeros(n);
    for c in contributions.iter().flatten() {
        for (a, &ia) in c.idx.iter().enumerate() {
            g[ia] += c.g[a];
            for (b, &ib) in c.idx.iter().enumerate() {
                if ia >= ib {
                    h.add(ia, ib, c.h[(a, b)]);
                }
            }
        }
    }
    System { h, g, slots, total_slots }
}

fn bump(lambda: f64) -> f64 {
    (lambda * 10.0).max(1e-6)
}

/// Minimize the total cost of `problem` from its current grid.
pub fn gauss_newton_solve(
    problem: &Problem,
    noise: &NoiseModel,
    map: Option<&EnvironmentMap>,
) -> Result<(StateGrid, SolveReport)> {
    let opts = &problem.options;
    let ctx = FactorContext { noise, map, max_radius: opts.max_radius, robust: opts.robust };
    let mut grid = problem.grid.clone();
    let mut lins = linearize_all(&grid, &problem.factors, &ctx)?;
    let mut cost = total_cost(&lins);
    let mut cost_trace = vec![cost];
    let mut damping_trace = Vec::new();
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let sys = assemble(&grid, &lins);
        if sys.slots.is_empty() {
            converged = true;
            break;
        }
        let rhs = -&sys.g;
        let mut accepted_step = None;
        let mut last_step;
        let mut stalled = false;
        loop {
            let Some(f) = sys.h.damped(lambda).ldlt() else {
                lambda = bump(lambda);
                if lambda > opts.max_damping {
                    return Err(Error::Unobservable { lambda });
                }
                continue;
            };
            let step = f.solve(&rhs);
            last_step = step.amax();
            let candidate = grid.apply_update(&sys.expand(&step))?;
            let cand_lins = linearize_all(&candidate, &problem.factors, &ctx)?;
            let cand_cost = total_cost(&cand_lins);
            if cand_cost <= cost + 1e-12 * cost.abs() {
                stalled = cost - cand_cost <= opts.cost_tolerance * cost.abs();
                grid = candidate;
                lins = cand_lins;
                cost = cand_cost;
                cost_trace.push(cost);
                damping_trace.push(lambda);
                accepted_step = Some(last_step);
                lambda = if lambda / 10.0 < 1e-6 { 0.0 } else { lambda / 10.0 };
                break;
            }
            if cand_cost - cost <= opts.cost_tolerance * cost.abs() {
                stalled = true;
                break;
            }
            lambda = bump(lambda);
            if lambda > opts.max_damping || last_step < opts.step_tolerance {
                break;
            }
        }
        iterations += 1;
        debug!("iteration {iterations}: cost {cost:.6e}, lambda {lambda:e}");
        match accepted_step {
            _ if stalled => {
                converged = true;
                break;
            }
            Some(s) if s < opts.step_tolerance => {
                converged = true;
                break;
            }
            Some(_) => {}
            None => {
                converged = last_step < opts.step_tolerance;
                break;
            }
        }
    }

    let sys = assemble(&grid, &lins);
    let mut covariance_damping = 0.0;
    let mut node_covariances = Vec::new();
    if opts.compute_covariance && !sys.slots.is_empty() {
        let mut damping = 0.0;
        let factor = loop {
            if let Some(f) = sys.h.damped(damping).ldlt() {
                break f;
            }
            damping = if damping == 0.0 { 1e-12 } else { damping * 10.0 };
            if damping > opts.max_damping {
                return Err(Error::Unobservable { lambda: damping });
            }
        };
        if damping > 0.0 {
            warn!("information matrix singular; covariance uses damping {damping:e}");
        }
        covariance_damping = damping;
        let z = factor.selected_inverse();
        let mut compact = vec![usize::MAX; sys.total_slots];
        for (i, &s) in sys.slots.iter().enumerate() {
            compact[s] = i;
        }
        let free: Vec<NodeIndex> = grid.free_nodes().collect();
        for (slot, idx) in free.into_iter().enumerate() {
            let mut cov = NodeCovariance::zeros();
            for a in 0..NODE_DOF {
                let ia = compact[slot * NODE_DOF + a];
                if ia == usize::MAX {
                    continue;
                }
                for b in 0..NODE_DOF {
                    let ib = compact[slot * NODE_DOF + b];
                    if ib != usize::MAX {
                        cov[(a, b)] = z.get(ia, ib);
                    }
                }
            }
            let m = to_body_coordinates(&grid.node(idx).pose);
            let body = m * cov * m.transpose();
            let node = grid.node_mut(idx);
            node.covariance = (body + body.transpose()) * 0.5;
        }
        for idx in grid.free_nodes() {
            let cov = &grid.node(idx).covariance;
            node_covariances.push(NodeCovarianceSummary {
                n: idx.n,
                k: idx.k,
                arclength: grid.arclengths()[idx.n],
                time: grid.times()[idx.k],
                pose_trace: cov.fixed_view::<6, 6>(0, 0).trace(),
                diagonal: cov.diagonal().iter().cloned().collect(),
            });
        }
    }
    let max_trace = node_covariances.iter().map(|c| c.pose_trace).fold(0.0, f64::max);
    let mut factor_counts = BTreeMap::new();
    for f in &problem.factors {
        *factor_counts.entry(f.kind()).or_insert(0) += 1;
    }
    let tof_matches = problem
        .factors
        .iter()
        .zip(&lins)
        .filter(|(f, _)| f.kind() == FactorKind::Tof)
        .map(|(_, l)| l.rows())
        .sum();
    let (t0, t1) = problem.window();
    let report = SolveReport {
        window: [t0, t1],
        iterations,
        final_cost: cost,
        cost_trace,
        damping_trace,
        converged,
        factor_counts,
        tof_matches,
        active_dofs: sys.slots.len(),
        bandwidth: sys.h.bandwidth(),
        covariance_damping,
        max_pose_covariance_trace: max_trace,
        weakly_observable: max_trace > opts.observability_trace,
        node_covariances,
    };
    Ok((grid, report))
}

/// Advance the window so it ends at or just past `new_time`.
///
/// New columns are spaced `knot_spacing` apart and extrapolated at constant
/// velocity and strain. Columns older than `window_length` before the new
/// end are removed and returned oldest first; the new head column receives
/// a unary prior built from its current estimate and Laplace covariance.
/// Measurement factors older than the new head are discarded.
pub fn slide_window(
    problem: &Problem,
    new_time: f64,
    window_length: f64,
    knot_spacing: f64,
) -> Result<(Problem, Vec<(f64, Vec<StateNode>)>)> {
    let (_, end) = problem.window();
    if !(new_time > end) {
        return Err(Error::InvalidGrid(format!("new time {new_time} must exceed the window end {end}")));
    }
    if !(knot_spacing > 0.0) || !(window_length > 0.0) {
        return Err(Error::InvalidGrid("window length and knot spacing must be positive".into()));
    }
    let mut grid = problem.grid.clone();
    let per = grid.num_arclengths();
    while *grid.times().last().unwrap() < new_time - 1e-9 {
        let last_k = grid.num_times() - 1;
        let t_last = grid.times()[last_k];
        let column: Vec<StateNode> = (0..per)
            .map(|n| {
                let prev = grid.node(NodeIndex::new(n, last_k));
                let pose = prev.pose * exp_se3(&(prev.velocity * knot_spacing));
                StateNode::new(pose, prev.strain, prev.velocity)
            })
            .collect();
        grid.push_column(t_last + knot_spacing, column)?;
    }
    let new_end = *grid.times().last().unwrap();
    let cutoff = new_end - window_length - 1e-9;
    let drop = grid.times().iter().take_while(|&&t| t < cutoff).count().min(grid.num_times() - 1);
    let dropped = grid.drop_front_columns(drop);
    let head_time = grid.times()[0];

    let mut factors = Vec::new();
    for f in &problem.factors {
        match f {
            Factor::NodePrior(p) if p.node.k >= drop => {
                let mut p = p.clone();
                p.node.k -= drop;
                factors.push(Factor::NodePrior(p));
            }
            Factor::NodePrior(_) => {}
            f if is_structural(f) => {}
            f => {
                if f.timestamp().is_none_or(|t| t >= head_time) {
                    factors.push(f.clone());
                }
            }
        }
    }
    if drop > 0 {
        for n in 0..per {
            let idx = NodeIndex::new(n, 0);
            factors.push(Factor::NodePrior(NodePrior::from_posterior(idx, grid.node(idx))));
        }
    }
    Ok((Problem::new(grid, factors, problem.options.clone()), dropped))
}

/// Minimum stationary samples per gyro.
pub const MIN_BIAS_SAMPLES: usize = 50;

/// Per-sensor mean angular rate over a stationary interval.
pub fn estimate_gyro_bias(stationary: &[GyroMeasurement]) -> Result<BTreeMap<u32, Vector3<f64>>> {
    let mut sums: BTreeMap<u32, (Vector3<f64>, usize)> = BTreeMap::new();
    for m in stationary {
        let e = sums.entry(m.sensor_id).or_insert((Vector3::zeros(), 0));
        e.0 += m.angular_rate;
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::InsufficientCalibration { got: 0, need: MIN_BIAS_SAMPLES });
    }
    sums.into_iter()
        .map(|(id, (sum, count))| {
            if count < MIN_BIAS_SAMPLES {
                Err(Error::InsufficientCalibration { got: count, need: MIN_BIAS_SAMPLES })
            } else {
                Ok((id, sum / count as f64))
            }
        })
        .collect()
}

/// Measurements grouped by type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    pub tof: Vec<ToFScan>,
    pub gyro: Vec<GyroMeasurement>,
    pub strain: Vec<StrainMeasurement>,
}

impl MeasurementSet {
    pub fn is_empty(&self) -> bool {
        self.tof.is_empty() && self.gyro.is_empty() && self.strain.is_empty()
    }

    pub fn time_span(&self) -> Option<(f64, f64)> {
        let times = self
            .tof
            .iter()
            .map(|m| m.timestamp)
            .chain(self.gyro.iter().map(|m| m.timestamp))
            .chain(self.strain.iter().map(|m| m.timestamp));
        times.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((lo, hi)) => Some((f64::min(lo, t), f64::max(hi, t))),
        })
    }

    /// Factors for measurements with `lo < t <= hi` (or `lo <= t` when
    /// `inclusive_lo`).
    pub fn factors_between(&self, lo: f64, hi: f64, inclusive_lo: bool, biases: &BTreeMap<u32, Vector3<f64>>) -> Vec<Factor> {
        let inside = |t: f64| (t > lo || (inclusive_lo && t == lo)) && t <= hi;
        let mut out = Vec::new();
        out.extend(self.tof.iter().filter(|m| inside(m.timestamp)).cloned().map(Factor::Tof));
        out.extend(self.gyro.iter().filter(|m| inside(m.timestamp)).map(|m| Factor::Gyro {
            measurement: m.clone(),
            bias: biases.get(&m.sensor_id).copied().unwrap_or_else(Vector3::zeros),
        }));
        out.extend(self.strain.iter().filter(|m| inside(m.timestamp)).cloned().map(Factor::Strain));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowOptions {
    /// Seconds of history kept in each window.
    pub window_length: f64,
    /// Time-knot spacing, seconds.
    pub knot_spacing: f64,
    /// Arclength-knot spacing, meters.
    pub arclength_spacing: f64,
    /// Window advance between solves, seconds.
    pub solve_every: f64,
    /// Weak prior tying the first window to the straight home shape.
    pub home_pose_sigma: f64,
    pub home_strain_sigma: f64,
    pub home_velocity_sigma: f64,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            window_length: 2.0,
            knot_spacing: 0.1,
            arclength_spacing: 0.1,
            solve_every: 0.5,
            home_pose_sigma: 0.02,
            home_strain_sigma: 0.5,
            home_velocity_sigma: 0.05,
        }
    }
}

impl WindowOptions {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("window_length", self.window_length),
            ("knot_spacing", self.knot_spacing),
            ("arclength_spacing", self.arclength_spacing),
            ("solve_every", self.solve_every),
            ("home_pose_sigma", self.home_pose_sigma),
            ("home_strain_sigma", self.home_strain_sigma),
            ("home_velocity_sigma", self.home_velocity_sigma),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.solve_every > self.window_length {
            return Err(Error::InvalidGrid("solve_every cannot exceed the window length".into()));
        }
        Ok(())
    }
}

/// Full-run estimate: every time column ever solved, plus per-window reports.
#[derive(Debug, Clone)]
pub struct Localization {
    pub trajectory: StateGrid,
    pub reports: Vec<SolveReport>,
}

/// Run the sliding-window estimator over a whole measurement log.
#[allow(clippy::too_many_arguments)]
pub fn localize(
    measurements: &MeasurementSet,
    robot_length: f64,
    base_pose: Transform,
    biases: &BTreeMap<u32, Vector3<f64>>,
    noise: &NoiseModel,
    solver: &SolverOptions,
    window: &WindowOptions,
    map: Option<&EnvironmentMap>,
) -> Result<Localization> {
    window.validate()?;
    noise.validate()?;
    let (t0, t_max) = measurements
        .time_span()
        .ok_or_else(|| Error::InvalidMeasurement("measurement log is empty".into()))?;
    let arcs = StateGrid::uniform_knots(0.0, robot_length, window.arclength_spacing);
    let first_end = (t0 + window.solve_every).max(t0 + window.knot_spacing);
    let times = StateGrid::uniform_knots(t0, first_end, window.knot_spacing);
    let grid = StateGrid::home(arcs.clone(), times, base_pose)?;
    let mut factors = measurements.factors_between(t0, grid.times().last().copied().unwrap(), true, biases);
    for n in 0..grid.num_arclengths() {
        let idx = NodeIndex::new(n, 0);
        factors.push(Factor::NodePrior(NodePrior::diagonal(
            idx,
            grid.node(idx).clone(),
            window.home_pose_sigma,
            window.home_strain_sigma,
            window.home_velocity_sigma,
        )));
    }
    let mut problem = Problem::new(grid, factors, solver.clone());
    let mut columns: Vec<(f64, Vec<StateNode>)> = Vec::new();
    let mut reports = Vec::new();
    loop {
        let (grid, report) = gauss_newton_solve(&problem, noise, map)?;
        debug!(
            "window [{:.2}, {:.2}]: {} iterations, cost {:.4e}",
            report.window[0], report.window[1], report.iterations, report.final_cost
        );
        problem.grid = grid;
        reports.push(report);
        let end = problem.window().1;
        if end >= t_max {
            break;
        }
        let (next, dropped) = slide_window(&problem, end + window.solve_every, window.window_length, window.knot_spacing)?;
        columns.extend(dropped);
        problem = next;
        let new_end = problem.window().1;
        problem.factors.extend(measurements.factors_between(end, new_end, false, biases));
    }
    let per = problem.grid.num_arclengths();
    for (k, &t) in problem.grid.times().iter().enumerate() {
        columns.push((t, (0..per).map(|n| problem.grid.node(NodeIndex::new(n, k)).clone()).collect()));
    }
    let trajectory = StateGrid::from_columns(arcs, base_pose, columns)?;
    Ok(Localization { trajectory, reports })
}
