//! Uncertainty-aware scene reconstruction, anomaly detection against the
//! prior map, and localization error metrics.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::factors::{NoiseModel, ToFMeasurement, ToFScan};
use crate::geom::{odot3, rotation_angle_between, Transform};
use crate::ply::VertexTable;
use crate::state::StateGrid;

/// A measured point in the inertial frame with its covariance `Σ_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconPoint {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub sensor_id: u32,
    pub timestamp: f64,
    /// Zone index within the source scan.
    pub ray: usize,
    /// Whether the return came from an unmodelled object, when known.
    pub truth_anomaly: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructedCloud {
    pub points: Vec<ReconPoint>,
}

/// `R_ToF`: isotropic with the range-dependent variance.
pub fn tof_covariance(noise: &NoiseModel, distance: f64) -> Result<Matrix3<f64>> {
    Ok(Matrix3::identity() * noise.tof_variance(distance)?)
}

/// `p̄ = T̄ q̄` and `Σ_p = R_ToF + D p̄^⊙ Ad(T̄) Σ_b Ad(T̄)ᵀ p̄^⊙ᵀ Dᵀ`, with
/// `Σ_b` the body pose covariance of the knot nearest to `(s, t)`.
pub fn project_point(grid: &StateGrid, m: &ToFMeasurement, noise: &NoiseModel) -> Result<ReconPoint> {
    let pose = grid.interpolate_pose(m.arclength, m.timestamp)?;
    let sigma_b = grid.nearest_covariance(m.arclength, m.timestamp)?.fixed_view::<6, 6>(0, 0).into_owned();
    let position = pose.transform_point(&m.body_point());
    Ok(ReconPoint {
        position,
        covariance: project_covariance(&pose, &position, &sigma_b, &tof_covariance(noise, m.distance)?),
        sensor_id: m.sensor_id,
        timestamp: m.timestamp,
        ray: 0,
        truth_anomaly: None,
    })
}

pub fn project_covariance(
    pose: &Transform,
    position: &Vector3<f64>,
    sigma_b: &nalgebra::Matrix6<f64>,
    r_tof: &Matrix3<f64>,
) -> Matrix3<f64> {
    let g = odot3(position) * pose.adjoint();
    let cov = r_tof + g * sigma_b * g.transpose();
    (cov + cov.transpose()) * 0.5
}

/// Project every valid return. `truth[i][ray]` labels returns of scan `i`.
pub fn reconstruct_scene(
    grid: &StateGrid,
    scans: &[ToFScan],
    noise: &NoiseModel,
    truth: Option<&[Vec<bool>]>,
) -> Result<ReconstructedCloud> {
    let per_scan: Vec<Vec<ReconPoint>> = scans
        .par_iter()
        .enumerate()
        .map(|(i, scan)| {
            let mut out = Vec::new();
            for (ray, r) in scan.ranges.iter().enumerate() {
                let Some(d) = *r else { continue };
                if d < crate::factors::TOF_MIN_RANGE || !d.is_finite() {
                    continue;
                }
                let m = ToFMeasurement {
                    distance: d,
                    ray_direction: scan.directions[ray],
                    sensor_extrinsic: scan.extrinsic,
                    arclength: scan.arclength,
                    timestamp: scan.timestamp,
                    sensor_id: scan.sensor_id,
                };
                let mut p = project_point(grid, &m, noise)?;
                p.ray = ray;
                p.truth_anomaly = truth.and_then(|t| t.get(i)).and_then(|t| t.get(ray)).copied();
                out.push(p);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ReconstructedCloud { points: per_scan.into_iter().flatten().collect() })
}

const COV_COLUMNS: [(&str, usize, usize); 6] =
    [("cxx", 0, 0), ("cxy", 0, 1), ("cxz", 0, 2), ("cyy", 1, 1), ("cyz", 1, 2), ("czz", 2, 2)];

impl ReconstructedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Positions, the six unique covariance entries, covariance eigenvalues
    /// (descending), source and truth label (`-1` when unknown).
    pub fn to_table(&self) -> VertexTable {
        let col = |f: &dyn Fn(&ReconPoint) -> f64| self.points.iter().map(f).collect::<Vec<_>>();
        let mut t = VertexTable::default();
        t.push_column("x", col(&|p| p.position.x));
        t.push_column("y", col(&|p| p.position.y));
        t.push_column("z", col(&|p| p.position.z));
        for (name, i, j) in COV_COLUMNS {
            t.push_column(name, col(&|p| p.covariance[(i, j)]));
        }
        let eig: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| {
                let mut e: Vec<f64> = SymmetricEigen::new(p.covariance).eigenvalues.iter().copied().collect();
                e.sort_by(|a, b| b.total_cmp(a));
                [e[0], e[1], e[2]]
            })
            .collect();
        for k in 0..3 {
            t.push_column(format!("eig{k}"), eig.iter().map(|e| e[k]).collect());
        }
        t.push_column("sensor_id", col(&|p| p.sensor_id as f64));
        t.push_column("timestamp", col(&|p| p.timestamp));
        t.push_column("ray", col(&|p| p.ray as f64));
        t.push_column("truth_anomaly", col(&|p| p.truth_anomaly.map_or(-1.0, |b| b as u8 as f64)));
        t
    }

    pub fn from_table(table: &VertexTable) -> Result<Self> {
        let need = |name: &str| table.column(name).ok_or_else(|| Error::Parse(format!("cloud lacks column '{name}'")));
        let pos = table.vec3("x", "y", "z").ok_or_else(|| Error::Parse("cloud lacks x/y/z".into()))?;
        let cov: Vec<&[f64]> = COV_COLUMNS.iter().map(|(n, _, _)| need(n)).collect::<Result<_>>()?;
        let (sid, ts, ray, truth) = (need("sensor_id")?, need("timestamp")?, need("ray")?, need("truth_anomaly")?);
        let points = (0..pos.len())
            .map(|k| {
                let mut c = Matrix3::zeros();
                for (col, (_, i, j)) in cov.iter().zip(COV_COLUMNS) {
                    c[(i, j)] = col[k];
                    c[(j, i)] = col[k];
                }
                ReconPoint {
                    position: pos[k],
                    covariance: c,
                    sensor_id: sid[k] as u32,
                    timestamp: ts[k],
                    ray: ray[k] as usize,
                    truth_anomaly: (truth[k] >= 0.0).then_some(truth[k] > 0.5),
                }
            })
            .collect();
        Ok(Self { points })
    }
}

/// RMS distance from each point to its nearest map point; `None` for an
/// empty cloud or map.
pub fn cloud_to_map_rmse(cloud: &ReconstructedCloud, map: &EnvironmentMap) -> Option<f64> {
    if cloud.is_empty() || map.is_empty() {
        return None;
    }
    // collect before summing so the result does not depend on thread scheduling
    let sq: Vec<f64> = cloud
        .points
        .par_iter()
        .map(|p| map.query_nn(&p.position, f64::INFINITY).map_or(0.0, |n| n.distance * n.distance))
        .collect();
    let sum: f64 = sq.iter().sum();
    Some((sum / cloud.len() as f64).sqrt())
}

/// Squared Mahalanobis distance `dᵀ (Σ_p + Σ_nn)⁻¹ d`. The flag is set when
/// the sum had to be regularized by `1e-12 I`.
pub fn mahalanobis_score(d: &Vector3<f64>, sigma_p: &Matrix3<f64>, sigma_nn: &Matrix3<f64>) -> (f64, bool) {
    let s = sigma_p + sigma_nn;
    match s.cholesky() {
        Some(c) => (d.dot(&c.solve(d)), false),
        None => {
            let reg = s + Matrix3::identity() * 1e-12;
            let score = match reg.cholesky() {
                Some(c) => d.dot(&c.solve(d)),
                None => f64::INFINITY,
            };
            (score, true)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPoint {
    pub index: usize,
    pub position: [f64; 3],
    pub score: f64,
    pub sensor_id: u32,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub false_positive_rate: Option<f64>,
}

impl DetectionMetrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            precision: ratio(tp, fp),
            recall: ratio(tp, fn_),
            false_positive_rate: ratio(fp, tn),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub tau: f64,
    pub num_points: usize,
    /// Score of every point, cloud order; `null` when the map is empty.
    pub scores: Vec<Option<f64>>,
    pub flagged: Vec<FlaggedPoint>,
    /// Points whose covariance sum was singular.
    pub regularized: usize,
    /// Present when the cloud carries truth labels.
    pub metrics: Option<DetectionMetrics>,
}

impl AnomalyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Flag points whose squared Mahalanobis distance to their nearest map point
/// exceeds `tau`.
pub fn detect_anomalies(cloud: &ReconstructedCloud, map: &EnvironmentMap, tau: f64) -> Result<AnomalyReport> {
    if tau.is_nan() {
        return Err(Error::InvalidMeasurement("threshold tau is NaN".into()));
    }
    let scored: Vec<Option<(f64, bool)>> = cloud
        .points
        .par_iter()
        .map(|p| {
            map.query_nn(&p.position, f64::INFINITY)
                .map(|nn| mahalanobis_score(&(p.position - nn.point.position), &p.covariance, &nn.point.prior_covariance))
        })
        .collect();
    let regularized = scored.iter().flatten().filter(|s| s.1).count();
    if regularized > 0 {
        warn!("{regularized} singular covariance sums regularized with 1e-12 I");
    }
    let flagged: Vec<FlaggedPoint> = scored
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let (score, _) = (*s)?;
            let p = &cloud.points[i];
            (score > tau).then(|| FlaggedPoint {
                index: i,
                position: p.position.into(),
                score,
                sensor_id: p.sensor_id,
                timestamp: p.timestamp,
            })
        })
        .collect();
    let labelled = cloud.points.iter().all(|p| p.truth_anomaly.is_some()) && !cloud.is_empty();
    let metrics = labelled.then(|| {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (p, s) in cloud.points.iter().zip(&scored) {
            let flag = s.is_some_and(|(score, _)| score > tau);
            match (flag, p.truth_anomaly == Some(true)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        DetectionMetrics::from_counts(tp, fp, fn_, tn)
    });
    Ok(AnomalyReport {
        tau,
        num_points: cloud.len(),
        scores: scored.iter().map(|s| s.map(|x| x.0)).collect(),
        flagged,
        regularized,
        metrics,
    })
}

/// Ground-truth pose of one sensor ring.
#[derive(Debug, Clone, PartialEq)]
pub struct RingPose {
    pub timestamp: f64,
    pub ring: usize,
    pub arclength: f64,
    pub pose: Transform,
}

/// Tolerance when matching truth timestamps to the estimate's time span.
pub const TIME_MATCH_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub samples: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Standard deviation of the absolute errors.
    pub std: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        let n = errors.len().max(1) as f64;
        let mae = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let std = (errors.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n).sqrt();
        Self { samples: errors.len(), mae, rmse, std, max: errors.iter().copied().fold(0.0, f64::max) }
    }
}

/// Translation errors in meters, rotation errors in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingErrors {
    pub ring: Option<usize>,
    pub arclength: Option<f64>,
    pub translation: ErrorStats,
    pub rotation: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub rings: Vec<RingErrors>,
    pub pooled: RingErrors,
    /// Truth records outside the estimate's time span.
    pub unmatched: usize,
}

/// Geodesic rotation error `|log(R_estᵀ R_true)|`.
pub fn rotation_error(a: &Transform, b: &Transform) -> f64 {
    rotation_angle_between(&a.rotation, &b.rotation)
}

/// Compare the estimated backbone against ring ground truth. Truth records
/// within [`TIME_MATCH_TOLERANCE`] of the estimate's time span are used;
/// the estimate is evaluated at the clamped time.
pub fn evaluate_localization(estimate: &StateGrid, truth: &[RingPose]) -> Result<LocalizationMetrics> {
    let times = estimate.times();
    let (t0, t1) = (times[0], *times.last().unwrap());
    let mut per_ring: BTreeMap<usize, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut unmatched = 0;
    for r in truth {
        if r.timestamp < t0 - TIME_MATCH_TOLERANCE || r.timestamp > t1 + TIME_MATCH_TOLERANCE {
            unmatched += 1;
            continue;
        }
        let est = estimate.interpolate_pose(r.arclength, r.timestamp.clamp(t0, t1))?;
        let entry = per_ring.entry(r.ring).or_insert_with(|| (r.arclength, Vec::new(), Vec::new()));
        entry.1.push((est.translation - r.pose.translation).norm());
        entry.2.push(rotation_error(&est, &r.pose));
    }
    if per_ring.is_empty() {
        return Err(Error::NoOverlap);
    }
    let (mut all_t, mut all_r) = (Vec::new(), Vec::new());
    let rings = per_ring
        .into_iter()
        .map(|(ring, (s, te, re))| {
            all_t.extend_from_slice(&te);
            all_r.extend_from_slice(&re);
            RingErrors {
                ring: Some(ring),
                arclength: Some(s),
                translation: ErrorStats::from_errors(&te),
                rotation: ErrorStats::from_errors(&re),
            }
        })
        .collect();
    let pooled = RingErrors {
        ring: None,
        arclength: None,
        translation: ErrorStats::from_errors(&all_t),
        rotation: ErrorStats::from_errors(&all_r),
    };
    Ok(LocalizationMetrics { rings, pooled, unmatched })
}

impl LocalizationMetrics {
    /// One row per ring plus a pooled row; translation in cm, rotation in
    /// degrees.
    pub fn write_csv<W: Write>(&self, mut out: W, condition: &str) -> Result<()> {
        writeln!(
            out,
            "condition,ring,arclength_m,samples,trans_mae_cm,trans_rmse_cm,trans_std_cm,rot_mae_deg,rot_rmse_deg,rot_std_deg"
        )?;
        for r in self.rings.iter().chain(std::iter::once(&self.pooled)) {
            let ring = r.ring.map_or_else(|| "pooled".to_string(), |k| k.to_string());
            let arc = r.arclength.map_or_else(String::new, |s| format!("{s:.4}"));
            let (t, q) = (&r.translation, &r.rotation);
            writeln!(
                out,
                "{condition},{ring},{arc},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                t.samples,
                t.mae * 100.0,
                t.rmse * 100.0,
                t.std * 100.0,
                q.mae.to_degrees(),
                q.rmse.to_degrees(),
                q.std.to_degrees(),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmap::MapPoint;
    use crate::geom::{exp_se3, rot_z, Twist};
    use crate::state::straight_pose;
    use nalgebra::Matrix6;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid_with_covariance(sigma_b: Matrix6<f64>) -> StateGrid {
        let mut g = StateGrid::home(vec![0.0, 0.5], vec![0.0, 1.0], Transform::identity()).unwrap();
        let idx: Vec<_> = g.nodes().map(|(i, _)| i).collect();
        for i in idx {
            g.node_mut(i).covariance.fixed_view_mut::<6, 6>(0, 0).copy_from(&sigma_b);
        }
        g
    }

    fn measurement(d: f64) -> ToFMeasurement {
        ToFMeasurement {
            distance: d,
            ray_direction: Vector3::new(0.1, -0.2, 1.0).normalize(),
            sensor_extrinsic: Transform::new(rot_z(0.4), Vector3::new(0.0, 0.02, 0.0)),
            arclength: 0.4,
            timestamp: 0.3,
            sensor_id: 3,
        }
    }

    #[test]
    fn zero_pose_covariance_gives_sensor_noise() {
        let noise = NoiseModel::default();
        let p = project_point(&grid_with_covariance(Matrix6::zeros()), &measurement(0.8), &noise).unwrap();
        assert_eq!(p.covariance, Matrix3::identity() * noise.tof_variance(0.8).unwrap());
    }

    #[test]
    fn rotation_about_z_is_invisible_along_z() {
        let mut sigma_b = Matrix6::zeros();
        sigma_b[(5, 5)] = 0.01;
        let r = Matrix3::zeros();
        let c = project_covariance(&Transform::identity(), &Vector3::new(0.0, 0.0, 1.0), &sigma_b, &r);
        assert!(c.amax() < 1e-15);
        let c = project_covariance(&Transform::identity(), &Vector3::new(1.0, 0.0, 0.0), &sigma_b, &r);
        assert!((c[(1, 1)] - 0.01).abs() < 1e-15 && c[(2, 2)] == 0.0 && c[(0, 0)] == 0.0);
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = NoiseModel::default();
        // random SPD pose covariance with rotation sigma ≈ 0.03 rad, translation ≈ 5 mm
        let a = Matrix6::<f64>::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let scale = Matrix6::from_diagonal(&nalgebra::Vector6::new(0.005, 0.005, 0.005, 0.03, 0.03, 0.03));
        let sigma_b = scale * (a * a.transpose() / 6.0 + Matrix6::identity() * 0.2) * scale;
        let grid = grid_with_covariance(sigma_b);
        let m = measurement(0.8);
        let projected = project_point(&grid, &m, &noise).unwrap();
        let pose = grid.interpolate_pose(m.arclength, m.timestamp).unwrap();
        let chol = sigma_b.cholesky().unwrap().l();
        let sigma_r = noise.tof_variance(0.8).unwrap().sqrt();
        let n = 100_000;
        let samples: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                let z = nalgebra::Vector6::<f64>::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let delta: Twist = chol * z;
                let perturbed = pose * exp_se3(&-delta);
                let e = Vector3::<f64>::from_fn(|_, _| sigma_r * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
                perturbed.transform_point(&m.body_point()) + e
            })
            .collect();
        let mean = samples.iter().sum::<Vector3<f64>>() / n as f64;
        let cov = samples.iter().map(|s| (s - mean) * (s - mean).transpose()).sum::<Matrix3<f64>>() / (n - 1) as f64;
        let rel = (cov - projected.covariance).norm() / projected.covariance.norm();
        assert!(rel < 0.1, "relative Frobenius error {rel}");
    }

    fn map_point(p: Vector3<f64>, var: f64) -> MapPoint {
        MapPoint { position: p, normal: Vector3::z(), planarity: 1.0, prior_covariance: Matrix3::identity() * var, degenerate: false }
    }

    fn cloud_point(p: Vector3<f64>, var: f64, truth: Option<bool>) -> ReconPoint {
        ReconPoint { position: p, covariance: Matrix3::identity() * var, sensor_id: 0, timestamp: 0.0, ray: 0, truth_anomaly: truth }
    }

    #[test]
    fn mahalanobis_examples() {
        let map = EnvironmentMap::from_points(vec![map_point(Vector3::zeros(), 0.01)], 0.05).unwrap();
        let cloud = ReconstructedCloud {
            points: vec![cloud_point(Vector3::zeros(), 0.01, None), cloud_point(Vector3::new(0.1, 0.0, 0.0), 0.01, None)],
        };
        let report = detect_anomalies(&cloud, &map, 0.4).unwrap();
        assert_eq!(report.scores[0], Some(0.0));
        assert!((report.scores[1].unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(report.flagged.len(), 1);
        assert!(detect_anomalies(&cloud, &map, f64::INFINITY).unwrap().flagged.is_empty());
        assert!(report.metrics.is_none());
    }

    #[test]
    fn singular_sum_is_regularized() {
        let (s, reg) = mahalanobis_score(&Vector3::new(1e-7, 0.0, 0.0), &Matrix3::zeros(), &Matrix3::zeros());
        assert!(reg);
        assert!((s - 1e-14 / 1e-12).abs() < 1e-9);
    }

    #[test]
    fn precision_recall_counts() {
        let map = EnvironmentMap::from_points(vec![map_point(Vector3::zeros(), 1e-6)], 0.05).unwrap();
        let pts = vec![
            cloud_point(Vector3::new(0.2, 0.0, 0.0), 1e-4, Some(true)),
            cloud_point(Vector3::new(0.0, 0.001, 0.0), 1e-4, Some(false)),
            cloud_point(Vector3::new(0.0, 0.3, 0.0), 1e-4, Some(false)),
            cloud_point(Vector3::new(0.0, 0.0, 0.001), 1e-4, Some(true)),
        ];
        let report = detect_anomalies(&ReconstructedCloud { points: pts }, &map, 9.0).unwrap();
        let m = report.metrics.unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives, m.true_negatives), (1, 1, 1, 1));
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(0.5));
    }

    #[test]
    fn table_round_trip() {
        let noise = NoiseModel::default();
        let mut sigma_b = Matrix6::identity() * 1e-4;
        sigma_b[(0, 4)] = 2e-5;
        sigma_b[(4, 0)] = 2e-5;
        let grid = grid_with_covariance(sigma_b);
        let mut p = project_point(&grid, &measurement(1.3), &noise).unwrap();
        p.truth_anomaly = Some(true);
        let cloud = ReconstructedCloud { points: vec![p] };
        let back = ReconstructedCloud::from_table(&cloud.to_table()).unwrap();
        assert_eq!(back, cloud);
    }

    fn truth_from(grid: &StateGrid, offset: Vector3<f64>) -> Vec<RingPose> {
        let mut out = Vec::new();
        for k in 0..=10 {
            let t = k as f64 * 0.1;
            for (ring, s) in [(0usize, 0.2), (1, 0.5)] {
                let mut pose = grid.interpolate_pose(s, t).unwrap();
                if ring == 1 {
                    pose.translation += offset;
                }
                out.push(RingPose { timestamp: t, ring, arclength: s, pose });
            }
        }
        out
    }

    #[test]
    fn metrics_examples() {
        let grid = grid_with_covariance(Matrix6::zeros());
        let exact = evaluate_localization(&grid, &truth_from(&grid, Vector3::zeros())).unwrap();
        assert!(exact.pooled.translation.mae < 1e-15 && exact.pooled.rotation.rmse < 1e-7);
        let shifted = evaluate_localization(&grid, &truth_from(&grid, Vector3::new(0.01, 0.0, 0.0))).unwrap();
        let ring1 = &shifted.rings[1].translation;
        assert!((ring1.mae - 0.01).abs() < 1e-12 && (ring1.rmse - 0.01).abs() < 1e-12);
        assert!(shifted.rings[0].translation.mae < 1e-15);

        let rotated: Vec<RingPose> = truth_from(&grid, Vector3::zeros())
            .into_iter()
            .map(|mut r| {
                r.pose.rotation *= rot_z(0.1);
                r
            })
            .collect();
        let m = evaluate_localization(&grid, &rotated).unwrap();
        assert!((m.pooled.rotation.mae - 0.1).abs() < 1e-9);
        assert!((m.pooled.rotation.mae.to_degrees() - 5.7296).abs() < 1e-3);

        let late = vec![RingPose { timestamp: 5.0, ring: 0, arclength: 0.1, pose: straight_pose(&Transform::identity(), 0.1) }];
        assert!(matches!(evaluate_localization(&grid, &late), Err(Error::NoOverlap)));

        let mut csv = Vec::new();
        shifted.write_csv(&mut csv, "S0").unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("S0,pooled,"));
    }

    #[test]
    fn empty_scan_list_gives_empty_cloud() {
        let grid = grid_with_covariance(Matrix6::zeros());
        let cloud = reconstruct_scene(&grid, &[], &NoiseModel::default(), None).unwrap();
        assert!(cloud.is_empty());
    }
}
