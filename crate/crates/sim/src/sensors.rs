//! Sensor suites, per-sensor measurement models and full rollouts.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crloc_core::factors::{ray_grid, tof_sigma, GyroMeasurement, StrainMeasurement, ToFScan, TOF_MIN_RANGE};
use crloc_core::geom::Transform;
use crloc_core::recon::RingPose;
use crloc_core::records::SensorLog;
use crloc_core::solver::MeasurementSet;

use crate::robot::{upright, BendTrajectory, JointProfile, SimRobot};
use crate::scene::{RayCaster, SimScene};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    /// Zones per side of the square ToF grid.
    pub tof_resolution: usize,
    pub tof_fov_deg: f64,
    pub tof_max_range: f64,
    pub tof_rate: f64,
    pub gyro_sigma: f64,
    pub gyro_rate: f64,
    /// Constant per-gyro bias drawn once per rollout, rad/s.
    pub gyro_bias_sigma: f64,
    /// Step of the central pose difference behind the gyro model, seconds.
    pub gyro_difference_step: f64,
    pub strain_sigma_curvature: f64,
    pub strain_sigma_angle: f64,
    pub strain_rate: f64,
    pub strain_spacing: f64,
    /// Add measurement noise. Off yields exact geometry.
    pub noise: bool,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            tof_resolution: 8,
            tof_fov_deg: 45.0,
            tof_max_range: 4.0,
            tof_rate: 15.0,
            gyro_sigma: 0.01,
            gyro_rate: 100.0,
            gyro_bias_sigma: 0.005,
            gyro_difference_step: 1e-3,
            strain_sigma_curvature: 0.01,
            strain_sigma_angle: 0.015,
            strain_rate: 20.0,
            strain_spacing: 0.03,
            noise: true,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| Err(SimError::Config(what.to_string()));
        if self.tof_resolution == 0 {
            return bad("tof_resolution must be at least 1");
        }
        if !(self.tof_fov_deg > 0.0 && self.tof_fov_deg < 180.0) {
            return bad("tof_fov_deg must lie in (0, 180)");
        }
        for (name, v) in [
            ("tof_rate", self.tof_rate),
            ("gyro_rate", self.gyro_rate),
            ("strain_rate", self.strain_rate),
            ("tof_max_range", self.tof_max_range),
            ("gyro_difference_step", self.gyro_difference_step),
            ("strain_spacing", self.strain_spacing),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("gyro_sigma", self.gyro_sigma),
            ("gyro_bias_sigma", self.gyro_bias_sigma),
            ("strain_sigma_curvature", self.strain_sigma_curvature),
            ("strain_sigma_angle", self.strain_sigma_angle),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimError::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn ray_directions(&self) -> Vec<Vector3<f64>> {
        ray_grid(self.tof_resolution, self.tof_fov_deg.to_radians())
    }
}

/// Robot geometry, sensor placement and prescribed motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotSpec {
    pub link_length: f64,
    pub link_count: usize,
    pub base_position: [f64; 3],
    /// Row-major base orientation.
    pub base_rotation: [f64; 9],
    pub base_spin_rate: f64,
    /// Arclengths of the sensor rings, meters.
    pub rings: Vec<f64>,
    /// Axial rotation between consecutive rings, degrees.
    pub ring_offset_deg: f64,
    pub sensors_per_ring: usize,
    /// Radial distance of the ToF sensors from the backbone, meters.
    pub mount_radius: f64,
    /// Forward-looking ToF sensor at the tip.
    pub tip_sensor: bool,
    pub trajectory: BendTrajectory,
}

impl Default for RobotSpec {
    fn default() -> Self {
        let r = upright();
        Self {
            link_length: 0.01,
            link_count: 50,
            base_position: [0.0, 0.0, 0.15],
            base_rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            base_spin_rate: 0.0,
            rings: vec![0.2, 0.35, 0.5],
            ring_offset_deg: 60.0,
            sensors_per_ring: 3,
            mount_radius: 0.02,
            tip_sensor: true,
            trajectory: BendTrajectory::default(),
        }
    }
}

/// A ToF sensor fixed to the body frame at `arclength`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToFMount {
    pub sensor_id: u32,
    pub ring: usize,
    pub arclength: f64,
    /// Sensor frame to body frame; the sensor looks along its +z.
    pub extrinsic: Transform,
}

/// Ids: ToF `10 r + i` (tip sensor `10 r_last + 9`), gyro `100 + r`,
/// strain stations `200 + k`.
pub const GYRO_ID_BASE: u32 = 100;
pub const STRAIN_ID_BASE: u32 = 200;

impl RobotSpec {
    pub fn length(&self) -> f64 {
        self.link_length * self.link_count as f64
    }

    pub fn base_pose(&self) -> Transform {
        Transform::from_row_major(&self.base_rotation, &self.base_position).renormalized()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.link_length > 0.0) || self.link_count == 0 {
            return Err(SimError::Config("robot needs positive link length and at least one link".into()));
        }
        let len = self.length();
        if let Some(s) = self.rings.iter().find(|s| !(**s >= 0.0 && **s <= len + 1e-12)) {
            return Err(SimError::Config(format!("ring at {s} m outside [0, {len}]")));
        }
        let r = Matrix3::from_row_slice(&self.base_rotation);
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 || r.determinant() < 0.0 {
            return Err(SimError::Config("base_rotation is not a rotation matrix".into()));
        }
        Ok(())
    }

    pub fn robot(&self) -> Result<SimRobot, SimError> {
        self.validate()?;
        let mut robot = SimRobot::new(self.link_length, self.link_count, self.base_pose(), JointProfile::Bend(self.trajectory.clone()))?;
        robot.base_spin_rate = self.base_spin_rate;
        Ok(robot)
    }

    pub fn tof_mounts(&self) -> Vec<ToFMount> {
        let mut out = Vec::new();
        for (r, &s) in self.rings.iter().enumerate() {
            for i in 0..self.sensors_per_ring {
                let phi = (r as f64 * self.ring_offset_deg).to_radians()
                    + i as f64 * std::f64::consts::TAU / self.sensors_per_ring as f64;
                let radial = Vector3::new(0.0, phi.cos(), phi.sin());
                let x = Vector3::x();
                let rotation = Matrix3::from_columns(&[x, radial.cross(&x), radial]);
                out.push(ToFMount {
                    sensor_id: 10 * r as u32 + i as u32,
                    ring: r,
                    arclength: s,
                    extrinsic: Transform::new(rotation, radial * self.mount_radius),
                });
            }
        }
        if self.tip_sensor {
            let r = self.rings.len().saturating_sub(1);
            out.push(ToFMount {
                sensor_id: 10 * r as u32 + 9,
                ring: r,
                arclength: self.length(),
                extrinsic: Transform::from_rotation(Matrix3::from_columns(&[Vector3::y(), Vector3::z(), Vector3::x()])),
            });
        }
        out
    }

    /// Strain stations at multiples of `spacing` strictly inside the robot.
    pub fn strain_stations(&self, spacing: f64) -> Vec<(u32, f64)> {
        let len = self.length();
        (1..).map(|k| k as f64 * spacing).take_while(|s| *s < len - 1e-9).enumerate().map(|(k, s)| (STRAIN_ID_BASE + k as u32, s)).collect()
    }
}

/// `0, 1/rate, …` up to `duration` inclusive.
pub fn sample_times(rate: f64, duration: f64) -> Vec<f64> {
    let n = (duration * rate + 1e-9).floor().max(0.0) as usize;
    (0..=n).map(|i| i as f64 / rate).collect()
}

fn gaussian(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

/// Noise-free nearest hits `(distance, mesh index)` of every ray.
pub fn trace_rays(caster: &RayCaster, sensor_pose: &Transform, dirs: &[Vector3<f64>], max_range: f64) -> Vec<Option<(f64, usize)>> {
    let origin = sensor_pose.translation;
    dirs.iter()
        .map(|d| caster.cast(&origin, &(sensor_pose.rotation * d), max_range).map(|h| (h.distance, h.mesh)))
        .collect()
}

/// Turn true ranges into returns: Gaussian noise of `tof_sigma(d)` when
/// `rng` is given; anything under the minimum range becomes invalid.
pub fn tof_returns(hits: &[Option<(f64, usize)>], rng: Option<&mut ChaCha8Rng>) -> Vec<Option<f64>> {
    let mut rng = rng;
    hits.iter()
        .map(|h| {
            let (d, _) = (*h)?;
            if d < TOF_MIN_RANGE {
                return None;
            }
            let noisy = match rng.as_deref_mut() {
                Some(r) => d + gaussian(tof_sigma(d).expect("range checked"), r),
                None => d,
            };
            (noisy >= TOF_MIN_RANGE).then_some(noisy)
        })
        .collect()
}

/// One ToF frame from a sensor at `sensor_pose`.
pub fn raycast_tof(
    caster: &RayCaster,
    sensor_pose: &Transform,
    spec: &SensorSpec,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<Option<f64>> {
    tof_returns(&trace_rays(caster, sensor_pose, &spec.ray_directions(), spec.tof_max_range), rng)
}

/// Body angular velocity at `s` plus bias and noise.
pub fn sim_gyro(
    robot: &SimRobot,
    s: f64,
    t: f64,
    spec: &SensorSpec,
    bias: &Vector3<f64>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vector3<f64>, SimError> {
    let w = robot.angular_velocity(s, t, spec.gyro_difference_step)?;
    Ok(match rng {
        Some(r) => w + bias + Vector3::from_fn(|_, _| gaussian(spec.gyro_sigma, r)),
        None => w + bias,
    })
}

/// `(θ, κ)` at `s` with noise; a negative noisy curvature is folded back by
/// turning the bending plane half a revolution.
pub fn sim_strain(
    robot: &SimRobot,
    s: f64,
    t: f64,
    spec: &SensorSpec,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64), SimError> {
    let (theta, kappa) = robot.bending_at(s, t)?;
    let Some(r) = rng else { return Ok((theta, kappa)) };
    let mut kappa = kappa + gaussian(spec.strain_sigma_curvature, r);
    let mut theta = theta + gaussian(spec.strain_sigma_angle, r);
    if kappa < 0.0 {
        kappa = -kappa;
        theta += std::f64::consts::PI;
    }
    Ok((theta, kappa))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub log: SensorLog,
    pub truth: Vec<RingPose>,
    pub gyro_biases: Vec<(u32, Vector3<f64>)>,
}

/// Simulate every sensor over `[0, duration]`. The log is a pure function
/// of the inputs and `seed`.
pub fn simulate(scene: &SimScene, robot_spec: &RobotSpec, spec: &SensorSpec, duration: f64, seed: u64) -> Result<SimOutput, SimError> {
    spec.validate()?;
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(SimError::Config(format!("duration must be non-negative, got {duration}")));
    }
    let robot = robot_spec.robot()?;
    let caster = RayCaster::new(scene);
    let dirs = spec.ray_directions();
    let mounts = robot_spec.tof_mounts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_rng = |on: bool, rng: &mut ChaCha8Rng| -> Option<ChaCha8Rng> { on.then(|| ChaCha8Rng::from_rng(rng)) };

    let gyro_biases: Vec<(u32, Vector3<f64>)> = (0..robot_spec.rings.len())
        .map(|r| {
            let b = if spec.noise { Vector3::from_fn(|_, _| gaussian(spec.gyro_bias_sigma, &mut rng)) } else { Vector3::zeros() };
            (GYRO_ID_BASE + r as u32, b)
        })
        .collect();

    // ray casting in parallel; noise is drawn afterwards in a fixed order
    let tof_times = sample_times(spec.tof_rate, duration);
    let jobs: Vec<(f64, &ToFMount)> = tof_times.iter().flat_map(|&t| mounts.iter().map(move |m| (t, m))).collect();
    let traced: Vec<Vec<Option<(f64, usize)>>> = jobs
        .par_iter()
        .map(|(t, m)| {
            let pose = robot.pose_at(m.arclength, *t)? * m.extrinsic;
            Ok(trace_rays(&caster, &pose, &dirs, spec.tof_max_range))
        })
        .collect::<Result<_, SimError>>()?;
    let mut tof_rng = noise_rng(spec.noise, &mut rng);
    let mut measurements = MeasurementSet::default();
    let mut tof_hits = Vec::with_capacity(jobs.len());
    for ((t, m), hits) in jobs.iter().zip(&traced) {
        let ranges = tof_returns(hits, tof_rng.as_mut());
        tof_hits.push(Some(
            hits.iter().zip(&ranges).map(|(h, r)| r.and(h.map(|(_, mesh)| scene.meshes[mesh].label.clone()))).collect(),
        ));
        measurements.tof.push(ToFScan {
            sensor_id: m.sensor_id,
            timestamp: *t,
            arclength: m.arclength,
            extrinsic: m.extrinsic,
            directions: dirs.clone(),
            ranges,
        });
    }

    let gyro_times = sample_times(spec.gyro_rate, duration);
    let mut gyro_rng = noise_rng(spec.noise, &mut rng);
    for &t in &gyro_times {
        for (r, &s) in robot_spec.rings.iter().enumerate() {
            let (id, bias) = gyro_biases[r];
            let w = sim_gyro(&robot, s, t, spec, &bias, gyro_rng.as_mut())?;
            measurements.gyro.push(GyroMeasurement { angular_rate: w, arclength: s, timestamp: t, sensor_id: id });
        }
    }

    let strain_times = sample_times(spec.strain_rate, duration);
    let stations = robot_spec.strain_stations(spec.strain_spacing);
    let mut strain_rng = noise_rng(spec.noise, &mut rng);
    for &t in &strain_times {
        for &(id, s) in &stations {
            let (theta, kappa) = sim_strain(&robot, s, t, spec, strain_rng.as_mut())?;
            measurements.strain.push(StrainMeasurement { bending_angle: theta, curvature: kappa, arclength: s, timestamp: t, sensor_id: id });
        }
    }

    let mut all_times: Vec<f64> = tof_times.iter().chain(&gyro_times).chain(&strain_times).copied().collect();
    all_times.sort_by(f64::total_cmp);
    all_times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let mut truth = Vec::with_capacity(all_times.len() * robot_spec.rings.len());
    for &t in &all_times {
        for (ring, &s) in robot_spec.rings.iter().enumerate() {
            truth.push(RingPose { timestamp: t, ring, arclength: s, pose: robot.pose_at(s, t)? });
        }
    }
    Ok(SimOutput { log: SensorLog { measurements, tof_hits, skipped: 0 }, truth, gyro_biases })
}
