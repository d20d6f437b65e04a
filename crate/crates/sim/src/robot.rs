//! Pseudo-rigid-body continuum robot with prescribed joint motion.
//!
//! Links of length `L` are chained by spherical joints; joint `j` sits at
//! `s = jL` between links `j-1` and `j`. Between two link midpoints the
//! backbone follows the constant-twist arc `M_{j-1} exp(u ξ_j)`, where
//! `ξ_j = log(Trans(L/2) R_j Trans(L/2))`, which is tangent to both links at
//! their midpoints. The half links at either end are straight.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crloc_core::geom::{exp_so3, log_se3, log_so3, rot_z, Transform, Twist, TwistParts};
use crloc_core::state::straight_strain;

use crate::SimError;

/// Smooth bending motion: body-frame curvature about y and z, each
/// `ramp(t) (a + b s/ℓ) sin(2π f t + φ)` with a smoothstep ramp-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BendTrajectory {
    /// Robot is held straight until this time, seconds.
    pub still_until: f64,
    /// Duration of the smoothstep ramp-in, seconds.
    pub ramp: f64,
    /// Curvature at the base, 1/m, for the y and z bending planes.
    pub base_curvature: [f64; 2],
    /// Curvature added linearly towards the tip, 1/m.
    pub tip_curvature: [f64; 2],
    /// Oscillation frequencies, Hz.
    pub frequency: [f64; 2],
    /// Phases, radians.
    pub phase: [f64; 2],
}

impl Default for BendTrajectory {
    fn default() -> Self {
        Self {
            still_until: 0.5,
            ramp: 1.5,
            base_curvature: [1.2, 1.0],
            tip_curvature: [0.8, 0.6],
            frequency: [0.11, 0.07],
            phase: [std::f64::consts::FRAC_PI_2, 0.0],
        }
    }
}

impl BendTrajectory {
    fn envelope(&self, t: f64) -> f64 {
        let x = ((t - self.still_until) / self.ramp).clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    }

    /// Body-frame curvature vector (torsion, κ_y, κ_z) at `s/ℓ = frac`.
    pub fn curvature(&self, frac: f64, t: f64) -> Vector3<f64> {
        let env = self.envelope(t);
        if env == 0.0 {
            return Vector3::zeros();
        }
        let tau = t - self.still_until;
        let c = |i: usize| {
            let amp = self.base_curvature[i] + self.tip_curvature[i] * frac;
            env * amp * (2.0 * std::f64::consts::PI * self.frequency[i] * tau + self.phase[i]).sin()
        };
        Vector3::new(0.0, c(0), c(1))
    }
}

/// Joint motion of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointProfile {
    Bend(BendTrajectory),
    /// Static rotation vectors for joints `1..link_count`; missing joints
    /// are straight.
    Fixed(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRobot {
    pub link_length: f64,
    pub link_count: usize,
    /// Pose of the base (s = 0) at rest.
    pub base_pose: Transform,
    /// Rotation of the base about inertial z, rad/s.
    pub base_spin_rate: f64,
    pub joints: JointProfile,
}

impl SimRobot {
    pub fn new(link_length: f64, link_count: usize, base_pose: Transform, joints: JointProfile) -> Result<Self, SimError> {
        if !(link_length > 0.0) || link_count == 0 {
            return Err(SimError::Config("robot needs a positive link length and at least one link".into()));
        }
        Ok(Self { link_length, link_count, base_pose, base_spin_rate: 0.0, joints })
    }

    pub fn length(&self) -> f64 {
        self.link_length * self.link_count as f64
    }

    pub fn base_at(&self, t: f64) -> Transform {
        if self.base_spin_rate == 0.0 {
            self.base_pose
        } else {
            Transform::from_rotation(rot_z(self.base_spin_rate * t)) * self.base_pose
        }
    }

    /// Rotation of joint `j` (1-based, between links `j-1` and `j`).
    pub fn joint_rotation(&self, j: usize, t: f64) -> Matrix3<f64> {
        match &self.joints {
            JointProfile::Bend(traj) => {
                let frac = (j as f64 * self.link_length) / self.length();
                exp_so3(&(traj.curvature(frac, t) * self.link_length))
            }
            JointProfile::Fixed(v) => v.get(j - 1).map_or(Matrix3::identity(), |r| exp_so3(&Vector3::from(*r))),
        }
    }

    fn half_link(&self) -> Transform {
        Transform::from_translation(Vector3::new(self.link_length / 2.0, 0.0, 0.0))
    }

    /// Twist of the arc from the midpoint of link `j-1` to that of link `j`.
    fn span_twist(&self, j: usize, t: f64) -> Twist {
        let h = self.half_link();
        log_se3(&(h * Transform::from_rotation(self.joint_rotation(j, t)) * h))
    }

    /// Midpoint poses of every link at time `t`.
    pub fn midpoints(&self, t: f64) -> Vec<Transform> {
        let h = self.half_link();
        let mut out = Vec::with_capacity(self.link_count);
        out.push(self.base_at(t) * h);
        for j in 1..self.link_count {
            let prev = out[j - 1];
            out.push(prev * h * Transform::from_rotation(self.joint_rotation(j, t)) * h);
        }
        out
    }

    fn check_s(&self, s: f64) -> Result<(), SimError> {
        if !(s >= 0.0 && s <= self.length() + 1e-12) {
            return Err(SimError::Config(format!("arclength {s} outside [0, {}]", self.length())));
        }
        Ok(())
    }

    /// Span containing `s`: `None` for the straight end halves, otherwise
    /// the joint index `j` and fraction `u` between midpoints `j-1` and `j`.
    fn span(&self, s: f64) -> Option<(usize, f64)> {
        let x = s / self.link_length - 0.5;
        if x <= 0.0 || x >= (self.link_count - 1) as f64 {
            return None;
        }
        let j = (x.floor() as usize + 1).min(self.link_count - 1);
        Some((j, x - (j - 1) as f64))
    }

    /// Backbone pose `T_ib(s, t)`.
    pub fn pose_at(&self, s: f64, t: f64) -> Result<Transform, SimError> {
        self.check_s(s)?;
        let mids = self.midpoints(t);
        let half = self.link_length / 2.0;
        let along = |from: &Transform, d: f64| *from * Transform::from_translation(Vector3::new(d, 0.0, 0.0));
        Ok(match self.span(s) {
            Some((j, u)) => mids[j - 1] * Transform::exp(&(self.span_twist(j, t) * u)),
            None if s <= half => along(&self.base_at(t), s),
            None => along(&mids[self.link_count - 1], s - (self.length() - half)),
        })
    }

    /// Generalized strain `ε(s, t)` of the piecewise arc model.
    pub fn strain_at(&self, s: f64, t: f64) -> Result<Twist, SimError> {
        self.check_s(s)?;
        Ok(match self.span(s) {
            Some((j, _)) => self.span_twist(j, t) / self.link_length,
            None => straight_strain(),
        })
    }

    /// Body angular velocity at `s` by central differencing over `dt`.
    pub fn angular_velocity(&self, s: f64, t: f64, dt: f64) -> Result<Vector3<f64>, SimError> {
        let a = self.pose_at(s, t - dt / 2.0)?;
        let b = self.pose_at(s, t + dt / 2.0)?;
        Ok(log_so3(&(a.rotation.transpose() * b.rotation)) / dt)
    }

    /// Bending angle and curvature at `s`: the inverse of
    /// `Ad(rot_x θ)[1, 0, 0, 0, 0, κ]`.
    pub fn bending_at(&self, s: f64, t: f64) -> Result<(f64, f64), SimError> {
        let w = self.strain_at(s, t)?.angular();
        let kappa = w.y.hypot(w.z);
        let theta = if kappa == 0.0 { 0.0 } else { (-w.y).atan2(w.z) };
        Ok((theta, kappa))
    }
}

/// Rotation taking body x to inertial z, body y to inertial x.
pub fn upright() -> Matrix3<f64> {
    Matrix3::from_columns(&[Vector3::z(), Vector3::x(), Vector3::y()])
}
