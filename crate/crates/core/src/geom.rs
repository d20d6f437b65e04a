//! SE(3) / se(3) machinery shared by every factor.
//!
//! Twists are ordered `(linear; angular)`. Poses are `T_ib` (body to
//! inertial) and perturbations are applied on the left, `T = exp(δ^) T̄`,
//! so `δ` is expressed in the inertial frame.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x6, Matrix6, UnitQuaternion, Vector3, Vector4, Vector6};

/// 6-vector `(linear; angular)`.
pub type Twist = Vector6<f64>;

/// Below this angle exp/log fall back to the Taylor series.
const EXP_SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the Jacobian coefficients use their series expansions.
const JAC_SMALL_ANGLE: f64 = 1e-2;

pub fn twist(linear: Vector3<f64>, angular: Vector3<f64>) -> Twist {
    Twist::new(linear.x, linear.y, linear.z, angular.x, angular.y, angular.z)
}

pub trait TwistParts {
    fn linear(&self) -> Vector3<f64>;
    fn angular(&self) -> Vector3<f64>;
}

impl TwistParts for Twist {
    fn linear(&self) -> Vector3<f64> {
        self.fixed_rows::<3>(0).into_owned()
    }
    fn angular(&self) -> Vector3<f64> {
        self.fixed_rows::<3>(3).into_owned()
    }
}

/// Rigid transform with an orthonormal rotation and a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self { rotation, translation: Vector3::zeros() }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_homogeneous(&self, p: &HomogeneousPoint) -> HomogeneousPoint {
        HomogeneousPoint { xyz: self.rotation * p.xyz + self.translation * p.w, w: p.w }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Re-orthonormalize the rotation (nearest rotation via quaternion).
    pub fn renormalized(&self) -> Self {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        Self { rotation: q.to_rotation_matrix().into_inner(), translation: self.translation }
    }

    /// `Ad(T) = [R, t^R; 0, R]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        adjoint(self)
    }

    pub fn exp(xi: &Twist) -> Self {
        exp_se3(xi)
    }

    pub fn log(&self) -> Twist {
        log_se3(self)
    }

    /// `T · exp(xi^)`.
    pub fn retract_right(&self, xi: &Twist) -> Self {
        *self * exp_se3(xi)
    }

    /// Largest deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn row_major_rotation(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }

    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Self {
        Self {
            rotation: Matrix3::from_row_slice(rotation),
            translation: Vector3::from_column_slice(translation),
        }
    }
}

impl Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        Transform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl<'a> Mul<&'a Transform> for &'a Transform {
    type Output = Transform;
    fn mul(self, rhs: &Transform) -> Transform {
        *self * *rhs
    }
}

/// A homogeneous point `[xyz; w]`; `w = 1` for points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint {
    pub xyz: Vector3<f64>,
    pub w: f64,
}

impl HomogeneousPoint {
    pub fn point(xyz: Vector3<f64>) -> Self {
        Self { xyz, w: 1.0 }
    }

    pub fn to_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.xyz.x, self.xyz.y, self.xyz.z, self.w)
    }

    /// `D·p`: drops the homogeneous component.
    pub fn project(&self) -> Vector3<f64> {
        self.xyz
    }
}

/// The constant 3×4 projection `D = [I₃ 0]`.
pub fn projection() -> Matrix3x4<f64> {
    Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

/// Skew-symmetric matrix with `wedge(a) * b = a × b`.
pub fn wedge(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// 4×4 matrix form of a twist.
pub fn twist_hat(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wedge(&xi.angular()));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.linear());
    m
}

/// `[a; b]^⊙ = [[b I, -a^], [0, 0]]`.
pub fn odot(p: &HomogeneousPoint) -> Matrix4x6<f64> {
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * p.w));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-wedge(&p.xyz)));
    m
}

/// `D p^⊙`, the 3×6 block used by the point factors.
pub fn odot3(p: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut m = nalgebra::Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-wedge(p)));
    m
}

pub fn adjoint(t: &Transform) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(wedge(&t.translation) * t.rotation));
    m
}

/// The se(3) adjoint `ad(ξ) = [φ^, ρ^; 0, φ^]`.
pub fn ad(xi: &Twist) -> Matrix6<f64> {
    let phi = wedge(&xi.angular());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&phi);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&phi);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&wedge(&xi.linear()));
    m
}

pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = wedge(phi);
    let (a, b) = if theta < EXP_SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of `r`; accurate through angles close to π.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*r));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < EXP_SMALL_ANGLE {
        // θ ≈ 2n, axis·θ ≈ 2v/w
        return v * (2.0 / w);
    }
    let theta = 2.0 * n.atan2(w);
    v * (theta / n)
}

fn so3_coefficients(theta: f64) -> (f64, f64) {
    // (1 - cos θ)/θ², (θ - sin θ)/θ³
    if theta < JAC_SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = wedge(phi);
    let (a, b) = so3_coefficients(theta);
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = wedge(phi);
    let c = if theta < JAC_SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// The coupling block `Q(ξ)` of the SE(3) left Jacobian.
fn se3_q(xi: &Twist) -> Matrix3<f64> {
    let rho = wedge(&xi.linear());
    let phi_v = xi.angular();
    let phi = wedge(&phi_v);
    let theta = phi_v.norm();
    let t2 = theta * theta;
    let (a, b, c) = if theta < JAC_SMALL_ANGLE {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, co) = (theta.sin(), theta.cos());
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * co - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * co) / (2.0 * t2 * t2 * theta),
        )
    };
    let pr = phi * rho;
    let rp = rho * phi;
    let prp = pr * phi;
    rho * 0.5 + (pr + rp + prp) * a + (phi * pr + rp * phi - prp * 3.0) * b + (prp * phi + phi * prp) * c
}

/// Left Jacobian of SE(3): `exp(ξ + δ) ≈ exp(𝒥(ξ)δ) exp(ξ)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.angular());
    let q = se3_q(xi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&xi.angular());
    let q = se3_q(xi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    m
}

pub fn exp_se3(xi: &Twist) -> Transform {
    let phi = xi.angular();
    let r = exp_so3(&phi);
    let v = so3_left_jacobian(&phi);
    Transform { rotation: r, translation: v * xi.linear() }
}

pub fn log_se3(t: &Transform) -> Twist {
    let phi = log_so3(&t.rotation);
    let rho = so3_left_jacobian_inv(&phi) * t.translation;
    twist(rho, phi)
}

/// Rotation about x by `theta`.
pub fn rot_x(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic angle between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    log_so3(&(a.transpose() * b)).norm()
}

/// Geodesic interpolation `exp(u·log(B A⁻¹)) A` and its left-perturbation
/// Jacobians with respect to `A` and `B`.
pub fn geodesic_interpolate(a: &Transform, b: &Transform, u: f64) -> (Transform, Matrix6<f64>, Matrix6<f64>) {
    if u == 0.0 {
        return (*a, Matrix6::identity(), Matrix6::zeros());
    }
    if u == 1.0 {
        return (*b, Matrix6::zeros(), Matrix6::identity());
    }
    let xi = log_se3(&(*b * a.inverse()));
    let step = exp_se3(&(xi * u));
    let ju = se3_left_jacobian(&(xi * u)) * u;
    let jb = ju * se3_left_jacobian_inv(&xi);
    let ja = adjoint(&step) - ju * se3_left_jacobian_inv(&(-xi));
    (step * *a, ja, jb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rand_twist(seed: u64, scale: f64) -> Twist {
        // small deterministic LCG keeps this module free of rand
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        Twist::from_fn(|_, _| next() * scale)
    }

    /// `Σ adⁿ/(n+1)!`, independent of the closed form.
    fn series_left_jacobian(xi: &Twist) -> Matrix6<f64> {
        let a = ad(xi);
        let mut term = Matrix6::identity();
        let mut sum = Matrix6::identity();
        for n in 1..40 {
            term = term * a / (n as f64 + 1.0);
            sum += term;
        }
        sum
    }

    fn matrix_exp(m: &Matrix4<f64>) -> Matrix4<f64> {
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for n in 1..40 {
            term = term * m / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_se3(&Twist::zeros()), Transform::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let t = exp_se3(&Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(t.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.rotation, Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let t = exp_se3(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2));
        let axis_angle = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        assert!((t.rotation - axis_angle.matrix()).amax() < 1e-15);
        assert!(t.translation.norm() < 1e-15);
    }

    #[test]
    fn exp_matches_matrix_exponential() {
        for seed in 0..20 {
            let xi = rand_twist(seed, 1.5);
            let t = exp_se3(&xi);
            let m = matrix_exp(&twist_hat(&xi));
            assert!((t.to_matrix() - m).amax() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn exp_log_round_trip() {
        for seed in 0..200 {
            let mut xi = rand_twist(seed, 2.0);
            let ang = xi.angular();
            if ang.norm() > PI - 0.1 {
                let scaled = ang * ((PI - 0.2) / ang.norm());
                xi.fixed_rows_mut::<3>(3).copy_from(&scaled);
            }
            let back = log_se3(&exp_se3(&xi));
            assert!((back - xi).amax() < 1e-8, "seed {seed}: {}", (back - xi).amax());
        }
        let near_pi = Twist::new(0.1, 0.2, 0.3, 0.0, PI - 1e-6, 0.0);
        assert!((log_se3(&exp_se3(&near_pi)) - near_pi).amax() < 1e-8);
        let tiny = Twist::new(1e-3, 0.0, 0.0, 1e-10, -2e-10, 0.0);
        assert!((log_se3(&exp_se3(&tiny)) - tiny).amax() < 1e-15);
    }

    #[test]
    fn composition_and_inverse() {
        let a = exp_se3(&rand_twist(1, 1.0));
        let b = exp_se3(&rand_twist(2, 1.0));
        let c = exp_se3(&rand_twist(3, 1.0));
        let lhs = (a * b) * c;
        let rhs = a * (b * c);
        assert!((lhs.to_matrix() - rhs.to_matrix()).amax() < 1e-12);
        let id = a.inverse() * a;
        assert!((id.to_matrix() - Matrix4::identity()).amax() < 1e-12);
        assert!(a.orthonormality_error() < 1e-12);
    }

    #[test]
    fn adjoint_cases() {
        assert_eq!(adjoint(&Transform::identity()), Matrix6::identity());
        let r = exp_so3(&Vector3::new(0.3, -0.2, 0.5));
        let adj = adjoint(&Transform::from_rotation(r));
        assert_eq!(adj.fixed_view::<3, 3>(0, 0), r);
        assert_eq!(adj.fixed_view::<3, 3>(3, 3), r);
        assert_eq!(adj.fixed_view::<3, 3>(0, 3), Matrix3::zeros());
        let t = Transform::from_translation(Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(adjoint(&t).fixed_view::<3, 3>(0, 3), wedge(&Vector3::z()));
    }

    #[test]
    fn adjoint_is_homomorphism() {
        for seed in 0..20 {
            let a = exp_se3(&rand_twist(seed, 1.0));
            let b = exp_se3(&rand_twist(seed + 100, 1.0));
            assert!((adjoint(&(a * b)) - adjoint(&a) * adjoint(&b)).amax() < 1e-9);
        }
    }

    #[test]
    fn adjoint_moves_twists() {
        // T exp(ξ^) T⁻¹ = exp((Ad(T) ξ)^)
        let t = exp_se3(&rand_twist(7, 1.0));
        let xi = rand_twist(8, 0.7);
        let lhs = t * exp_se3(&xi) * t.inverse();
        let rhs = exp_se3(&(adjoint(&t) * xi));
        assert!((lhs.to_matrix() - rhs.to_matrix()).amax() < 1e-12);
    }

    #[test]
    fn wedge_cases() {
        assert_eq!(wedge(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(wedge(&Vector3::z()) * Vector3::x(), Vector3::y());
        let a = Vector3::new(0.3, -1.2, 2.0);
        assert_eq!(wedge(&a).transpose(), -wedge(&a));
        let b = Vector3::new(-0.5, 0.1, 0.7);
        assert!((wedge(&a) * b - a.cross(&b)).amax() < 1e-15);
        assert_eq!(vee(&wedge(&a)), a);
    }

    #[test]
    fn odot_cases() {
        let m = odot(&HomogeneousPoint::point(Vector3::zeros()));
        let mut expected = Matrix4x6::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert_eq!(m, expected);
        let m = odot(&HomogeneousPoint::point(Vector3::x()));
        assert_eq!(m.fixed_view::<3, 3>(0, 3), -wedge(&Vector3::x()));
        assert_eq!(m.row(3).amax(), 0.0);
    }

    #[test]
    fn odot_wedge_duality_and_first_order() {
        for seed in 0..20 {
            let xi = rand_twist(seed, 1.0);
            let p = HomogeneousPoint { xyz: rand_twist(seed + 50, 2.0).linear(), w: 0.7 };
            let lhs = twist_hat(&xi) * p.to_vector4();
            let rhs = odot(&p) * xi;
            assert!((lhs - rhs).amax() < 1e-14);

            let delta = rand_twist(seed + 99, 1e-4);
            let moved = exp_se3(&delta).transform_homogeneous(&p).to_vector4();
            let linear = p.to_vector4() + odot(&p) * delta;
            assert!((moved - linear).amax() < 1e-7);
        }
    }

    #[test]
    fn projection_drops_w() {
        let p = HomogeneousPoint::point(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(projection() * p.to_vector4(), p.xyz);
        assert_eq!(p.project(), p.xyz);
    }

    #[test]
    fn left_jacobian_matches_series() {
        for seed in 0..50 {
            let scale = if seed % 3 == 0 { 1e-3 } else { 1.2 };
            let xi = rand_twist(seed, scale);
            let closed = se3_left_jacobian(&xi);
            let series = series_left_jacobian(&xi);
            assert!((closed - series).amax() < 1e-12, "seed {seed}");
            let inv = se3_left_jacobian_inv(&xi);
            assert!((inv * closed - Matrix6::identity()).amax() < 1e-11);
        }
    }

    #[test]
    fn left_jacobian_first_order_property() {
        let xi = rand_twist(11, 1.0);
        let d = rand_twist(12, 1e-6);
        let lhs = exp_se3(&(xi + d));
        let rhs = exp_se3(&(se3_left_jacobian(&xi) * d)) * exp_se3(&xi);
        assert!((lhs.to_matrix() - rhs.to_matrix()).amax() < 1e-11);
    }

    #[test]
    fn geodesic_endpoints_exact_and_jacobians() {
        let a = exp_se3(&rand_twist(21, 0.8));
        let b = exp_se3(&rand_twist(22, 0.8));
        assert_eq!(geodesic_interpolate(&a, &b, 0.0).0, a);
        assert_eq!(geodesic_interpolate(&a, &b, 1.0).0, b);
        let u = 0.37;
        let (_, ja, jb) = geodesic_interpolate(&a, &b, u);
        let h = 1e-6;
        for i in 0..6 {
            let mut e = Twist::zeros();
            e[i] = h;
            let fd = |pa: Transform, pb: Transform| geodesic_interpolate(&pa, &pb, u).0;
            let base = geodesic_interpolate(&a, &b, u).0;
            let plus = fd(exp_se3(&e) * a, b);
            let minus = fd(exp_se3(&-e) * a, b);
            let col = (log_se3(&(plus * base.inverse())) - log_se3(&(minus * base.inverse()))) / (2.0 * h);
            assert!((col - ja.column(i)).amax() < 1e-7);
            let plus = fd(a, exp_se3(&e) * b);
            let minus = fd(a, exp_se3(&-e) * b);
            let col = (log_se3(&(plus * base.inverse())) - log_se3(&(minus * base.inverse()))) / (2.0 * h);
            assert!((col - jb.column(i)).amax() < 1e-7);
        }
    }

    #[test]
    fn rotation_angle_is_symmetric() {
        let a = exp_so3(&Vector3::new(0.1, 0.4, -0.3));
        let b = exp_so3(&Vector3::new(-0.2, 0.1, 0.9));
        assert!((rotation_angle_between(&a, &b) - rotation_angle_between(&b, &a)).abs() < 1e-14);
        assert!((rotation_angle_between(&Matrix3::identity(), &rot_z(0.1)) - 0.1).abs() < 1e-14);
    }
}
