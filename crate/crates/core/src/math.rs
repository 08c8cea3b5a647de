//! Small vector and quaternion primitives.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)` everywhere, including
//! the state vector and all on-disk formats.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Quaternion {
        let n = self.norm();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Conjugate; the inverse for unit quaternions.
    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        quat_mul(self, b)
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: Quaternion, b: Quaternion) -> Quaternion {
    Quaternion::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Rotation of angle `‖v‖` about `v / ‖v‖`.
pub fn quat_exp(v: Vec3) -> Quaternion {
    let angle = v.norm();
    if angle < 1e-12 {
        return Quaternion::new(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
    }
    let s = (0.5 * angle).sin() / angle;
    Quaternion::new((0.5 * angle).cos(), v.x * s, v.y * s, v.z * s)
}

/// Rotation vector of a unit quaternion, angle in `[0, π]`.
///
/// The sign is canonicalized to `w ≥ 0` first, so `q` and `-q` map to the
/// same vector.
pub fn quat_log(q: Quaternion) -> Vec3 {
    let q = if q.w < 0.0 { q.neg() } else { q };
    let v = q.vector();
    let s = v.norm();
    if s < 1e-300 {
        return Vec3::ZERO;
    }
    // atan2 keeps full precision near both 0 and π
    let angle = 2.0 * s.atan2(q.w);
    if s < 1e-8 {
        // angle / s -> 2 / w as s -> 0
        return v * (2.0 / q.w);
    }
    v * (angle / s)
}

/// Rotate `v` by unit quaternion `q`: `q ⊗ (0, v) ⊗ q⁻¹`.
pub fn rotate(q: Quaternion, v: Vec3) -> Vec3 {
    let u = q.vector();
    let t = 2.0 * u.cross(v);
    v + q.w * t + u.cross(t)
}

/// Relative angle between two unit quaternions in degrees, in `[0, 180]`.
///
/// Evaluates `2·acos(|⟨a, b⟩|)` through `atan2` on the relative rotation,
/// which stays accurate when the two orientations nearly coincide.
pub fn quat_angle(a: Quaternion, b: Quaternion) -> f64 {
    let d = a.conjugate() * b;
    (2.0 * d.vector().norm().atan2(d.w.abs())).to_degrees()
}

/// Uniform-on-the-cube axis, normalized; draws are rejected while the raw
/// vector is shorter than `1e-6`.
pub fn random_axis<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        (a.w - b.w).abs() < tol
            && (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && (a.z - b.z).abs() < tol
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 1e-3
            })
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized())
    }

    fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
        (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    #[test]
    fn mul_identity_and_i_squared() {
        let q = Quaternion::new(0.3, -0.1, 0.5, 0.2);
        assert_eq!(Quaternion::IDENTITY * q, q);
        let i = Quaternion::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(i * i, Quaternion::new(-1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn exp_examples() {
        assert_eq!(quat_exp(Vec3::ZERO), Quaternion::IDENTITY);
        let q = quat_exp(Vec3::new(PI, 0.0, 0.0));
        assert!(close(q, Quaternion::new(0.0, 1.0, 0.0, 0.0), 1e-15));
        let q = quat_exp(Vec3::new(0.0, 0.0, 0.2));
        assert!(close(q, Quaternion::new(0.1f64.cos(), 0.0, 0.0, 0.1f64.sin()), 1e-15));
    }

    #[test]
    fn log_examples() {
        assert_eq!(quat_log(Quaternion::IDENTITY), Vec3::ZERO);
        let v = quat_log(Quaternion::new(0.0, 1.0, 0.0, 0.0));
        assert!((v - Vec3::new(PI, 0.0, 0.0)).norm() < 1e-15);
        // double cover
        let q = quat_exp(Vec3::new(0.3, -0.2, 0.1));
        assert!((quat_log(q) - quat_log(q.neg())).norm() < 1e-15);
    }

    #[test]
    fn tiny_rotations_are_accurate() {
        let v = Vec3::new(1e-10, -2e-10, 3e-11);
        assert!((quat_log(quat_exp(v)) - v).norm() < 1e-22);
        let v = Vec3::new(3e-7, 1e-7, -2e-7);
        assert!((quat_log(quat_exp(v)) - v).norm() < 1e-20);
    }

    #[test]
    fn rotate_examples() {
        let v = Vec3::new(0.3, -2.0, 1.5);
        assert_eq!(rotate(Quaternion::IDENTITY, v), v);
        let q = quat_exp(Vec3::new(0.0, 0.0, PI / 2.0));
        let r = rotate(q, Vec3::X);
        assert!((r - Vec3::Y).norm() < 1e-15);
    }

    #[test]
    fn angle_examples() {
        let q = quat_exp(Vec3::new(0.4, 0.1, -0.7));
        assert_eq!(quat_angle(q, q), 0.0);
        assert!((quat_angle(Quaternion::IDENTITY, Quaternion::new(0.0, 1.0, 0.0, 0.0)) - 180.0).abs() < 1e-12);
        let a = quat_angle(Quaternion::IDENTITY, quat_exp(Vec3::new(0.2, 0.0, 0.0)));
        assert!((a - 11.459155902616464).abs() < 1e-9);
        assert!(quat_angle(q, q.neg()) < 1e-12);
    }

    proptest! {
        #[test]
        fn unit_product_stays_unit(a in unit_quat(), b in unit_quat()) {
            prop_assert!(((a * b).norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn product_is_associative(a in unit_quat(), b in unit_quat(), c in unit_quat()) {
            prop_assert!(close((a * b) * c, a * (b * c), 1e-12));
        }

        #[test]
        fn exp_log_roundtrip(v in vec3(1.8)) {
            prop_assume!(v.norm() < PI - 1e-6);
            prop_assert!((quat_log(quat_exp(v)) - v).norm() < 1e-9);
        }

        #[test]
        fn log_exp_roundtrip(q in unit_quat()) {
            let back = quat_exp(quat_log(q));
            let q = if q.w < 0.0 { q.neg() } else { q };
            prop_assert!(close(back, q, 1e-9));
            prop_assert!(quat_log(q).norm() <= PI + 1e-12);
        }

        #[test]
        fn rotation_preserves_norm(q in unit_quat(), v in vec3(10.0)) {
            prop_assert!((rotate(q, v).norm() - v.norm()).abs() < 1e-9);
        }

        #[test]
        fn rotate_matches_sandwich(q in unit_quat(), v in vec3(3.0)) {
            let p = Quaternion::new(0.0, v.x, v.y, v.z);
            let s = q * p * q.conjugate();
            prop_assert!((rotate(q, v) - s.vector()).norm() < 1e-12);
        }

        #[test]
        fn angle_symmetric(a in unit_quat(), b in unit_quat()) {
            let ab = quat_angle(a, b);
            prop_assert!((ab - quat_angle(b, a)).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
        }
    }
}
