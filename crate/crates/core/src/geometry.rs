//! Rigid transforms, unit quaternions and rotation distances.
//!
//! Everything here is a small value type. Quaternions are kept in the
//! `w >= 0` hemisphere so that equal rotations serialize identically.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-6;

/// A unit quaternion with canonical sign (`w >= 0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct UnitQuat(UnitQuaternion<f64>);

impl UnitQuat {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Normalizes `(w, x, y, z)` and flips it into the `w >= 0` hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::Domain(format!(
                "cannot normalize quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        Ok(Self::from_unit(UnitQuaternion::new_unchecked(q / n)))
    }

    pub fn from_unit(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Self(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Self(q)
        }
    }

    /// Rotation by the axis-angle vector `v` (direction = axis, norm = angle).
    pub fn from_scaled_axis(v: Vec3) -> Self {
        Self::from_unit(UnitQuaternion::from_scaled_axis(v))
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Self::from_scaled_axis(axis.normalize() * angle)
    }

    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        check_rotation(m)?;
        Ok(Self::from_unit(UnitQuaternion::from_rotation_matrix(
            &Rotation3::from_matrix_unchecked(*m),
        )))
    }

    pub fn inner(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn to_array(self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn w(&self) -> f64 {
        self.0.w
    }

    pub fn to_matrix(&self) -> Mat3 {
        *self.0.to_rotation_matrix().matrix()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit(self.0.inverse())
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &UnitQuat) -> Self {
        Self::from_unit(self.0 * other.0)
    }

    pub fn scaled_axis(&self) -> Vec3 {
        self.0.scaled_axis()
    }

    pub fn dot(&self, other: &UnitQuat) -> f64 {
        self.0.coords.dot(&other.0.coords)
    }

    /// Rotation equality, treating `q` and `-q` as the same rotation.
    pub fn same_rotation(&self, other: &UnitQuat, tol: f64) -> bool {
        1.0 - self.dot(other).abs() <= tol
    }
}

impl From<UnitQuat> for [f64; 4] {
    fn from(q: UnitQuat) -> Self {
        q.to_array()
    }
}

/// Stored quaternions that are already canonical are taken verbatim so that
/// serialization round-trips bitwise.
impl TryFrom<[f64; 4]> for UnitQuat {
    type Error = Error;
    fn try_from(a: [f64; 4]) -> Result<Self> {
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        if a[0] >= 0.0 && (q.norm() - 1.0).abs() < 1e-12 {
            return Ok(Self(UnitQuaternion::new_unchecked(q)));
        }
        UnitQuat::new(a[0], a[1], a[2], a[3])
    }
}

/// Translation plus rotation, acting as `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub translation: Vec3,
    pub rotation: UnitQuat,
}

impl RigidTransform {
    pub fn new(translation: Vec3, rotation: UnitQuat) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), UnitQuat::identity())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(t, UnitQuat::identity())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation.rotate(&other.translation) + self.translation,
            self.rotation.compose(&other.rotation),
        )
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(-r_inv.rotate(&self.translation), r_inv)
    }

    pub fn to_frame(&self) -> Frame3 {
        Frame3 {
            origin: self.translation,
            axes: self.rotation.to_matrix(),
        }
    }
}

/// An orthonormal right-handed frame. Columns of `axes` are the x, y, z axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame3 {
    pub origin: Vec3,
    pub axes: Mat3,
}

impl Frame3 {
    pub fn identity() -> Self {
        Self {
            origin: Vec3::zeros(),
            axes: Mat3::identity(),
        }
    }

    pub fn x_axis(&self) -> Vec3 {
        self.axes.column(0).into()
    }

    pub fn y_axis(&self) -> Vec3 {
        self.axes.column(1).into()
    }

    pub fn z_axis(&self) -> Vec3 {
        self.axes.column(2).into()
    }

    /// Local coordinates to world.
    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.axes * local + self.origin
    }

    /// World coordinates to local (`O⁻¹ · p`).
    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.axes.transpose() * (world - self.origin)
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        Ok(RigidTransform::new(
            self.origin,
            UnitQuat::from_matrix(&self.axes)?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.axes)
    }
}

/// Fails unless `m` is orthonormal with determinant +1 (within [`ROTATION_TOL`]).
pub fn check_rotation(m: &Mat3) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("rotation matrix has non-finite entries".into()));
    }
    let err = (m.transpose() * m - Mat3::identity()).abs().max();
    let det = m.determinant();
    if err > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::Domain(format!(
            "not a rotation matrix (orthonormality error {err:.3e}, det {det:.6})"
        )));
    }
    Ok(())
}

/// Angle of the relative rotation `Aᵀ B`, in `[0, π]`.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> Result<f64> {
    check_rotation(a)?;
    check_rotation(b)?;
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// Quaternion form of [`geodesic_distance`]: `2 acos |q₁·q₂|`.
pub fn quat_geodesic_distance(a: &UnitQuat, b: &UnitQuat) -> f64 {
    2.0 * a.dot(b).abs().clamp(-1.0, 1.0).acos()
}

/// Frame with `z = normal` and `x` the component of `hint` orthogonal to it.
///
/// When `hint` is (nearly) parallel to the normal, the global axis least
/// aligned with the normal is used instead; ties go to the lower axis index.
pub fn build_surface_frame(point: Vec3, normal: Vec3, hint: Vec3) -> Frame3 {
    let z = normal.normalize();
    let hint = if hint.dot(&z).abs() > 1.0 - 1e-6 {
        fallback_axis(&z)
    } else {
        hint
    };
    let x = (hint - z * hint.dot(&z)).normalize();
    let y = z.cross(&x);
    Frame3 {
        origin: point,
        axes: Mat3::from_columns(&[x, y, z]),
    }
}

fn fallback_axis(n: &Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if n[i].abs() < n[best].abs() {
            best = i;
        }
    }
    let mut axis = Vec3::zeros();
    axis[best] = 1.0;
    axis
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn random_quat(rng: &mut impl Rng) -> UnitQuat {
        loop {
            let v: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n2: f64 = v.iter().map(|x| x * x).sum();
            if n2 > 1e-3 && n2 <= 1.0 {
                return UnitQuat::new(v[0], v[1], v[2], v[3]).unwrap();
            }
        }
    }

    #[test]
    fn geodesic_identity_and_quarter_turn() {
        let r = UnitQuat::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7).to_matrix();
        assert_relative_eq!(geodesic_distance(&r, &r).unwrap(), 0.0, epsilon = 1e-7);
        let rz = UnitQuat::from_axis_angle(Vec3::z(), FRAC_PI_2).to_matrix();
        assert_relative_eq!(
            geodesic_distance(&Mat3::identity(), &rz).unwrap(),
            FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn geodesic_matrix_matches_quaternion_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let dm = geodesic_distance(&a.to_matrix(), &b.to_matrix()).unwrap();
            let dq = quat_geodesic_distance(&a, &b);
            // acos is ill-conditioned near 0 and π
            assert!((dm - dq).abs() < 1e-6, "{dm} vs {dq}");
        }
    }

    #[test]
    fn geodesic_rejects_non_rotations() {
        let bad = Mat3::identity() * 2.0;
        assert!(geodesic_distance(&bad, &Mat3::identity()).is_err());
        let reflection = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(geodesic_distance(&reflection, &Mat3::identity()).is_err());
    }

    #[test]
    fn half_turn_is_pi() {
        let r = UnitQuat::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), PI).to_matrix();
        assert_relative_eq!(
            geodesic_distance(&Mat3::identity(), &r).unwrap(),
            PI,
            epsilon = 1e-6
        );
    }

    #[test]
    fn quaternion_sign_is_canonical() {
        let q = UnitQuat::new(-0.5, 0.5, 0.5, 0.5).unwrap();
        assert!(q.w() >= 0.0);
        let p = UnitQuat::new(0.5, -0.5, -0.5, -0.5).unwrap();
        assert_eq!(q, p);
        assert!(q.same_rotation(&p, 1e-12));
        let n: f64 = q.to_array().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transform_inverse_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                RigidTransform::new(
                    Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                    random_quat(rng),
                )
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let p = Vec3::new(0.1, -0.4, 0.9);
            let id = a.inverse().compose(&a);
            assert!((id.apply(&p) - p).norm() < 1e-9);
            let l = a.compose(&b).compose(&c).apply(&p);
            let r = a.compose(&b.compose(&c)).apply(&p);
            assert!((l - r).norm() < 1e-9);
        }
    }

    #[test]
    fn surface_frame_examples() {
        let f = build_surface_frame(Vec3::zeros(), Vec3::z(), Vec3::x());
        assert!((f.axes - Mat3::identity()).abs().max() < 1e-15);
        let f = build_surface_frame(Vec3::new(1.0, 2.0, 3.0), Vec3::z(), Vec3::z());
        assert!((f.x_axis() - Vec3::x()).norm() < 1e-15);
        assert_eq!(f.origin, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn fallback_tie_break_prefers_lowest_axis() {
        // |n| components: x and y tie at the minimum.
        let n = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(fallback_axis(&n), Vec3::x());
        let n = Vec3::new(0.6, 0.0, 0.8);
        assert_eq!(fallback_axis(&n), Vec3::y());
    }

    #[test]
    fn frame_local_world_round_trip() {
        let f = build_surface_frame(
            Vec3::new(0.2, 0.1, -0.3),
            Vec3::new(1.0, 1.0, 0.0).normalize(),
            Vec3::z(),
        );
        f.validate().unwrap();
        let p = Vec3::new(-0.7, 0.4, 0.25);
        assert!((f.to_world(&f.to_local(&p)) - p).norm() < 1e-14);
        let t = f.to_transform().unwrap();
        assert!((t.apply(&Vec3::new(1.0, 2.0, 3.0)) - f.to_world(&Vec3::new(1.0, 2.0, 3.0))).norm() < 1e-12);
    }
}
