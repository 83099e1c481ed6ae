//! Rotation representations: the continuous 6D form regressed by the decoder,
//! proper rotation matrices, and Euler angles (kept for comparison only).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Point3D;

/// Gram–Schmidt rejects columns shorter than this.
pub const SIXD_DEGENERACY_EPS: f64 = 1e-8;
/// Elementwise tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;
/// `matrix_to_euler` refuses matrices with `|R[2][0]|` above `1 - GIMBAL_EPS`.
pub const GIMBAL_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateSixD(&'static str),
    #[error("matrix is not a rotation (orthonormality error {ortho_err:e}, det {det})")]
    NotARotation { ortho_err: f64, det: f64 },
    #[error("rotation is within the gimbal-lock region (|R[2][0]| = {0})")]
    GimbalLockRegion(f64),
    #[error("non-finite rotation component")]
    NonFinite,
}

/// First two (not necessarily orthonormal) columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Rot6D {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>) -> Self {
        Self { a, b }
    }

    /// `[a1, a2, a3, b1, b2, b3]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            a: Vector3::new(v[0], v[1], v[2]),
            b: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Serialize for Rot6D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rot6D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        <[f64; 6]>::deserialize(d).map(Rot6D::from_array)
    }
}

/// A validated proper rotation (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self, RotationError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(RotationError::NonFinite);
        }
        let ortho_err = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho_err > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(RotationError::NotARotation { ortho_err, det });
        }
        Ok(Self(m))
    }

    /// Row-major constructor.
    pub fn from_row_major(v: [f64; 9]) -> Result<Self, RotationError> {
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_rotation3(r: &Rotation3<f64>) -> Self {
        Self(*r.matrix())
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation3(&Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Composition `self * other`. Drift from rounding is not re-validated.
    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }
}

impl Serialize for RotationMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RotationMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        RotationMatrix::from_row_major(v).map_err(serde::de::Error::custom)
    }
}

/// Intrinsic yaw (z), then pitch (y), then roll (x): `R = Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub pitch: f64,
    pub roll: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(pitch: f64, roll: f64, yaw: f64) -> Self {
        Self { pitch, roll, yaw }
    }

    /// Largest per-component angular difference, accounting for wrap-around.
    pub fn max_angle_difference(&self, other: &EulerAngles) -> f64 {
        [
            (self.pitch, other.pitch),
            (self.roll, other.roll),
            (self.yaw, other.yaw),
        ]
        .iter()
        .map(|&(a, b)| wrap_angle(a - b).abs())
        .fold(0.0, f64::max)
    }
}

/// Maps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotationMatrix, RotationError> {
    if !r.is_finite() {
        return Err(RotationError::NonFinite);
    }
    let a_norm = r.a.norm();
    if a_norm < SIXD_DEGENERACY_EPS {
        return Err(RotationError::DegenerateSixD("first column too short"));
    }
    let c1 = r.a / a_norm;
    let b_perp = r.b - c1 * c1.dot(&r.b);
    let b_norm = b_perp.norm();
    if b_norm < SIXD_DEGENERACY_EPS {
        return Err(RotationError::DegenerateSixD("columns are parallel"));
    }
    let c2 = b_perp / b_norm;
    let c3 = c1.cross(&c2);
    Ok(RotationMatrix(Matrix3::from_columns(&[c1, c2, c3])))
}

pub fn matrix_to_rot6d(r: &RotationMatrix) -> Rot6D {
    Rot6D {
        a: r.0.column(0).into_owned(),
        b: r.0.column(1).into_owned(),
    }
}

/// Validates a raw matrix before taking its 6D form.
pub fn try_matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rot6D, RotationError> {
    RotationMatrix::new(*m).map(|r| matrix_to_rot6d(&r))
}

pub fn euler_to_matrix(e: &EulerAngles) -> RotationMatrix {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), e.yaw);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), e.pitch);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), e.roll);
    RotationMatrix::from_rotation3(&(rz * ry * rx))
}

pub fn matrix_to_euler(r: &RotationMatrix) -> Result<EulerAngles, RotationError> {
    let m = &r.0;
    let s = m[(2, 0)];
    if s.abs() > 1.0 - GIMBAL_EPS {
        return Err(RotationError::GimbalLockRegion(s.abs()));
    }
    Ok(EulerAngles {
        pitch: (-s).asin(),
        roll: m[(2, 1)].atan2(m[(2, 2)]),
        yaw: m[(1, 0)].atan2(m[(0, 0)]),
    })
}

/// Angle of the relative rotation `R1ᵀ R2`, in `[0, π]`.
pub fn geodesic_distance(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let cos = ((r1.0.transpose() * r2.0).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos()
}

/// Minimal rotation carrying the optical axis onto the viewing ray through `center`.
pub fn view_rotation(center: &Point3D) -> RotationMatrix {
    let ray = center.to_vector();
    match Rotation3::rotation_between(&Vector3::z(), &ray) {
        Some(r) => RotationMatrix::from_rotation3(&r),
        // Ray anti-parallel to the optical axis; only reachable for points behind the camera.
        None => RotationMatrix::about_axis(&Vector3::x(), PI),
    }
}

/// Egocentric orientation from an allocentric one: `R_ego = R_view · R_alloc`.
pub fn allocentric_to_egocentric(alloc: &RotationMatrix, center: &Point3D) -> RotationMatrix {
    view_rotation(center).compose(alloc)
}

pub fn egocentric_to_allocentric(ego: &RotationMatrix, center: &Point3D) -> RotationMatrix {
    view_rotation(center).transpose().compose(ego)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn sixd_identity() {
        let r = rot6d_to_matrix(&Rot6D::new(Vector3::x(), Vector3::y())).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn sixd_hand_gram_schmidt() {
        let r = rot6d_to_matrix(&Rot6D::new(
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ))
        .unwrap();
        assert!(max_abs_diff(r.matrix(), &Matrix3::identity()) < 1e-15);
    }

    #[test]
    fn sixd_degenerate_inputs() {
        let parallel = Rot6D::new(Vector3::x(), Vector3::new(2.0, 0.0, 0.0));
        assert!(matches!(
            rot6d_to_matrix(&parallel),
            Err(RotationError::DegenerateSixD(_))
        ));
        let short = Rot6D::new(Vector3::new(1e-9, 0.0, 0.0), Vector3::y());
        assert!(matches!(
            rot6d_to_matrix(&short),
            Err(RotationError::DegenerateSixD(_))
        ));
        let nan = Rot6D::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::y());
        assert_eq!(rot6d_to_matrix(&nan), Err(RotationError::NonFinite));
    }

    #[test]
    fn matrix_to_sixd_reads_columns() {
        assert_eq!(
            matrix_to_rot6d(&RotationMatrix::identity()).to_array(),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        // quarter turn about the camera y-axis, written out by hand
        let m = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        let six = try_matrix_to_rot6d(&m).unwrap();
        assert_eq!(six.to_array(), [0.0, 0.0, -1.0, 0.0, 1.0, 0.0]);
        let built = RotationMatrix::about_axis(&Vector3::y(), FRAC_PI_2);
        assert!(max_abs_diff(built.matrix(), &m) < 1e-15);
    }

    #[test]
    fn not_a_rotation() {
        let scaled = Matrix3::identity() * 2.0;
        assert!(matches!(
            try_matrix_to_rot6d(&scaled),
            Err(RotationError::NotARotation { .. })
        ));
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RotationMatrix::new(reflection).is_err());
    }

    #[test]
    fn euler_examples() {
        let r = euler_to_matrix(&EulerAngles::new(0.0, 0.0, 0.0));
        assert_eq!(*r.matrix(), Matrix3::identity());

        let r = euler_to_matrix(&EulerAngles::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(max_abs_diff(r.matrix(), &expected) < 1e-15);

        let locked = euler_to_matrix(&EulerAngles::new(FRAC_PI_2, 0.3, 0.1));
        assert!(matches!(
            matrix_to_euler(&locked),
            Err(RotationError::GimbalLockRegion(_))
        ));
    }

    #[test]
    fn euler_round_trip_away_from_lock() {
        let e = EulerAngles::new(0.4, -2.1, 2.9);
        let back = matrix_to_euler(&euler_to_matrix(&e)).unwrap();
        assert!(e.max_angle_difference(&back) < 1e-12);
    }

    #[test]
    fn geodesic_examples() {
        let i = RotationMatrix::identity();
        let yaw = euler_to_matrix(&EulerAngles::new(0.0, 0.0, FRAC_PI_2));
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        assert!((geodesic_distance(&i, &yaw) - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(geodesic_distance(&i, &yaw), geodesic_distance(&yaw, &i));
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn allocentric_round_trip() {
        let center = Point3D::new(3.0, -1.0, 12.0);
        let ego = euler_to_matrix(&EulerAngles::new(0.2, 0.1, -1.0));
        let alloc = egocentric_to_allocentric(&ego, &center);
        let back = allocentric_to_egocentric(&alloc, &center);
        assert!(max_abs_diff(back.matrix(), ego.matrix()) < 1e-14);
        // on the optical axis the two frames agree
        let on_axis = Point3D::new(0.0, 0.0, 4.0);
        assert!(max_abs_diff(view_rotation(&on_axis).matrix(), &Matrix3::identity()) < 1e-15);
    }

    #[test]
    fn view_rotation_maps_axis_to_ray() {
        let center = Point3D::new(-2.0, 0.5, 7.0);
        let z = view_rotation(&center).matrix() * Vector3::z();
        let ray = center.to_vector().normalize();
        assert!((z - ray).abs().max() < 1e-15);
    }

    #[test]
    fn serde_shapes() {
        let six = Rot6D::from_array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(serde_json::to_string(&six).unwrap(), "[1.0,0.0,0.0,0.0,1.0,0.0]");
        let r: RotationMatrix = serde_json::from_str("[1,0,0,0,1,0,0,0,1]").unwrap();
        assert_eq!(r, RotationMatrix::identity());
        assert!(serde_json::from_str::<RotationMatrix>("[2,0,0,0,1,0,0,0,1]").is_err());
    }
}
