use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Rigid transform `x ↦ R·x + t` with the rotation stored as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRecord", into = "PoseRecord")]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(aa: Vec3, t: Vec3) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(aa), t)
    }

    /// Builds a pose from a rotation matrix; the matrix is re-orthonormalized.
    pub fn from_matrix(r: &Matrix3<f64>, t: Vec3) -> Self {
        let svd = r.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut fix = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            fix[(2, 2)] = -1.0;
        }
        let rot = Rotation3::from_matrix_unchecked(u * fix * vt);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    /// Normalizes a raw `(w, x, y, z)` quaternion. Returns the pose and
    /// whether the identity fallback was used for a vanishing quaternion.
    pub fn from_raw(q: [f64; 4], t: [f64; 3]) -> (Self, bool) {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let t = Vec3::new(t[0], t[1], t[2]);
        if !(n > 1e-12) || !n.is_finite() {
            return (Self::from_translation(t), true);
        }
        let quat = Quaternion::new(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        (Self::new(UnitQuaternion::new_unchecked(quat), t), false)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.inverse();
        SE3Pose::new(inv, -(inv * self.translation))
    }

    /// Geodesic rotation angle to `other`, in radians.
    pub fn rotation_angle_to(&self, other: &SE3Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// `(w, x, y, z)` with the sign chosen so that `w ≥ 0`.
    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn to_record(&self) -> PoseRecord {
        let [qw, qx, qy, qz] = self.quat_wxyz();
        PoseRecord {
            qw,
            qx,
            qy,
            qz,
            tx: self.translation.x,
            ty: self.translation.y,
            tz: self.translation.z,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

/// Flat serialized form of a pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl PoseRecord {
    pub fn to_pose(&self) -> SE3Pose {
        SE3Pose::from_raw([self.qw, self.qx, self.qy, self.qz], [self.tx, self.ty, self.tz]).0
    }
}

impl From<PoseRecord> for SE3Pose {
    fn from(r: PoseRecord) -> Self {
        r.to_pose()
    }
}

impl From<SE3Pose> for PoseRecord {
    fn from(p: SE3Pose) -> Self {
        p.to_record()
    }
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Look-at camera pose (camera-to-world) with the OpenCV axis convention:
/// +z forward, +y down in the image. `up` is the world up direction.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> SE3Pose {
    let fwd = (target - eye).normalize();
    let mut right = fwd.cross(up);
    if right.norm() < 1e-9 {
        right = fwd.cross(&Vec3::new(1.0, 0.0, 0.0));
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    let r = Matrix3::from_columns(&[right, down, fwd]);
    SE3Pose::from_matrix(&r, *eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn compose_inverse_is_identity() {
        let p = SE3Pose::from_axis_angle(Vec3::new(0.3, -0.2, 1.1), Vec3::new(1.0, 2.0, -0.5));
        let id = p.compose(&p.inverse());
        assert!(id.translation.norm() < 1e-12);
        assert!(id.rotation.angle() < 1e-12);
    }

    #[test]
    fn raw_quaternion_fallback() {
        let (p, flagged) = SE3Pose::from_raw([0.0; 4], [1.0, 2.0, 3.0]);
        assert!(flagged);
        assert_eq!(p.rotation, UnitQuaternion::identity());
        let (q, flagged) = SE3Pose::from_raw([2.0, 0.0, 0.0, 2.0], [0.0; 3]);
        assert!(!flagged);
        assert!((q.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
        assert!((q.rotation.angle() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn look_at_points_forward() {
        let eye = Vec3::new(0.0, 1.5, -3.0);
        let target = Vec3::new(0.0, 1.0, 0.0);
        let p = look_at(&eye, &target, &Vec3::new(0.0, 1.0, 0.0));
        let fwd = p.transform_vector(&Vec3::z());
        assert!((fwd - (target - eye).normalize()).norm() < 1e-12);
        // image-down points roughly against world up
        assert!(p.transform_vector(&Vec3::y()).y < 0.0);
        assert!((p.rotation_matrix().determinant() - 1.0).abs() < 1e-12);
    }
}
