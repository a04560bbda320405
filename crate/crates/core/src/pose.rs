//! Rigid transforms and trajectory re-expression.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;
/// Compositions between polar re-projections in [`PoseChain`].
pub const REORTHONORMALIZE_EVERY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(err <= ORTHO_TOL && (det - 1.0).abs() <= ORTHO_TOL) {
        return Err(Error::invalid(format!(
            "rotation is not orthonormal (|R^T R - I| = {err:e}, det = {det})"
        )));
    }
    Ok(())
}

impl Se3Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `theta` about z at `(x, y, 0)`.
    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), theta).matrix(),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// Axis-angle rotation given as a rotation vector.
    pub fn from_scaled_axis(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_scaled_axis(axis_angle).matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Heading about z, `atan2(R10, R00)`.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Se3Pose {
        let rt = self.rotation.transpose();
        Se3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > ORTHO_TOL {
            return Err(Error::invalid("homogeneous matrix has a non-affine last row"));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Nearest rotation in Frobenius norm (polar factor via SVD).
    pub fn reorthonormalized(&self) -> Se3Pose {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Se3Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Max of `|R^T R - I|` and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// 3x3 rotation rows followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_array(v: &[f64; 12]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v[..9]), Vector3::new(v[9], v[10], v[11]))
    }

    /// Largest elementwise difference of rotation and translation.
    pub fn max_abs_diff(&self, other: &Se3Pose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// Running product of poses, re-projected onto SO(3) periodically.
#[derive(Debug, Clone)]
pub struct PoseChain {
    current: Se3Pose,
    since_projection: usize,
}

impl Default for PoseChain {
    fn default() -> Self {
        Self::new(Se3Pose::identity())
    }
}

impl PoseChain {
    pub fn new(start: Se3Pose) -> Self {
        Self {
            current: start,
            since_projection: 0,
        }
    }

    pub fn push(&mut self, step: &Se3Pose) -> &Se3Pose {
        self.current = self.current.compose(step);
        self.since_projection += 1;
        if self.since_projection >= REORTHONORMALIZE_EVERY {
            self.current = self.current.reorthonormalized();
            self.since_projection = 0;
        }
        &self.current
    }

    pub fn current(&self) -> &Se3Pose {
        &self.current
    }
}

/// End-effector poses in the robot base frame:
/// `inv(T_WB) * T_WT[i] * T_TE` for each tracker pose `T_WT[i]`.
pub fn to_base_frame(tracker_in_world: &[Se3Pose], base_in_world: &Se3Pose, ee_in_tracker: &Se3Pose) -> Result<Vec<Se3Pose>> {
    check_rotation(&base_in_world.rotation)?;
    check_rotation(&ee_in_tracker.rotation)?;
    let inv = base_in_world.invert();
    Ok(tracker_in_world
        .iter()
        .map(|p| inv.compose(p).compose(ee_in_tracker))
        .collect())
}

/// Re-expresses every pose in the frame of `sequence[reference]`:
/// `p_rel = R_ref^T (p - p_ref)`, `R_rel = R_ref^T R`.
pub fn relative_pose(sequence: &[Se3Pose], reference: usize) -> Result<Vec<Se3Pose>> {
    if sequence.is_empty() {
        return Err(Error::invalid("relative_pose of an empty sequence"));
    }
    let r = sequence
        .get(reference)
        .ok_or_else(|| Error::invalid(format!("reference {reference} outside sequence of {}", sequence.len())))?;
    let rt = r.rotation.transpose();
    Ok(sequence
        .iter()
        .map(|p| Se3Pose {
            rotation: rt * p.rotation,
            translation: rt * (p.translation - r.translation),
        })
        .collect())
}

/// How a relative pose is flattened into an action row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionParam {
    /// `(dx, dy, dyaw)` for motions in the plane.
    #[default]
    Planar,
    /// Translation followed by the nine rotation entries, row-major.
    TranslationRotation,
}

impl ActionParam {
    pub fn dim(self) -> usize {
        match self {
            ActionParam::Planar => 3,
            ActionParam::TranslationRotation => 12,
        }
    }

    pub fn encode(self, pose: &Se3Pose) -> Vec<f64> {
        match self {
            ActionParam::Planar => vec![pose.translation.x, pose.translation.y, pose.yaw()],
            ActionParam::TranslationRotation => {
                let a = pose.to_array();
                let mut v = a[9..].to_vec();
                v.extend_from_slice(&a[..9]);
                v
            }
        }
    }

    /// Inverse of [`encode`](Self::encode); generated rotations are projected
    /// back onto SO(3).
    pub fn decode(self, row: &[f64]) -> Result<Se3Pose> {
        if row.len() != self.dim() {
            return Err(Error::invalid(format!(
                "action row has {} values, expected {}",
                row.len(),
                self.dim()
            )));
        }
        match self {
            ActionParam::Planar => Ok(Se3Pose::planar(row[0], row[1], row[2])),
            ActionParam::TranslationRotation => {
                let raw = Se3Pose {
                    rotation: Matrix3::from_row_slice(&row[3..]),
                    translation: Vector3::new(row[0], row[1], row[2]),
                };
                Ok(raw.reorthonormalized())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_maps_to_identity() {
        let seq = vec![Se3Pose::planar(1.0, 2.0, 0.3), Se3Pose::planar(-1.0, 0.5, 1.2)];
        let rel = relative_pose(&seq, 1).unwrap();
        assert!(rel[1].max_abs_diff(&Se3Pose::identity()) < 1e-15);
        assert!(relative_pose(&[], 0).is_err());
        assert!(relative_pose(&seq, 2).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Se3Pose::new(r, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Se3Pose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn planar_param_round_trip() {
        let p = Se3Pose::planar(0.1, -0.2, 0.4);
        let back = ActionParam::Planar.decode(&ActionParam::Planar.encode(&p)).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-15);
        let full = ActionParam::TranslationRotation;
        let back = full.decode(&full.encode(&p)).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-12);
    }
}
