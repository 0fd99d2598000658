//! Rigid camera poses and the rotation utilities built on them.
//!
//! A [`Pose`] is a camera-to-world transform: the columns of its rotation are
//! the camera's right, up and backward axes in world coordinates (the camera
//! looks down its local `-z`), and its translation is the camera position.
//! Angles are radians internally and degrees at every external interface.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng::SplitMix64;
use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

impl Pose {
    /// Validates `R^T R = I`, `det R = 1` (both to 1e-9) and the homogeneous bottom row.
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!("pose bottom row must be (0,0,0,1), got {bottom:?}")));
        }
        let r = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        check_rotation(&r)?;
        Ok(Self { matrix })
    }

    pub fn from_parts(rotation: Matrix3<f64>, position: Vector3<f64>) -> Result<Self> {
        Self::new(homogeneous(&rotation, &position))
    }

    pub fn identity() -> Self {
        Self { matrix: Matrix4::identity() }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for (k, v) in out.iter_mut().enumerate() {
            *v = self.matrix[(k / 4, k % 4)];
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::invalid(format!("pose needs 16 values, got {}", values.len())));
        }
        Self::new(Matrix4::from_row_slice(values))
    }

    /// Applies the rigid transform `left` in world coordinates: `left * self`.
    pub fn left_compose(&self, left: &Matrix4<f64>) -> Result<Self> {
        Self::new(left * self.matrix)
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Pose::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    if ortho > ORTHO_TOL {
        return Err(Error::invalid(format!("rotation is not orthonormal (deviation {ortho:e})")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::invalid(format!("rotation determinant is {det}, expected +1")));
    }
    Ok(())
}

pub(crate) fn homogeneous(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

/// Relative translation (scene units) and rotation angles (radians) about x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeTransform {
    pub t_x: f64,
    pub t_y: f64,
    pub t_z: f64,
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
}

impl RelativeTransform {
    /// Order `(t_x, t_y, t_z, theta_x, theta_y, theta_z)`.
    pub fn from_array(v: [f64; 6]) -> Self {
        Self { t_x: v[0], t_y: v[1], t_z: v[2], theta_x: v[3], theta_y: v[4], theta_z: v[5] }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.t_x, self.t_y, self.t_z, self.theta_x, self.theta_y, self.theta_z]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.t_x, self.t_y, self.t_z)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// The homogeneous matrix `[[dR, dt], [0, 1]]`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        homogeneous(&euler_to_rotation(self), &self.translation())
    }
}

fn axis_x(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

fn axis_y(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn axis_z(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

fn axis_x_derivative(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, c, 0.0, -c, -s)
}

fn axis_y_derivative(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s)
}

fn axis_z_derivative(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Relative rotation `X(theta_x) Y(theta_y) Z(theta_z)`.
///
/// Each factor carries its `sin` with the sign on the sub-diagonal, e.g.
/// `Z(t) = [[cos t, sin t, 0], [-sin t, cos t, 0], [0, 0, 1]]`, which is the
/// transpose of the usual right-handed active rotation.
pub fn euler_to_rotation(rt: &RelativeTransform) -> Matrix3<f64> {
    axis_x(rt.theta_x) * axis_y(rt.theta_y) * axis_z(rt.theta_z)
}

/// Partial derivatives of [`euler_to_rotation`] with respect to
/// `theta_x`, `theta_y`, `theta_z`.
pub fn euler_rotation_partials(rt: &RelativeTransform) -> [Matrix3<f64>; 3] {
    let (x, y, z) = (axis_x(rt.theta_x), axis_y(rt.theta_y), axis_z(rt.theta_z));
    [
        axis_x_derivative(rt.theta_x) * y * z,
        x * axis_y_derivative(rt.theta_y) * z,
        x * y * axis_z_derivative(rt.theta_z),
    ]
}

/// Left-multiplies `initial` by the homogeneous relative transform.
pub fn calibrate(initial: &Pose, rt: &RelativeTransform) -> Result<Pose> {
    if !rt.is_finite() {
        return Err(Error::invalid("relative transform has non-finite components"));
    }
    initial.left_compose(&rt.to_matrix())
}

/// First two rotation columns, `(r00, r10, r20, r01, r11, r21)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

pub fn encode_rot6d(r: &Matrix3<f64>) -> Rot6D {
    Rot6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Gram-Schmidt on the two stored columns, third column by cross product.
/// Columns closer than 1e-6 rad to parallel (or of zero length) are rejected.
pub fn decode_rot6d(v: &Rot6D) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(v.0[0], v.0[1], v.0[2]);
    let a2 = Vector3::new(v.0[3], v.0[4], v.0[5]);
    let (n1, n2) = (a1.norm(), a2.norm());
    if !(n1 > 1e-300 && n2 > 1e-300) || !n1.is_finite() || !n2.is_finite() {
        return Err(Error::Degenerate("6D rotation has a zero or non-finite column".into()));
    }
    let sin_angle = a1.cross(&a2).norm() / (n1 * n2);
    if sin_angle < 1e-6_f64.sin() {
        return Err(Error::Degenerate("6D rotation columns are parallel".into()));
    }
    let b1 = a1 / n1;
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LookAt {
    Fixed([f64; 3]),
    /// Isotropic Gaussian around `mean` with per-axis standard deviation.
    Gaussian {
        mean: [f64; 3],
        stddev: f64,
    },
}

/// Sampling law for cameras on a sphere around the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDistribution {
    pub radius: f64,
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    #[serde(default = "default_lookat")]
    pub lookat: LookAt,
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_lookat() -> LookAt {
    LookAt::Fixed([0.0; 3])
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            radius: 4.0,
            azimuth_deg: [0.0, 360.0],
            elevation_deg: [-30.0, 90.0],
            lookat: default_lookat(),
            up: default_up(),
        }
    }
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        for (name, [lo, hi]) in [("azimuth", self.azimuth_deg), ("elevation", self.elevation_deg)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        let up_norm = Vector3::from(self.up).norm();
        if (up_norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("up vector must have unit norm, got {up_norm}")));
        }
        if let LookAt::Gaussian { stddev, .. } = self.lookat {
            if !(stddev >= 0.0) {
                return Err(Error::invalid("lookat stddev must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Camera-to-world pose at `position` looking at `target`.
pub fn look_at(position: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Pose> {
    let offset = target - position;
    if offset.norm() < 1e-12 {
        return Err(Error::Degenerate("camera position coincides with the look-at point".into()));
    }
    let forward = offset.normalize();
    let right = forward.cross(up);
    if right.norm() < 1e-9 {
        return Err(Error::Degenerate("viewing direction is parallel to the up vector".into()));
    }
    let right = right.normalize();
    let true_up = right.cross(&forward);
    Pose::from_parts(Matrix3::from_columns(&[right, true_up, -forward]), *position)
}

/// Draws a camera from `dist`; the result depends only on `(dist, seed)`.
pub fn sample_pose(dist: &PoseDistribution, seed: u64) -> Result<Pose> {
    dist.validate()?;
    let mut rng = SplitMix64::new(seed);
    let azimuth = rng.uniform(dist.azimuth_deg[0], dist.azimuth_deg[1]).to_radians();
    let elevation = rng.uniform(dist.elevation_deg[0], dist.elevation_deg[1]).to_radians();
    let target = match dist.lookat {
        LookAt::Fixed(p) => Vector3::from(p),
        LookAt::Gaussian { mean, stddev } => {
            Vector3::new(rng.normal(), rng.normal(), rng.normal()) * stddev + Vector3::from(mean)
        }
    };
    let position =
        Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin()) * dist.radius;
    look_at(&position, &target, &Vector3::from(dist.up))
}

/// Random rigid motion in world coordinates: rotation about a uniformly drawn
/// axis by an angle uniform in `[0, max_angle_deg]`, translation in a uniform
/// direction with length uniform in `[0, max_translation]`.
pub fn random_rigid_motion(rng: &mut SplitMix64, max_angle_deg: f64, max_translation: f64) -> Matrix4<f64> {
    let axis = Unit::new_normalize(Vector3::from(rng.unit_vector()));
    let angle = rng.uniform(0.0, max_angle_deg).to_radians();
    let direction = Vector3::from(rng.unit_vector());
    let length = rng.uniform(0.0, max_translation);
    let rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
    homogeneous(&rotation, &(direction * length))
}

/// Rotates the camera about its own center by at most `max_angle_deg` and
/// shifts its position by at most `max_translation`, so the pose error of the
/// result against `pose` stays within both bounds.
pub fn perturb_pose(pose: &Pose, rng: &mut SplitMix64, max_angle_deg: f64, max_translation: f64) -> Result<Pose> {
    let m = random_rigid_motion(rng, max_angle_deg, max_translation);
    let rotation = m.fixed_view::<3, 3>(0, 0) * pose.rotation();
    Pose::from_parts(rotation, pose.position() + m.fixed_view::<3, 1>(0, 3))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans: f64,
}

/// Geodesic rotation angle (degrees) and camera-position distance.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    let rel = estimate.rotation().transpose() * truth.rotation();
    let cos = (rel.trace() - 1.0) / 2.0;
    let skew = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    PoseError {
        rot_deg: (skew.norm() / 2.0).atan2(cos).to_degrees(),
        trans: (estimate.position() - truth.position()).norm(),
    }
}
