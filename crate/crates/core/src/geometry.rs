//! Rigid-body pose algebra and the manifold charts policies live on.
//!
//! Every chart Jacobian in this crate is taken with respect to the 6-D
//! perturbation `(a, b)` of a pose, where the position moves in the world
//! frame and the orientation in the body frame:
//!
//! ```text
//! retract((p, R), (a, b)) = (p + a, R * exp(b))
//! ```
//!
//! This is the same parametrization [`Pose::retract`] uses to integrate a
//! [`Twist`], so `x_dot = J * twist` holds for every chart.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, RowVector6, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum distance from the cylinder axis for the surface charts.
pub const AXIS_SINGULARITY: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("pose is on the chart's singular set: {0}")]
    SingularPose(&'static str),
}

/// End-effector pose: world position plus unit-quaternion orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    /// Applies a perturbation `[a; b]` (world translation, body rotation vector).
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let a = delta.fixed_rows::<3>(0).into_owned();
        let b = delta.fixed_rows::<3>(3).into_owned();
        let q = self.orientation * UnitQuaternion::from_scaled_axis(b);
        Pose::new(self.position + a, UnitQuaternion::new_normalize(q.into_inner()))
    }

    /// `[x, y, z, qw, qx, qy, qz]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    pub fn from_array(a: &[f64; 7]) -> Pose {
        let q = nalgebra::Quaternion::new(a[3], a[4], a[5], a[6]);
        Pose::new(
            Vector3::new(a[0], a[1], a[2]),
            UnitQuaternion::new_unchecked(q),
        )
    }

    /// Rotation matrix of the orientation.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }
}

/// Linear velocity in the world frame, angular velocity in the body frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        v.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        v
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.to_vector().as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|x| x.is_finite())
    }
}

/// Geodesic angle between two rotations, in `[0, pi]`.
pub fn orientation_error(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    wrap_periodic(x, 2.0 * PI)
}

/// Wraps `x` to `(-period/2, period/2]`.
pub fn wrap_periodic(x: f64, period: f64) -> f64 {
    let half = 0.5 * period;
    let mut y = (x + half).rem_euclid(period) - half;
    if y <= -half {
        y += period;
    }
    y
}

/// Inverse of the right Jacobian of SO(3) at rotation vector `w`.
pub fn so3_right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = w.cross_matrix();
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * wx + (1.0 / 12.0) * wx * wx;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * wx + coef * wx * wx
}

/// Differentiable map from end-effector pose to manifold coordinates.
pub trait Chart: fmt::Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn apply(&self, pose: &Pose) -> Result<DVector<f64>, ChartError>;

    /// `dim x 6` Jacobian with respect to the retraction in [`Pose::retract`].
    fn jacobian(&self, pose: &Pose) -> Result<DMatrix<f64>, ChartError>;

    /// Period of each coordinate, `None` for unbounded coordinates.
    fn periods(&self) -> Vec<Option<f64>> {
        vec![None; self.dim()]
    }

    /// `a - b` with periodic coordinates wrapped to their principal range.
    fn difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        for (i, p) in self.periods().into_iter().enumerate() {
            if let Some(p) = p {
                d[i] = wrap_periodic(d[i], p);
            }
        }
        d
    }
}

/// Full 6-D chart: world position and rotation vector relative to a
/// reference orientation. At the reference its Jacobian is the identity.
#[derive(Clone, Debug)]
pub struct PoseChart {
    pub reference: UnitQuaternion<f64>,
}

impl PoseChart {
    pub fn new(reference: UnitQuaternion<f64>) -> Self {
        Self { reference }
    }
}

impl Default for PoseChart {
    fn default() -> Self {
        Self::new(UnitQuaternion::identity())
    }
}

impl Chart for PoseChart {
    fn dim(&self) -> usize {
        6
    }

    fn apply(&self, pose: &Pose) -> Result<DVector<f64>, ChartError> {
        let w = (self.reference.inverse() * pose.orientation).scaled_axis();
        Ok(DVector::from_iterator(
            6,
            pose.position.iter().chain(w.iter()).copied(),
        ))
    }

    fn jacobian(&self, pose: &Pose) -> Result<DMatrix<f64>, ChartError> {
        let w = (self.reference.inverse() * pose.orientation).scaled_axis();
        let mut j = DMatrix::identity(6, 6);
        j.view_mut((3, 3), (3, 3)).copy_from(&so3_right_jacobian_inv(&w));
        Ok(j)
    }
}

/// A cylinder in the world: axis line, radius, and the radial direction
/// where the arc-length coordinate is zero. The arc-length branch cut sits
/// diametrically opposite `zero_direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub origin: Vector3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub radius: f64,
    pub zero_direction: Unit<Vector3<f64>>,
}

impl Cylinder {
    /// Builds a cylinder; `zero_direction` is projected onto the plane
    /// normal to the axis. Returns `None` on degenerate input.
    pub fn new(
        origin: Vector3<f64>,
        axis: Vector3<f64>,
        radius: f64,
        zero_direction: Vector3<f64>,
    ) -> Option<Self> {
        if !(radius > 0.0) {
            return None;
        }
        let axis = Unit::try_new(axis, 1e-12)?;
        let e1 = zero_direction - axis.dot(&zero_direction) * axis.into_inner();
        let zero_direction = Unit::try_new(e1, 1e-9)?;
        Some(Self { origin, axis, radius, zero_direction })
    }

    /// Point on the surface offset by `distance` along the outward normal.
    pub fn surface_point(&self, height: f64, arc: f64, distance: f64) -> Vector3<f64> {
        let theta = arc / self.radius;
        let k = self.axis.into_inner();
        let e1 = self.zero_direction.into_inner();
        let e2 = k.cross(&e1);
        let n = theta.cos() * e1 + theta.sin() * e2;
        self.origin + height * k + (self.radius + distance) * n
    }

    /// Tool orientation that points the tool axis at the surface (`-n`)
    /// with tool rotation `phi` about the normal.
    pub fn aligned_orientation(&self, arc: f64, phi: f64) -> UnitQuaternion<f64> {
        let theta = arc / self.radius;
        let k = self.axis.into_inner();
        let e1 = self.zero_direction.into_inner();
        let e2 = k.cross(&e1);
        let n = theta.cos() * e1 + theta.sin() * e2;
        let v = k.cross(&n);
        let tool_z = -n;
        let tool_y = phi.cos() * k - phi.sin() * v;
        let tool_x = tool_y.cross(&tool_z);
        let m = Matrix3::from_columns(&[tool_x, tool_y, tool_z]);
        UnitQuaternion::from_matrix(&m)
    }

    /// Pose at surface coordinates with the tool aligned to the normal.
    pub fn aligned_pose(&self, height: f64, arc: f64, distance: f64, phi: f64) -> Pose {
        Pose::new(
            self.surface_point(height, arc, distance),
            self.aligned_orientation(arc, phi),
        )
    }

    /// All surface coordinates and their Jacobian rows at `pose`.
    pub fn frame(&self, pose: &Pose) -> Result<SurfaceFrame, ChartError> {
        SurfaceFrame::compute(self, pose)
    }
}

/// Coordinates derivable from a pose relative to a [`Cylinder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceCoordinate {
    /// Height along the axis (m).
    Height,
    /// Arc length `R * theta` (m), wrapped to `(-pi R, pi R]`.
    Arc,
    /// Distance to the surface along the outward normal (m).
    Distance,
    /// First component of the tilt rotation vector of the tool axis away
    /// from `-n`, along the surface tangent (rad).
    TiltTangent,
    /// Second tilt component, along the cylinder axis (rad).
    TiltAxial,
    /// Signed rotation of the tool "up" axis about the normal, measured
    /// from the cylinder axis (rad).
    ToolRotation,
}

impl SurfaceCoordinate {
    fn index(self) -> usize {
        match self {
            SurfaceCoordinate::Height => 0,
            SurfaceCoordinate::Arc => 1,
            SurfaceCoordinate::Distance => 2,
            SurfaceCoordinate::TiltTangent => 3,
            SurfaceCoordinate::TiltAxial => 4,
            SurfaceCoordinate::ToolRotation => 5,
        }
    }
}

/// Surface coordinates of a pose together with their analytic Jacobian
/// rows (`[world translation | body rotation]`).
#[derive(Clone, Debug)]
pub struct SurfaceFrame {
    pub values: [f64; 6],
    pub rows: [RowVector6<f64>; 6],
    /// Outward surface normal at the foot point.
    pub normal: Vector3<f64>,
    /// Tilt angle between the tool axis and `-normal`.
    pub tilt_angle: f64,
    /// Reason a coordinate is undefined at this pose, if it is.
    pub singular: [Option<&'static str>; 6],
}

impl SurfaceFrame {
    fn compute(cyl: &Cylinder, pose: &Pose) -> Result<Self, ChartError> {
        let k = cyl.axis.into_inner();
        let e1 = cyl.zero_direction.into_inner();
        let e2 = k.cross(&e1);
        let rot = pose.rotation();

        let r = pose.position - cyl.origin;
        let z = k.dot(&r);
        let radial = r - z * k;
        let rho = radial.norm();
        if rho < AXIS_SINGULARITY {
            return Err(ChartError::SingularPose("on the cylinder axis"));
        }
        let n = radial / rho;
        let v = k.cross(&n);
        let mut theta = n.dot(&e2).atan2(n.dot(&e1));
        if theta <= -PI {
            theta += 2.0 * PI;
        }

        let row = |pos: Vector3<f64>, rot_world: Vector3<f64>| {
            let body = rot.transpose() * rot_world;
            RowVector6::new(pos.x, pos.y, pos.z, body.x, body.y, body.z)
        };
        let zero = Vector3::zeros();

        // tool axis and up axis in the world
        let t = rot.column(2).into_owned();
        let u = rot.column(1).into_owned();

        let c0 = -t.dot(&n);
        let c1 = t.dot(&v);
        let c2 = t.dot(&k);
        let dc0 = row(-(c1 / rho) * v, -t.cross(&n));
        let dc1 = row((c0 / rho) * v, t.cross(&v));
        let dc2 = row(zero, t.cross(&k));

        let rr = (c1 * c1 + c2 * c2).sqrt();
        let m = rr * rr + c0 * c0;
        let tilt_angle = rr.atan2(c0);
        let mut singular = [None; 6];
        let (h, q) = if rr < 1e-4 {
            if c0 <= 0.0 {
                singular[3] = Some("tool axis points away from the surface");
                singular[4] = singular[3];
            }
            // series of atan(r/c0)/r around r = 0
            let h = if rr == 0.0 { 1.0 / c0 } else { tilt_angle / rr };
            (h, -2.0 / (3.0 * c0 * c0 * c0))
        } else {
            (tilt_angle / rr, (c0 * rr / m - tilt_angle) / (rr * rr * rr))
        };
        let h_c0 = -1.0 / m;
        let cdot = c1 * dc1 + c2 * dc2;
        let tilt_t = h * c1;
        let tilt_a = h * c2;
        let d_tilt_t = h * dc1 + c1 * (q * cdot + h_c0 * dc0);
        let d_tilt_a = h * dc2 + c2 * (q * cdot + h_c0 * dc0);

        let a = -u.dot(&v);
        let b = u.dot(&k);
        let ab = a * a + b * b;
        if ab < 1e-12 {
            singular[5] = Some("tool up axis along the surface normal");
        }
        let phi = a.atan2(b);
        let da = row((u.dot(&n) / rho) * v, v.cross(&u));
        let db = row(zero, u.cross(&k));
        let d_phi = (b * da - a * db) / ab;

        Ok(Self {
            values: [z, cyl.radius * theta, rho - cyl.radius, tilt_t, tilt_a, phi],
            rows: [
                row(k, zero),
                row((cyl.radius / rho) * v, zero),
                row(n, zero),
                d_tilt_t,
                d_tilt_a,
                d_phi,
            ],
            normal: n,
            tilt_angle,
            singular,
        })
    }

    /// Value and Jacobian row, or the reason the coordinate is undefined.
    pub fn checked(&self, c: SurfaceCoordinate) -> Result<(f64, RowVector6<f64>), ChartError> {
        match self.singular[c.index()] {
            Some(why) => Err(ChartError::SingularPose(why)),
            None => Ok((self.values[c.index()], self.rows[c.index()])),
        }
    }

    pub fn get(&self, c: SurfaceCoordinate) -> f64 {
        self.values[c.index()]
    }

    pub fn row(&self, c: SurfaceCoordinate) -> RowVector6<f64> {
        self.rows[c.index()]
    }
}

/// Chart built from a selection of [`SurfaceCoordinate`]s of one cylinder.
///
/// The human input chart is `(Height, Arc, ToolRotation)`; the policy
/// library uses other selections (see [`CylinderChart::surface_position`]).
#[derive(Clone, Debug)]
pub struct CylinderChart {
    pub cylinder: Cylinder,
    pub coordinates: Vec<SurfaceCoordinate>,
}

impl CylinderChart {
    pub fn new(cylinder: Cylinder, coordinates: Vec<SurfaceCoordinate>) -> Self {
        Self { cylinder, coordinates }
    }

    /// `(z, s, phi)`: height, arc length, tool rotation.
    pub fn surface_frame(cylinder: Cylinder) -> Self {
        use SurfaceCoordinate::*;
        Self::new(cylinder, vec![Height, Arc, ToolRotation])
    }

    /// `(z, s, d)`: height, arc length, distance to the surface.
    pub fn surface_position(cylinder: Cylinder) -> Self {
        use SurfaceCoordinate::*;
        Self::new(cylinder, vec![Height, Arc, Distance])
    }

    pub fn distance(cylinder: Cylinder) -> Self {
        Self::new(cylinder, vec![SurfaceCoordinate::Distance])
    }

    pub fn tool_rotation(cylinder: Cylinder) -> Self {
        Self::new(cylinder, vec![SurfaceCoordinate::ToolRotation])
    }

    pub fn tilt(cylinder: Cylinder) -> Self {
        use SurfaceCoordinate::*;
        Self::new(cylinder, vec![TiltTangent, TiltAxial])
    }
}

impl Chart for CylinderChart {
    fn dim(&self) -> usize {
        self.coordinates.len()
    }

    fn apply(&self, pose: &Pose) -> Result<DVector<f64>, ChartError> {
        let f = self.cylinder.frame(pose)?;
        let mut x = DVector::zeros(self.dim());
        for (i, c) in self.coordinates.iter().enumerate() {
            x[i] = f.checked(*c)?.0;
        }
        Ok(x)
    }

    fn jacobian(&self, pose: &Pose) -> Result<DMatrix<f64>, ChartError> {
        let f = self.cylinder.frame(pose)?;
        let mut j = DMatrix::zeros(self.dim(), 6);
        for (i, c) in self.coordinates.iter().enumerate() {
            j.row_mut(i).copy_from(&f.checked(*c)?.1);
        }
        Ok(j)
    }

    fn periods(&self) -> Vec<Option<f64>> {
        self.coordinates
            .iter()
            .map(|c| match c {
                SurfaceCoordinate::Arc => Some(2.0 * PI * self.cylinder.radius),
                SurfaceCoordinate::ToolRotation => Some(2.0 * PI),
                _ => None,
            })
            .collect()
    }
}
