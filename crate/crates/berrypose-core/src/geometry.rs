//! Rotations, poses, oriented boxes, camera projection, symmetry orbits and
//! pose-error metrics.
//!
//! # Frozen corner ordering
//!
//! An [`OrientedBox3D`] of size `(h, w, l)` has its 8 corners indexed by the
//! sign bits of `k = 0..7` in x-then-y-then-z order: bit 0 picks the sign of
//! the local x offset (`±w/2`), bit 1 the local y offset (`±h/2`), bit 2 the
//! local z offset (`±l/2`), with bit value 0 meaning negative. Corner 0 is
//! `(-w/2, -h/2, -l/2)` in the box frame. The local y axis is the symmetry
//! axis (`h` spans it). This ordering is part of the on-disk and loss
//! contracts; do not change it.

use crate::math::{Mat3, Vec3};
use alloc::vec::Vec;

/// Points closer than this to the camera plane cannot be projected.
pub const MIN_PROJECT_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("quaternion norm {0} is too small to normalize")]
    DegenerateQuaternion(f64),
    #[error("point at z = {0} is behind the camera")]
    BehindCamera(f64),
    #[error("box size components must be strictly positive, got ({0}, {1}, {2})")]
    NonPositiveSize(f64, f64, f64),
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(&'static str),
}

/// A 3D rotation stored as a unit quaternion `(w, x, y, z)`.
///
/// The stored quaternion is canonicalized to `w >= 0` (choosing the
/// representative of the double cover deterministically) so that
/// serialization round-trips are byte-stable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a rotation from quaternion components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Rotation, GeometryError> {
        let n = libm::sqrt(w * w + x * x + y * y + z * z);
        if n < 1e-12 || !n.is_finite() {
            return Err(GeometryError::DegenerateQuaternion(n));
        }
        Ok(Rotation { w: w / n, x: x / n, y: y / n, z: z / n }.canonicalized())
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Result<Rotation, GeometryError> {
        let axis = axis
            .normalized()
            .ok_or(GeometryError::DegenerateQuaternion(0.0))?;
        let half = 0.5 * angle_rad;
        let s = libm::sin(half);
        Ok(Rotation {
            w: libm::cos(half),
            x: axis.x * s,
            y: axis.y * s,
            z: axis.z * s,
        }
        .canonicalized())
    }

    /// Quaternion components `(w, x, y, z)` with `w >= 0`.
    pub fn wxyz(&self) -> (f64, f64, f64, f64) {
        (self.w, self.x, self.y, self.z)
    }

    fn canonicalized(self) -> Rotation {
        let flip = self.w < 0.0
            || (self.w == 0.0
                && (self.x < 0.0
                    || (self.x == 0.0 && (self.y < 0.0 || (self.y == 0.0 && self.z < 0.0)))));
        if flip {
            Rotation { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::from_rows(
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        )
    }

    /// Recovers the quaternion from a rotation matrix (Shepperd's method:
    /// branch on the largest diagonal combination for stability).
    pub fn from_matrix(m: &Mat3) -> Rotation {
        let t = m.trace();
        let a = &m.m;
        let q = if t > 0.0 {
            let s = libm::sqrt(t + 1.0) * 2.0;
            (
                0.25 * s,
                (a[2][1] - a[1][2]) / s,
                (a[0][2] - a[2][0]) / s,
                (a[1][0] - a[0][1]) / s,
            )
        } else if a[0][0] > a[1][1] && a[0][0] > a[2][2] {
            let s = libm::sqrt(1.0 + a[0][0] - a[1][1] - a[2][2]) * 2.0;
            (
                (a[2][1] - a[1][2]) / s,
                0.25 * s,
                (a[0][1] + a[1][0]) / s,
                (a[0][2] + a[2][0]) / s,
            )
        } else if a[1][1] > a[2][2] {
            let s = libm::sqrt(1.0 + a[1][1] - a[0][0] - a[2][2]) * 2.0;
            (
                (a[0][2] - a[2][0]) / s,
                (a[0][1] + a[1][0]) / s,
                0.25 * s,
                (a[1][2] + a[2][1]) / s,
            )
        } else {
            let s = libm::sqrt(1.0 + a[2][2] - a[0][0] - a[1][1]) * 2.0;
            (
                (a[1][0] - a[0][1]) / s,
                (a[0][2] + a[2][0]) / s,
                (a[1][2] + a[2][1]) / s,
                0.25 * s,
            )
        };
        Rotation::from_wxyz(q.0, q.1, q.2, q.3).expect("rotation matrix yields unit quaternion")
    }

    /// Hamilton product; `self * other` applies `other` first.
    pub fn compose(&self, o: &Rotation) -> Rotation {
        Rotation {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .canonicalized()
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }.canonicalized()
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        // q v q* expanded: v + 2 u x (u x v + w v), u = (x, y, z)
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
    }
}

/// Rigid transform: rotation then translation, mapping box-frame points into
/// the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Rotation::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Rotation, translation: Vec3) -> Pose {
        Pose { rotation, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -rinv.apply(self.translation),
        }
    }

    /// `self.compose(o)` applies `o` first: `(self ∘ o)(p) = self(o(p))`.
    pub fn compose(&self, o: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&o.rotation),
            translation: self.rotation.apply(o.translation) + self.translation,
        }
    }
}

/// Metric box size: `h` along the symmetry (local y) axis, `w` along local
/// x, `l` along local z. Meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Size3D {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl Size3D {
    pub fn new(h: f64, w: f64, l: f64) -> Result<Size3D, GeometryError> {
        if h > 0.0 && w > 0.0 && l > 0.0 && h.is_finite() && w.is_finite() && l.is_finite() {
            Ok(Size3D { h, w, l })
        } else {
            Err(GeometryError::NonPositiveSize(h, w, l))
        }
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// Full body diagonal length.
    pub fn diagonal(&self) -> f64 {
        libm::sqrt(self.h * self.h + self.w * self.w + self.l * self.l)
    }
}

/// An oriented 3D bounding box: pose plus metric size. The unit of both
/// ground truth and prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub pose: Pose,
    pub size: Size3D,
}

impl OrientedBox3D {
    pub fn new(pose: Pose, size: Size3D) -> OrientedBox3D {
        OrientedBox3D { pose, size }
    }

    /// The 8 corners in the camera frame, in the frozen sign-bit order
    /// described in the module docs.
    pub fn corners(&self) -> [Vec3; 8] {
        let hx = 0.5 * self.size.w;
        let hy = 0.5 * self.size.h;
        let hz = 0.5 * self.size.l;
        let mut out = [Vec3::ZERO; 8];
        for (k, c) in out.iter_mut().enumerate() {
            let local = Vec3::new(
                if k & 1 == 0 { -hx } else { hx },
                if k & 2 == 0 { -hy } else { hy },
                if k & 4 == 0 { -hz } else { hz },
            );
            *c = self.pose.apply(local);
        }
        out
    }

    /// Center plus the 8 corners: the nine keypoint-generating 3D points, in
    /// the same order the codec serializes them (center first).
    pub fn keypoints_3d(&self) -> [Vec3; 9] {
        let corners = self.corners();
        let mut out = [Vec3::ZERO; 9];
        out[0] = self.pose.translation;
        out[1..].copy_from_slice(&corners);
        out
    }

    /// The same nine points in the box frame (origin plus signed corners),
    /// as used for PnP model points.
    pub fn model_points(size: &Size3D) -> [Vec3; 9] {
        let hx = 0.5 * size.w;
        let hy = 0.5 * size.h;
        let hz = 0.5 * size.l;
        let mut out = [Vec3::ZERO; 9];
        for k in 0..8 {
            out[k + 1] = Vec3::new(
                if k & 1 == 0 { -hx } else { hx },
                if k & 2 == 0 { -hy } else { hy },
                if k & 4 == 0 { -hz } else { hz },
            );
        }
        out
    }

    /// The 12 box edges as pairs of corner indices (corners differing in
    /// exactly one sign bit).
    pub const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (0, 2),
        (0, 4),
        (1, 3),
        (1, 5),
        (2, 3),
        (2, 6),
        (3, 7),
        (4, 5),
        (4, 6),
        (5, 7),
        (6, 7),
    ];
}

/// Pinhole camera intrinsics. Pixel centers sit at integer coordinates, so a
/// principal point of `( (width-1)/2, (height-1)/2 )` is image-centered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<CameraIntrinsics, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadIntrinsics("focal lengths must be positive"));
        }
        if !(cx > 0.0 && cx < width as f64) {
            return Err(GeometryError::BadIntrinsics("cx must lie inside the image"));
        }
        if !(cy > 0.0 && cy < height as f64) {
            return Err(GeometryError::BadIntrinsics("cy must lie inside the image"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64), GeometryError> {
        if p.z <= MIN_PROJECT_DEPTH {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn project_many(&self, pts: &[Vec3]) -> Result<Vec<(f64, f64)>, GeometryError> {
        pts.iter().map(|&p| self.project(p)).collect()
    }

    /// Back-projects a pixel with known depth into the camera frame.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Whether a continuous pixel coordinate lies on the pixel lattice,
    /// i.e. inside `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }
}

/// The discrete symmetry orbit of a box: member `i` has rotation
/// `R * Ry(2*pi*i/n)` (a spin about the local symmetry axis), identical
/// translation and size. Member 0 is the input box itself.
pub fn symmetry_expand(b: &OrientedBox3D, n: usize) -> Vec<OrientedBox3D> {
    assert!(n >= 1, "symmetry orbit needs at least one member");
    let mut out = Vec::with_capacity(n);
    out.push(*b);
    for i in 1..n {
        let angle = core::f64::consts::TAU * i as f64 / n as f64;
        let spin = Rotation::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), angle)
            .expect("unit y axis is valid");
        out.push(OrientedBox3D {
            pose: Pose {
                rotation: b.pose.rotation.compose(&spin),
                translation: b.pose.translation,
            },
            size: b.size,
        });
    }
    out
}

/// Translation error (meters) and geodesic rotation error (degrees) between
/// two poses. The rotation error is `acos((trace(R̂ᵀR) - 1) / 2)`, clamped
/// into `[0°, 180°]`.
pub fn pose_errors(pred: &Pose, gt: &Pose) -> (f64, f64) {
    let t_err = (pred.translation - gt.translation).norm();
    let rel = pred.rotation.to_matrix().transpose().mul_mat(&gt.rotation.to_matrix());
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let r_err = libm::acos(c).to_degrees();
    (t_err, r_err)
}

/// Pose errors against the best-matching member of the ground truth's
/// symmetry orbit. The translation error is orbit-invariant; the minimum is
/// taken over the rotation error.
pub fn symmetric_pose_errors(pred: &Pose, gt: &OrientedBox3D, n: usize) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for member in symmetry_expand(gt, n) {
        let (t, r) = pose_errors(pred, &member.pose);
        if r < best.1 {
            best = (t, r);
        }
    }
    best
}

mod iou;
pub use iou::box3d_iou;
