//! Exact intersection-over-union of two oriented boxes.
//!
//! The intersection volume is computed by clipping box `a`'s polytope
//! against the six face halfspaces of box `b` (Sutherland-Hodgman on each
//! face polygon, plus a cap polygon on every clip plane) and integrating the
//! volume of the clipped polytope with the divergence theorem.

use super::OrientedBox3D;
use crate::math::Vec3;
use alloc::vec::Vec;

const PLANE_EPS: f64 = 1e-12;

/// Oriented halfspace `n . p <= d`.
struct Halfspace {
    n: Vec3,
    d: f64,
}

/// Convex polytope as a set of outward-oriented (CCW from outside) faces.
struct Polytope {
    faces: Vec<Vec<Vec3>>,
}

/// Quad faces of the sign-bit corner ordering, CCW viewed from outside.
const BOX_FACES: [[usize; 4]; 6] = [
    [1, 3, 7, 5], // +x
    [0, 4, 6, 2], // -x
    [2, 6, 7, 3], // +y
    [0, 1, 5, 4], // -y
    [4, 5, 7, 6], // +z
    [0, 2, 3, 1], // -z
];

fn box_polytope(b: &OrientedBox3D) -> Polytope {
    let c = b.corners();
    Polytope {
        faces: BOX_FACES
            .iter()
            .map(|ids| ids.iter().map(|&i| c[i]).collect())
            .collect(),
    }
}

fn box_halfspaces(b: &OrientedBox3D) -> [Halfspace; 6] {
    let r = b.pose.rotation.to_matrix();
    let t = b.pose.translation;
    let axes = [r.col(0), r.col(1), r.col(2)];
    let half = [0.5 * b.size.w, 0.5 * b.size.h, 0.5 * b.size.l];
    let mut out: [Halfspace; 6] = [
        Halfspace { n: Vec3::ZERO, d: 0.0 },
        Halfspace { n: Vec3::ZERO, d: 0.0 },
        Halfspace { n: Vec3::ZERO, d: 0.0 },
        Halfspace { n: Vec3::ZERO, d: 0.0 },
        Halfspace { n: Vec3::ZERO, d: 0.0 },
        Halfspace { n: Vec3::ZERO, d: 0.0 },
    ];
    for axis in 0..3 {
        out[2 * axis] = Halfspace {
            n: axes[axis],
            d: axes[axis].dot(t) + half[axis],
        };
        out[2 * axis + 1] = Halfspace {
            n: -axes[axis],
            d: -axes[axis].dot(t) + half[axis],
        };
    }
    out
}

/// Clips one convex polygon against `n . p <= d`. Crossing points are pushed
/// onto `cap` so the caller can rebuild the section polygon.
fn clip_face(face: &[Vec3], hs: &Halfspace, cap: &mut Vec<Vec3>) -> Option<Vec<Vec3>> {
    let mut out: Vec<Vec3> = Vec::with_capacity(face.len() + 2);
    let k = face.len();
    for i in 0..k {
        let p = face[i];
        let q = face[(i + 1) % k];
        let sp = hs.n.dot(p) - hs.d;
        let sq = hs.n.dot(q) - hs.d;
        let p_in = sp <= PLANE_EPS;
        let q_in = sq <= PLANE_EPS;
        if p_in {
            out.push(p);
        }
        if p_in != q_in {
            let t = sp / (sp - sq);
            let x = p + (q - p) * t;
            out.push(x);
            cap.push(x);
        }
    }
    if out.len() >= 3 {
        Some(out)
    } else {
        None
    }
}

/// Clips the polytope by one halfspace, sealing it with a cap face on the
/// clip plane (crossing points sorted by angle around their centroid).
fn clip_polytope(poly: Polytope, hs: &Halfspace) -> Polytope {
    let mut cap: Vec<Vec3> = Vec::new();
    let mut faces: Vec<Vec<Vec3>> = Vec::with_capacity(poly.faces.len() + 1);
    for face in &poly.faces {
        if let Some(f) = clip_face(face, hs, &mut cap) {
            faces.push(f);
        }
    }

    if cap.len() >= 3 {
        // dedupe near-identical crossing points
        let mut uniq: Vec<Vec3> = Vec::with_capacity(cap.len());
        for p in cap {
            if !uniq.iter().any(|q| (p - *q).norm() < 1e-9) {
                uniq.push(p);
            }
        }
        if uniq.len() >= 3 {
            let mut centroid = Vec3::ZERO;
            for p in &uniq {
                centroid += *p;
            }
            centroid = centroid / uniq.len() as f64;

            // in-plane basis
            let u = (uniq[0] - centroid)
                .normalized()
                .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
            let v = hs.n.cross(u);

            // ascending angle in the (u, v = n x u) basis winds CCW about
            // +n, which is the cap's outward normal (it closes the kept
            // side of the halfspace)
            let mut pts: Vec<(f64, Vec3)> = uniq
                .into_iter()
                .map(|p| {
                    let d = p - centroid;
                    (libm::atan2(d.dot(v), d.dot(u)), p)
                })
                .collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal));
            let cap_face: Vec<Vec3> = pts.into_iter().map(|(_, p)| p).collect();
            faces.push(cap_face);
        }
    }

    Polytope { faces }
}

/// Signed volume of a closed polytope with outward-oriented faces
/// (divergence theorem over a triangle fan per face).
fn polytope_volume(poly: &Polytope) -> f64 {
    let mut six_v = 0.0;
    for face in &poly.faces {
        for i in 1..face.len().saturating_sub(1) {
            six_v += face[0].dot(face[i].cross(face[i + 1]));
        }
    }
    six_v / 6.0
}

/// Exact IoU of two oriented boxes. Degenerate (near-zero-volume) inputs
/// yield 0; the result is clamped into `[0, 1]`.
pub fn box3d_iou(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let va = a.size.volume();
    let vb = b.size.volume();
    if va < 1e-12 || vb < 1e-12 {
        return 0.0;
    }

    // cheap reject: bounding spheres
    let ra = 0.5 * a.size.diagonal();
    let rb = 0.5 * b.size.diagonal();
    let dist = (a.pose.translation - b.pose.translation).norm();
    if dist > ra + rb {
        return 0.0;
    }

    let mut poly = box_polytope(a);
    for hs in &box_halfspaces(b) {
        poly = clip_polytope(poly, hs);
        if poly.faces.is_empty() {
            return 0.0;
        }
    }
    let vi = polytope_volume(&poly).max(0.0);
    let union = va + vb - vi;
    if union <= 0.0 {
        return 0.0;
    }
    (vi / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::super::{Pose, Rotation, Size3D};
    use super::*;

    fn axis_box(center: Vec3, h: f64, w: f64, l: f64) -> OrientedBox3D {
        OrientedBox3D::new(
            Pose::new(Rotation::IDENTITY, center),
            Size3D::new(h, w, l).unwrap(),
        )
    }

    #[test]
    fn unit_cube_volume_is_one() {
        let poly = box_polytope(&axis_box(Vec3::ZERO, 1.0, 1.0, 1.0));
        assert!((polytope_volume(&poly) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_give_one() {
        let b = OrientedBox3D::new(
            Pose::new(
                Rotation::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.8).unwrap(),
                Vec3::new(0.2, -0.1, 0.9),
            ),
            Size3D::new(0.05, 0.03, 0.04).unwrap(),
        );
        assert!((box3d_iou(&b, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_boxes_give_zero() {
        let a = axis_box(Vec3::ZERO, 1.0, 1.0, 1.0);
        let b = axis_box(Vec3::new(5.0, 0.0, 0.0), 1.0, 1.0, 1.0);
        assert_eq!(box3d_iou(&a, &b), 0.0);
    }

    #[test]
    fn half_offset_cubes_give_one_third() {
        let a = axis_box(Vec3::ZERO, 1.0, 1.0, 1.0);
        let b = axis_box(Vec3::new(0.5, 0.0, 0.0), 1.0, 1.0, 1.0);
        // intersection 0.5, union 1.5
        assert!((box3d_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn contained_box() {
        let a = axis_box(Vec3::ZERO, 2.0, 2.0, 2.0);
        let b = axis_box(Vec3::ZERO, 1.0, 1.0, 1.0);
        // V_i = 1, union = 8
        assert!((box3d_iou(&a, &b) - 1.0 / 8.0).abs() < 1e-12);
        assert!((box3d_iou(&b, &a) - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_half_turn_square_box_is_identity() {
        // w == l, spin by 90 degrees about y: same occupancy
        let b = axis_box(Vec3::new(0.0, 0.0, 1.0), 0.05, 0.03, 0.03);
        let spun = OrientedBox3D::new(
            Pose::new(
                Rotation::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), core::f64::consts::FRAC_PI_2)
                    .unwrap(),
                b.pose.translation,
            ),
            b.size,
        );
        assert!((box3d_iou(&b, &spun) - 1.0).abs() < 1e-9);
    }
}
