//! Triangulated berry and leaf geometry.

use berrypose_core::math::Vec3;

pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub tris: Vec<[u32; 3]>,
}

/// Unit berry: a spheroid with a tapered tip along -y and a gentle shoulder
/// near +y. Spans exactly y in [-1, 1]; the maximal radial extent is
/// normalized to 1 so per-axis scaling by (w/2, h/2, l/2) makes the
/// bounding box tight.
pub fn unit_berry(rings: usize, segments: usize) -> Mesh {
    assert!(rings >= 3 && segments >= 3);
    let profile = |v: f64| -> (f64, f64) {
        // v in [0, pi], y from +1 (top) to -1 (tip)
        let y = v.cos();
        let r = v.sin() * (1.0 + 0.25 * v.cos());
        (r, y)
    };
    // normalize the radial maximum to 1
    let mut r_max: f64 = 0.0;
    for i in 0..=200 {
        let v = std::f64::consts::PI * i as f64 / 200.0;
        r_max = r_max.max(profile(v).0);
    }

    let mut vertices = Vec::new();
    let mut tris: Vec<[u32; 3]> = Vec::new();

    let top = Vec3::new(0.0, 1.0, 0.0);
    let tip = Vec3::new(0.0, -1.0, 0.0);
    vertices.push(top);
    for ring in 1..rings {
        let v = std::f64::consts::PI * ring as f64 / rings as f64;
        let (r, y) = profile(v);
        let r = r / r_max;
        for seg in 0..segments {
            let u = std::f64::consts::TAU * seg as f64 / segments as f64;
            vertices.push(Vec3::new(r * u.cos(), y, r * u.sin()));
        }
    }
    vertices.push(tip);
    let tip_idx = (vertices.len() - 1) as u32;

    // top cap: wound so outward faces point away from the interior
    for seg in 0..segments as u32 {
        let a = 1 + seg;
        let b = 1 + (seg + 1) % segments as u32;
        tris.push([0, b, a]);
    }
    // body
    for ring in 0..rings - 2 {
        let base0 = 1 + ring as u32 * segments as u32;
        let base1 = base0 + segments as u32;
        for seg in 0..segments as u32 {
            let s1 = (seg + 1) % segments as u32;
            let (a, b, c, d) = (base0 + seg, base0 + s1, base1 + seg, base1 + s1);
            tris.push([a, d, c]);
            tris.push([a, b, d]);
        }
    }
    // tip cap
    let last_base = 1 + (rings - 2) as u32 * segments as u32;
    for seg in 0..segments as u32 {
        let a = last_base + seg;
        let b = last_base + (seg + 1) % segments as u32;
        tris.push([a, tip_idx, b]);
    }

    Mesh { vertices, tris }
}

/// Per-vertex normals from area-weighted face normals. Recomputed after any
/// anisotropic scaling, which is why it is not baked into the unit mesh.
pub fn averaged_normals(vertices: &[Vec3], tris: &[[u32; 3]]) -> Vec<Vec3> {
    let mut normals = vec![Vec3::ZERO; vertices.len()];
    for t in tris {
        let (a, b, c) = (
            vertices[t[0] as usize],
            vertices[t[1] as usize],
            vertices[t[2] as usize],
        );
        let n = (b - a).cross(c - a); // length = 2x area: natural weighting
        for &i in t {
            normals[i as usize] += n;
        }
    }
    for n in normals.iter_mut() {
        *n = n.normalized().unwrap_or(Vec3::new(0.0, 1.0, 0.0));
    }
    normals
}

/// Two-triangle leaf quad centered at the origin in its local frame,
/// spanning `extent` in x/z with a plane normal along +y.
pub fn leaf_quad(extent: (f64, f64)) -> Mesh {
    let (hx, hz) = (0.5 * extent.0, 0.5 * extent.1);
    let vertices = vec![
        Vec3::new(-hx, 0.0, -hz),
        Vec3::new(hx, 0.0, -hz),
        Vec3::new(hx, 0.0, hz),
        Vec3::new(-hx, 0.0, hz),
    ];
    let tris = vec![[0, 2, 1], [0, 3, 2]];
    Mesh { vertices, tris }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_berry_fits_unit_box_tightly() {
        let m = unit_berry(12, 16);
        let mut max_r = 0.0f64;
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for v in &m.vertices {
            max_r = max_r.max(v.x.abs()).max(v.z.abs());
            min_y = min_y.min(v.y);
            max_y = max_y.max(v.y);
        }
        assert!(max_r <= 1.0 + 1e-12);
        assert!(max_r > 0.95, "profile should reach its normalized radius");
        assert_eq!(min_y, -1.0);
        assert_eq!(max_y, 1.0);
    }

    #[test]
    fn berry_is_closed_and_outward() {
        // signed volume of the triangle fan from the origin must be
        // positive for a closed outward-oriented surface
        let m = unit_berry(12, 16);
        let mut six_v = 0.0;
        for t in &m.tris {
            let (a, b, c) = (
                m.vertices[t[0] as usize],
                m.vertices[t[1] as usize],
                m.vertices[t[2] as usize],
            );
            six_v += a.dot(b.cross(c));
        }
        assert!(six_v > 0.0, "signed volume {six_v} should be positive");
        // every edge must be shared by exactly two triangles
        let mut edges = std::collections::HashMap::new();
        for t in &m.tris {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2), "surface is not closed");
    }

    #[test]
    fn normals_point_outward() {
        let m = unit_berry(12, 16);
        let normals = averaged_normals(&m.vertices, &m.tris);
        for (v, n) in m.vertices.iter().zip(normals.iter()) {
            // for this star-shaped solid the outward normal has positive
            // dot product with the radial direction except at the poles
            if v.x.abs() + v.z.abs() > 0.2 {
                assert!(v.dot(*n) > 0.0);
            }
        }
    }
}
