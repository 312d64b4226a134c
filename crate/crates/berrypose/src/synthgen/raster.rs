//! Z-buffer triangle rasterizer producing shaded color, metric depth and an
//! instance-id mask in one pass.
//!
//! Pixel `(x, y)` is sampled at continuous coordinates `(x, y)` — pixel
//! centers sit on integer coordinates, matching the projection convention
//! of the math core.

use berrypose_core::geometry::CameraIntrinsics;
use berrypose_core::math::Vec3;

pub struct FrameBuffers {
    pub width: usize,
    pub height: usize,
    /// Linear RGB in [0, 1].
    pub color: Vec<[f32; 3]>,
    /// Camera-space z in meters; 0 where nothing was hit.
    pub depth: Vec<f32>,
    /// Instance id per pixel; 0 is background (and occluders).
    pub id: Vec<u16>,
}

impl FrameBuffers {
    pub fn new(width: usize, height: usize) -> FrameBuffers {
        FrameBuffers {
            width,
            height,
            color: vec![[0.0; 3]; width * height],
            depth: vec![0.0; width * height],
            id: vec![0; width * height],
        }
    }
}

pub struct Shading {
    /// Unit direction the light travels (from the source into the scene).
    pub light_dir: Vec3,
    pub intensity: f64,
    pub ambient: f64,
    /// Shade with |n.l| instead of max(0, n.l) for thin double-sided
    /// geometry.
    pub double_sided: bool,
}

const NEAR_PLANE: f64 = 0.02;

/// Rasterizes one mesh instance. `vertices_cam` are camera-frame positions,
/// `normals_world` and the light direction live in the same (world) frame,
/// `albedo` is per-vertex linear RGB. Triangles carrying `id > 0` write the
/// instance mask. Returns the number of pixels written (before being
/// overdrawn by later calls).
#[allow(clippy::too_many_arguments)]
pub fn raster_mesh(
    fb: &mut FrameBuffers,
    k: &CameraIntrinsics,
    vertices_cam: &[Vec3],
    normals: &[Vec3],
    albedo: &[[f32; 3]],
    tris: &[[u32; 3]],
    id: u16,
    shading: &Shading,
) -> usize {
    let mut written = 0usize;
    let width = fb.width as isize;
    let height = fb.height as isize;

    // pre-project
    let mut proj = vec![None; vertices_cam.len()];
    for (i, v) in vertices_cam.iter().enumerate() {
        if v.z > NEAR_PLANE {
            proj[i] = Some((k.fx * v.x / v.z + k.cx, k.fy * v.y / v.z + k.cy, v.z));
        }
    }

    for t in tris {
        let (i0, i1, i2) = (t[0] as usize, t[1] as usize, t[2] as usize);
        let (Some(p0), Some(p1), Some(p2)) = (proj[i0], proj[i1], proj[i2]) else {
            continue; // partially behind the near plane: skip
        };

        // true backface test in 3D: the face normal of an outward-wound
        // triangle must point toward the camera (origin)
        let va = vertices_cam[i0];
        let vb = vertices_cam[i1];
        let vc = vertices_cam[i2];
        if !shading.double_sided && (vb - va).cross(vc - va).dot(va) >= 0.0 {
            continue;
        }

        // orient the projected triangle so its signed doubled area is
        // positive, independent of which side faces the camera
        let area = (p1.0 - p0.0) * (p2.1 - p0.1) - (p1.1 - p0.1) * (p2.0 - p0.0);
        let (i1, i2, p1, p2, area) = if area >= 0.0 {
            (i1, i2, p1, p2, area)
        } else {
            (i2, i1, p2, p1, -area)
        };
        if area < 1e-12 {
            continue;
        }

        let min_x = p0.0.min(p1.0).min(p2.0).floor().max(0.0) as isize;
        let max_x = p0.0.max(p1.0).max(p2.0).ceil().min((width - 1) as f64) as isize;
        let min_y = p0.1.min(p1.1).min(p2.1).floor().max(0.0) as isize;
        let max_y = p0.1.max(p1.1).max(p2.1).ceil().min((height - 1) as f64) as isize;
        if min_x > max_x || min_y > max_y {
            continue;
        }

        let inv_area = 1.0 / area;
        let inv_z = [1.0 / p0.2, 1.0 / p1.2, 1.0 / p2.2];

        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let px = x as f64;
                let py = y as f64;
                let w0 = ((p1.0 - px) * (p2.1 - py) - (p1.1 - py) * (p2.0 - px)) * inv_area;
                let w1 = ((p2.0 - px) * (p0.1 - py) - (p2.1 - py) * (p0.0 - px)) * inv_area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // perspective-correct interpolation via 1/z
                let zi = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
                let z = 1.0 / zi;
                let pix = (y as usize) * fb.width + x as usize;
                if fb.depth[pix] != 0.0 && fb.depth[pix] as f64 <= z {
                    continue;
                }

                let c0 = w0 * inv_z[0] * z;
                let c1 = w1 * inv_z[1] * z;
                let c2 = w2 * inv_z[2] * z;
                let n = normals[i0] * c0 + normals[i1] * c1 + normals[i2] * c2;
                let n = n.normalized().unwrap_or(Vec3::new(0.0, 1.0, 0.0));
                let ndl = n.dot(-shading.light_dir);
                let lit = if shading.double_sided { ndl.abs() } else { ndl.max(0.0) };
                let gain = (shading.ambient + shading.intensity * lit).min(1.6) as f32;

                let alb = [
                    albedo[i0][0] as f64 * c0 + albedo[i1][0] as f64 * c1 + albedo[i2][0] as f64 * c2,
                    albedo[i0][1] as f64 * c0 + albedo[i1][1] as f64 * c1 + albedo[i2][1] as f64 * c2,
                    albedo[i0][2] as f64 * c0 + albedo[i1][2] as f64 * c1 + albedo[i2][2] as f64 * c2,
                ];
                fb.color[pix] = [
                    (alb[0] as f32 * gain).clamp(0.0, 1.0),
                    (alb[1] as f32 * gain).clamp(0.0, 1.0),
                    (alb[2] as f32 * gain).clamp(0.0, 1.0),
                ];
                fb.depth[pix] = z as f32;
                fb.id[pix] = id;
                written += 1;
            }
        }
    }
    written
}

/// Counts the pixels a mesh would cover if rendered alone (self-occlusion
/// only). Used for visibility fractions.
pub fn solo_coverage(
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    vertices_cam: &[Vec3],
    tris: &[[u32; 3]],
) -> usize {
    let mut fb = FrameBuffers::new(width, height);
    let normals = vec![Vec3::new(0.0, 1.0, 0.0); vertices_cam.len()];
    let albedo = vec![[1.0f32; 3]; vertices_cam.len()];
    let shading = Shading {
        light_dir: Vec3::new(0.0, -1.0, 0.0),
        intensity: 0.0,
        ambient: 1.0,
        double_sided: false,
    };
    raster_mesh(&mut fb, k, vertices_cam, &normals, &albedo, tris, 1, &shading);
    fb.id.iter().filter(|&&v| v == 1).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics::new(
            100.0,
            100.0,
            (w - 1) as f64 / 2.0,
            (h - 1) as f64 / 2.0,
            w,
            h,
        )
        .unwrap()
    }

    #[test]
    fn triangle_writes_color_depth_and_id() {
        let k = cam(64, 64);
        let mut fb = FrameBuffers::new(64, 64);
        // large triangle facing the camera at z = 1 (outward normal -z)
        let verts = [
            Vec3::new(-0.3, -0.3, 1.0),
            Vec3::new(0.0, 0.4, 1.0),
            Vec3::new(0.3, -0.3, 1.0),
        ];
        let normals = [Vec3::new(0.0, 0.0, -1.0); 3];
        let albedo = [[0.8, 0.2, 0.1]; 3];
        let shading = Shading {
            light_dir: Vec3::new(0.0, 0.0, 1.0),
            intensity: 1.0,
            ambient: 0.2,
            double_sided: false,
        };
        let n = raster_mesh(&mut fb, &k, &verts, &normals, &albedo, &[[0, 1, 2]], 3, &shading);
        assert!(n > 100);
        let center = 32 * 64 + 31;
        assert_eq!(fb.id[center], 3);
        assert!((fb.depth[center] - 1.0).abs() < 1e-4);
        assert!(fb.color[center][0] > fb.color[center][2]);
    }

    #[test]
    fn nearer_triangle_wins_depth_test() {
        let k = cam(64, 64);
        let mut fb = FrameBuffers::new(64, 64);
        let mk = |z: f64| {
            [
                Vec3::new(-0.3, -0.3, z),
                Vec3::new(0.0, 0.4, z),
                Vec3::new(0.3, -0.3, z),
            ]
        };
        let normals = [Vec3::new(0.0, 0.0, -1.0); 3];
        let shading = Shading {
            light_dir: Vec3::new(0.0, 0.0, 1.0),
            intensity: 1.0,
            ambient: 0.0,
            double_sided: false,
        };
        raster_mesh(&mut fb, &k, &mk(2.0), &normals, &[[0.0, 1.0, 0.0]; 3], &[[0, 1, 2]], 1, &shading);
        raster_mesh(&mut fb, &k, &mk(1.0), &normals, &[[1.0, 0.0, 0.0]; 3], &[[0, 1, 2]], 2, &shading);
        let center = 32 * 64 + 31;
        assert_eq!(fb.id[center], 2);
        assert!((fb.depth[center] - 1.0).abs() < 1e-4);
        // and drawing the far one again must not overwrite
        raster_mesh(&mut fb, &k, &mk(2.0), &normals, &[[0.0, 1.0, 0.0]; 3], &[[0, 1, 2]], 1, &shading);
        assert_eq!(fb.id[center], 2);
    }

    #[test]
    fn closed_mesh_renders_front_surface() {
        // a closed berry must show its near side: depth at the silhouette
        // center is closer than the body center, and coverage is a solid
        // blob rather than a rim
        let k = cam(96, 96);
        let unit = super::super::mesh::unit_berry(14, 18);
        let z_center = 0.3;
        let r = 0.03;
        let verts: Vec<Vec3> = unit
            .vertices
            .iter()
            .map(|v| Vec3::new(v.x * r, v.y * r, v.z * r + z_center))
            .collect();
        let normals = super::super::mesh::averaged_normals(&verts, &unit.tris);
        let albedo = vec![[0.8f32, 0.1, 0.1]; verts.len()];
        let shading = Shading {
            light_dir: Vec3::new(0.0, 0.0, 1.0),
            intensity: 1.0,
            ambient: 0.3,
            double_sided: false,
        };
        let mut fb = FrameBuffers::new(96, 96);
        raster_mesh(&mut fb, &k, &verts, &normals, &albedo, &unit.tris, 1, &shading);
        let covered = fb.id.iter().filter(|&&i| i == 1).count();
        // projected radius ~ fx * r / z = 10 px: a filled disc has ~314 px
        assert!(covered > 250, "coverage {covered} too small: rear-face rendering?");
        let center_pix = 48 * 96 + 47;
        assert_eq!(fb.id[center_pix], 1);
        let d = fb.depth[center_pix] as f64;
        assert!(
            d < z_center - 0.5 * r,
            "depth {d} is not the near surface of the body at {z_center}"
        );
    }

    #[test]
    fn backface_is_culled_unless_double_sided() {
        let k = cam(64, 64);
        // outward normal +z: this face looks away from the camera
        let verts = [
            Vec3::new(-0.3, -0.3, 1.0),
            Vec3::new(0.3, -0.3, 1.0),
            Vec3::new(0.0, 0.4, 1.0),
        ];
        let normals = [Vec3::new(0.0, 0.0, -1.0); 3];
        let albedo = [[1.0; 3]; 3];
        let mut shading = Shading {
            light_dir: Vec3::new(0.0, 0.0, 1.0),
            intensity: 1.0,
            ambient: 0.0,
            double_sided: false,
        };
        let mut fb = FrameBuffers::new(64, 64);
        let n = raster_mesh(&mut fb, &k, &verts, &normals, &albedo, &[[0, 1, 2]], 1, &shading);
        assert_eq!(n, 0, "backface must be culled");
        shading.double_sided = true;
        let n = raster_mesh(&mut fb, &k, &verts, &normals, &albedo, &[[0, 1, 2]], 1, &shading);
        assert!(n > 0, "double-sided geometry must render");
    }
}
