//! Procedural generator of domain-randomized annotated scenes: berry
//! spheroids and leaf occluders rasterized to RGB, metric depth and an
//! instance mask, with camera-frame box annotations.
//!
//! Everything is driven by one seed: the same seed yields bit-identical
//! scenes, images and annotations.

mod dataset;
mod mesh;
mod raster;

pub use dataset::{
    generate_dataset, occlusion_histogram, point_cloud, sample_dir_name, write_sample, Annotation,
    SampleRecord,
};
pub use raster::FrameBuffers;

use berrypose_core::geometry::{CameraIntrinsics, OrientedBox3D, Pose, Rotation, Size3D};
use berrypose_core::math::{Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] crate::formats::FormatError),
    #[error("train split contains no instances; cannot compute a mean size")]
    EmptyTrainSplit,
}

/// Randomization ranges for scene sampling. All `(lo, hi)` pairs are
/// inclusive; distances and sizes are meters, angles degrees.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_width: u32,
    pub image_height: u32,
    /// Horizontal field of view; fx = fy derived from it.
    pub fov_deg: f64,
    pub berry_count: (u32, u32),
    /// Height range (log-uniform).
    pub berry_h_m: (f64, f64),
    /// Width range (log-uniform); length tracks width within `wl_jitter`.
    pub berry_w_m: (f64, f64),
    pub wl_jitter: f64,
    pub camera_distance_m: (f64, f64),
    pub camera_elevation_deg: (f64, f64),
    pub cluster_radius_m: f64,
    /// Probability of a hanging (stem-up) pose instead of a uniform one.
    pub hang_bias: f64,
    pub max_hang_tilt_deg: f64,
    pub leaf_count: (u32, u32),
    pub leaf_extent_m: (f64, f64),
    pub light_intensity: (f64, f64),
    pub ambient: (f64, f64),
    pub maturity: (f64, f64),
    /// Scale of the background color/noise randomization: 1 spans the full
    /// palette, 0 pins every scene to the same mid-tone backdrop.
    pub background_variation: f64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_width: 416,
            image_height: 416,
            fov_deg: 55.0,
            berry_count: (1, 8),
            berry_h_m: (0.02, 0.05),
            berry_w_m: (0.015, 0.04),
            wl_jitter: 0.1,
            camera_distance_m: (0.2, 0.8),
            camera_elevation_deg: (-15.0, 40.0),
            cluster_radius_m: 0.05,
            hang_bias: 0.6,
            max_hang_tilt_deg: 35.0,
            leaf_count: (0, 4),
            leaf_extent_m: (0.02, 0.06),
            light_intensity: (0.6, 1.1),
            ambient: (0.25, 0.45),
            maturity: (0.0, 1.0),
            background_variation: 1.0,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        fn range_ok(name: &str, lo: f64, hi: f64, positive: bool) -> Result<(), SynthError> {
            if lo > hi {
                return Err(SynthError::BadConfig(format!("{name}: min {lo} > max {hi}")));
            }
            if positive && lo <= 0.0 {
                return Err(SynthError::BadConfig(format!("{name}: must be positive")));
            }
            Ok(())
        }
        if self.berry_count.0 > self.berry_count.1 {
            return Err(SynthError::BadConfig(format!(
                "berry_count: min {} > max {}",
                self.berry_count.0, self.berry_count.1
            )));
        }
        if self.leaf_count.0 > self.leaf_count.1 {
            return Err(SynthError::BadConfig("leaf_count: min > max".into()));
        }
        range_ok("berry_h_m", self.berry_h_m.0, self.berry_h_m.1, true)?;
        range_ok("berry_w_m", self.berry_w_m.0, self.berry_w_m.1, true)?;
        range_ok(
            "camera_distance_m",
            self.camera_distance_m.0,
            self.camera_distance_m.1,
            true,
        )?;
        range_ok(
            "camera_elevation_deg",
            self.camera_elevation_deg.0,
            self.camera_elevation_deg.1,
            false,
        )?;
        range_ok("light_intensity", self.light_intensity.0, self.light_intensity.1, true)?;
        range_ok("ambient", self.ambient.0, self.ambient.1, true)?;
        range_ok("maturity", self.maturity.0, self.maturity.1, false)?;
        range_ok("leaf_extent_m", self.leaf_extent_m.0, self.leaf_extent_m.1, true)?;
        if !(0.0..=1.0).contains(&self.hang_bias) {
            return Err(SynthError::BadConfig("hang_bias: must lie in [0, 1]".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(SynthError::BadConfig("train_fraction: must lie in (0, 1)".into()));
        }
        if self.cluster_radius_m
            >= (self.camera_distance_m.1 - self.camera_distance_m.0) / 2.0
                + self.camera_distance_m.0
        {
            return Err(SynthError::BadConfig(
                "cluster_radius_m: too large for the camera distance range".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let fx = (self.image_width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics::new(
            fx,
            fx,
            (self.image_width - 1) as f64 / 2.0,
            (self.image_height - 1) as f64 / 2.0,
            self.image_width,
            self.image_height,
        )
        .expect("derived intrinsics are valid")
    }
}

#[derive(Debug, Clone)]
pub struct BerrySpec {
    pub size: Size3D,
    pub pose_world: Pose,
    pub maturity: f64,
    /// Per-berry albedo perturbation.
    pub color_jitter: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct LeafSpec {
    pub center: Vec3,
    pub rotation: Rotation,
    pub extent: (f64, f64),
    pub albedo: [f32; 3],
}

#[derive(Debug, Clone)]
pub struct BackgroundSpec {
    pub top: [f32; 3],
    pub bottom: [f32; 3],
    pub noise_amp: f32,
    pub noise_seed: u32,
}

/// A fully sampled scene: deterministic input to [`render_scene`].
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub berries: Vec<BerrySpec>,
    pub leaves: Vec<LeafSpec>,
    /// Unit direction the light travels (downward-ish).
    pub light_dir: Vec3,
    pub light_intensity: f64,
    pub ambient: f64,
    /// World-from-camera pose.
    pub camera_world: Pose,
    pub intrinsics: CameraIntrinsics,
    pub background: BackgroundSpec,
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    Rotation::from_wxyz(
        a * (std::f64::consts::TAU * u2).sin(),
        a * (std::f64::consts::TAU * u2).cos(),
        b * (std::f64::consts::TAU * u3).sin(),
        b * (std::f64::consts::TAU * u3).cos(),
    )
    .expect("uniform quaternion is unit")
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn look_at_camera(eye: Vec3, target: Vec3) -> Pose {
    let up = Vec3::new(0.0, 1.0, 0.0);
    let z = (target - eye).normalized().expect("eye != target");
    let x = z.cross(up).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0));
    let y = z.cross(x);
    Pose::new(Rotation::from_matrix(&Mat3::from_cols(x, y, z)), eye)
}

/// Samples a scene. Deterministic under `seed`: berry count uniform in the
/// configured range, sizes log-uniform, orientations uniform on SO(3) with
/// a configurable bias toward hanging poses, light from the upper
/// hemisphere, camera in a look-at cone at a distance keeping every berry
/// within the configured range.
pub fn sample_scene(config: &SynthConfig, seed: u64) -> Result<SceneSpec, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let count = rng.random_range(config.berry_count.0..=config.berry_count.1) as usize;
    let mut berries: Vec<BerrySpec> = Vec::with_capacity(count);
    let mut positions: Vec<(Vec3, f64)> = Vec::new();
    for _ in 0..count {
        let h = log_uniform(&mut rng, config.berry_h_m.0, config.berry_h_m.1);
        let w = log_uniform(&mut rng, config.berry_w_m.0, config.berry_w_m.1);
        let l = (w * rng.random_range(1.0 - config.wl_jitter..=1.0 + config.wl_jitter))
            .max(config.berry_w_m.0 * 0.5);
        let size = Size3D::new(h, w, l).expect("sampled sizes are positive");
        let radius = 0.5 * size.diagonal();

        // keep some separation between berries, give up after a few tries
        // (contact means occlusion, which is wanted occasionally)
        let mut pos = Vec3::ZERO;
        for attempt in 0..40 {
            let r = config.cluster_radius_m;
            pos = Vec3::new(
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
            );
            let ok = positions
                .iter()
                .all(|&(p, pr)| (p - pos).norm() > 0.7 * (pr + radius));
            if ok || attempt == 39 {
                break;
            }
        }
        positions.push((pos, radius));

        let rotation = if rng.random::<f64>() < config.hang_bias {
            let spin = Rotation::from_axis_angle(
                Vec3::new(0.0, 1.0, 0.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
            .unwrap();
            let tilt_angle = rng.random_range(0.0..config.max_hang_tilt_deg.max(1e-9))
                .to_radians();
            let tilt_dir = rng.random_range(0.0..std::f64::consts::TAU);
            let tilt = Rotation::from_axis_angle(
                Vec3::new(tilt_dir.cos(), 0.0, tilt_dir.sin()),
                tilt_angle,
            )
            .unwrap();
            tilt.compose(&spin)
        } else {
            uniform_rotation(&mut rng)
        };

        berries.push(BerrySpec {
            size,
            pose_world: Pose::new(rotation, pos),
            maturity: rng.random_range(config.maturity.0..=config.maturity.1),
            color_jitter: [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ],
        });
    }

    // light from the upper hemisphere, traveling downward
    let azim = rng.random_range(0.0..std::f64::consts::TAU);
    let elev = rng.random_range(0.2..1.4f64); // radians above horizon
    let source = Vec3::new(
        elev.cos() * azim.cos(),
        elev.sin(),
        elev.cos() * azim.sin(),
    );
    let light_dir = -source;
    let light_intensity = rng.random_range(config.light_intensity.0..=config.light_intensity.1);
    let ambient = rng.random_range(config.ambient.0..=config.ambient.1);

    // camera on a look-at cone; per-berry distance stays in range because
    // the sampled center distance is shrunk by the cluster extent
    let spread = positions
        .iter()
        .map(|(p, r)| p.norm() + r)
        .fold(0.0f64, f64::max);
    let lo = (config.camera_distance_m.0 + spread).min(config.camera_distance_m.1);
    let hi = (config.camera_distance_m.1 - spread).max(lo);
    let dist = rng.random_range(lo..=hi);
    let azim = rng.random_range(0.0..std::f64::consts::TAU);
    let elev = rng
        .random_range(config.camera_elevation_deg.0..=config.camera_elevation_deg.1)
        .to_radians();
    let eye = Vec3::new(
        dist * elev.cos() * azim.cos(),
        dist * elev.sin(),
        dist * elev.cos() * azim.sin(),
    );
    let target = Vec3::new(
        rng.random_range(-0.01..0.01),
        rng.random_range(-0.01..0.01),
        rng.random_range(-0.01..0.01),
    );
    let camera_world = look_at_camera(eye, target);

    // leaf occluders drift from a berry toward the camera
    let leaf_count = rng.random_range(config.leaf_count.0..=config.leaf_count.1) as usize;
    let mut leaves = Vec::with_capacity(leaf_count);
    for _ in 0..leaf_count {
        let anchor = if berries.is_empty() {
            Vec3::ZERO
        } else {
            let i = rng.random_range(0..berries.len());
            berries[i].pose_world.translation
        };
        let toward_cam = (eye - anchor).normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0));
        let center = anchor
            + toward_cam * rng.random_range(0.03..0.12)
            + Vec3::new(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
            );
        // mostly facing the camera so the quad is visible
        let facing = Rotation::from_matrix(&{
            let n = toward_cam;
            let x = n
                .cross(Vec3::new(0.0, 1.0, 0.0))
                .normalized()
                .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
            let z = x.cross(n);
            Mat3::from_cols(x, n, z)
        });
        let wobble = Rotation::from_axis_angle(
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(0.0..0.9),
        )
        .unwrap_or(Rotation::IDENTITY);
        leaves.push(LeafSpec {
            center,
            rotation: wobble.compose(&facing),
            extent: (
                rng.random_range(config.leaf_extent_m.0..=config.leaf_extent_m.1),
                rng.random_range(config.leaf_extent_m.0..=config.leaf_extent_m.1),
            ),
            albedo: [
                rng.random_range(0.06..0.16),
                rng.random_range(0.35..0.60),
                rng.random_range(0.05..0.15),
            ],
        });
    }

    // background ranges shrink toward their midpoints as the variation
    // knob goes to zero
    let bv = config.background_variation.clamp(0.0, 1.0) as f32;
    let squeeze = |lo: f32, hi: f32, u: f32| {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * bv;
        mid - half + 2.0 * half * u
    };
    let background = BackgroundSpec {
        top: [
            squeeze(0.08, 0.30, rng.random()),
            squeeze(0.12, 0.35, rng.random()),
            squeeze(0.05, 0.20, rng.random()),
        ],
        bottom: [
            squeeze(0.05, 0.25, rng.random()),
            squeeze(0.08, 0.30, rng.random()),
            squeeze(0.04, 0.18, rng.random()),
        ],
        noise_amp: squeeze(0.03, 0.15, rng.random()),
        noise_seed: rng.random(),
    };

    Ok(SceneSpec {
        berries,
        leaves,
        light_dir,
        light_intensity,
        ambient,
        camera_world,
        intrinsics: config.intrinsics(),
        background,
    })
}

fn hash2(x: u32, y: u32, seed: u32) -> f32 {
    let mut h = x
        .wrapping_mul(0x85EB_CA6B)
        .wrapping_add(y.wrapping_mul(0xC2B2_AE35))
        .wrapping_add(seed.wrapping_mul(0x27D4_EB2F));
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    h = h.wrapping_mul(0x297A_2D39);
    h ^= h >> 15;
    (h as f32 / u32::MAX as f32) * 2.0 - 1.0
}

fn berry_albedo(maturity: f64, jitter: [f64; 3]) -> [f64; 3] {
    let green = [0.20, 0.50, 0.12];
    let red = [0.80, 0.10, 0.10];
    [
        green[0] + (red[0] - green[0]) * maturity + jitter[0],
        green[1] + (red[1] - green[1]) * maturity + jitter[1],
        green[2] + (red[2] - green[2]) * maturity + jitter[2],
    ]
}

/// Rasterizes a scene. Every berry whose center projects inside the image
/// is annotated regardless of occlusion, carrying the fraction of its
/// silhouette that stayed visible.
pub fn render_scene(spec: &SceneSpec) -> dataset::SampleRecord {
    let k = &spec.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let mut fb = raster::FrameBuffers::new(w, h);

    // background gradient + value noise
    for y in 0..h {
        let t = y as f32 / (h - 1).max(1) as f32;
        for x in 0..w {
            let n = 1.0 + spec.background.noise_amp * hash2(x as u32, y as u32, spec.background.noise_seed);
            let pix = y * w + x;
            for c in 0..3 {
                let v = (spec.background.top[c] * (1.0 - t) + spec.background.bottom[c] * t) * n;
                fb.color[pix][c] = v.clamp(0.0, 1.0);
            }
        }
    }

    let cam_inv = spec.camera_world.inverse();
    let unit = mesh::unit_berry(14, 18);
    let shading = raster::Shading {
        light_dir: spec.light_dir,
        intensity: spec.light_intensity,
        ambient: spec.ambient,
        double_sided: false,
    };

    // berries (instance ids 1..=n)
    let mut berry_cam_meshes: Vec<(Vec<Vec3>, &BerrySpec)> = Vec::new();
    for (i, berry) in spec.berries.iter().enumerate() {
        let scale = Vec3::new(0.5 * berry.size.w, 0.5 * berry.size.h, 0.5 * berry.size.l);
        let world: Vec<Vec3> = unit
            .vertices
            .iter()
            .map(|v| {
                berry
                    .pose_world
                    .apply(Vec3::new(v.x * scale.x, v.y * scale.y, v.z * scale.z))
            })
            .collect();
        let normals = mesh::averaged_normals(&world, &unit.tris);
        let cam: Vec<Vec3> = world.iter().map(|&p| cam_inv.apply(p)).collect();
        let base = berry_albedo(berry.maturity, berry.color_jitter);
        let albedo: Vec<[f32; 3]> = (0..world.len())
            .map(|vi| {
                let speckle = 1.0 + 0.08 * hash2(vi as u32, i as u32, spec.background.noise_seed);
                [
                    (base[0] as f32 * speckle).clamp(0.0, 1.0),
                    (base[1] as f32 * speckle).clamp(0.0, 1.0),
                    (base[2] as f32 * speckle).clamp(0.0, 1.0),
                ]
            })
            .collect();
        raster::raster_mesh(
            &mut fb,
            k,
            &cam,
            &normals,
            &albedo,
            &unit.tris,
            (i + 1) as u16,
            &shading,
        );
        berry_cam_meshes.push((cam, berry));
    }

    // leaves are occluders, not instances: id stays 0
    let leaf_shading = raster::Shading { double_sided: true, ..shading };
    for leaf in &spec.leaves {
        let quad = mesh::leaf_quad(leaf.extent);
        let pose = Pose::new(leaf.rotation, leaf.center);
        let world: Vec<Vec3> = quad.vertices.iter().map(|&v| pose.apply(v)).collect();
        let normal = leaf.rotation.apply(Vec3::new(0.0, 1.0, 0.0));
        let normals = vec![normal; world.len()];
        let cam: Vec<Vec3> = world.iter().map(|&p| cam_inv.apply(p)).collect();
        let albedo = vec![leaf.albedo; world.len()];
        raster::raster_mesh(&mut fb, k, &cam, &normals, &albedo, &quad.tris, 0, &leaf_shading);
    }

    // annotations: center must project inside the image; occlusion only
    // affects the visible fraction, never membership
    let mut annotations = Vec::new();
    for (i, (cam_verts, berry)) in berry_cam_meshes.iter().enumerate() {
        let pose_cam = cam_inv.compose(&berry.pose_world);
        let Ok((u, v)) = k.project(pose_cam.translation) else {
            continue;
        };
        if !k.contains(u, v) {
            continue;
        }
        let solo = raster::solo_coverage(k, w, h, cam_verts, &unit.tris);
        let visible = fb.id.iter().filter(|&&id| id == (i + 1) as u16).count();
        let visible_fraction = if solo == 0 {
            0.0
        } else {
            visible as f64 / solo as f64
        };
        annotations.push(dataset::Annotation {
            box3d: OrientedBox3D::new(pose_cam, berry.size),
            maturity: berry.maturity,
            visible_fraction,
        });
    }

    dataset::SampleRecord::from_framebuffers(fb, annotations, *k)
}
