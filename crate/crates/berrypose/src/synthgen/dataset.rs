//! Sample records, dataset generation and the point-cloud back-projection.

use super::{raster::FrameBuffers, sample_scene, render_scene, SynthConfig, SynthError};
use crate::formats::{
    write_json, AnnotationFile, ManifestFile, SampleEntry, Split,
};
use berrypose_core::geometry::{CameraIntrinsics, OrientedBox3D};
use berrypose_core::math::Vec3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Annotation {
    /// Camera-frame box.
    pub box3d: OrientedBox3D,
    pub maturity: f64,
    pub visible_fraction: f64,
}

/// One rendered sample: images plus annotations, all in memory.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub width: u32,
    pub height: u32,
    /// Interleaved 8-bit sRGB.
    pub rgb: Vec<u8>,
    /// Meters; 0 marks pixels without a depth reading.
    pub depth_m: Vec<f32>,
    /// Instance ids; 0 is background.
    pub mask: Vec<u16>,
    pub annotations: Vec<Annotation>,
    pub intrinsics: CameraIntrinsics,
}

impl SampleRecord {
    pub fn from_framebuffers(
        fb: FrameBuffers,
        annotations: Vec<Annotation>,
        intrinsics: CameraIntrinsics,
    ) -> SampleRecord {
        let mut rgb = Vec::with_capacity(fb.width * fb.height * 3);
        for px in &fb.color {
            for c in 0..3 {
                // gamma for display; annotations never depend on it
                rgb.push((px[c].powf(1.0 / 2.2) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        SampleRecord {
            width: fb.width as u32,
            height: fb.height as u32,
            rgb,
            depth_m: fb.depth,
            mask: fb.id,
            annotations,
            intrinsics,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io { path: path.display().to_string(), source }
}

/// Writes one sample directory: `rgb.png`, `depth.png` (16-bit
/// millimeters), `mask.png` (16-bit ids) and `ann.json`.
pub fn write_sample(dir: &Path, record: &SampleRecord) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (w, h) = (record.width, record.height);

    let rgb = image::RgbImage::from_raw(w, h, record.rgb.clone())
        .expect("rgb buffer matches dimensions");
    let path = dir.join("rgb.png");
    rgb.save(&path)
        .map_err(|e| io_err(&path, std::io::Error::other(e)))?;

    let depth_mm: Vec<u16> = record
        .depth_m
        .iter()
        .map(|&m| (m * 1000.0).round().clamp(0.0, u16::MAX as f32) as u16)
        .collect();
    let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w, h, depth_mm)
        .expect("depth buffer matches dimensions");
    let path = dir.join("depth.png");
    depth
        .save(&path)
        .map_err(|e| io_err(&path, std::io::Error::other(e)))?;

    let mask = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w, h, record.mask.clone())
        .expect("mask buffer matches dimensions");
    let path = dir.join("mask.png");
    mask.save(&path)
        .map_err(|e| io_err(&path, std::io::Error::other(e)))?;

    let ann = AnnotationFile::from_instances(
        &record.intrinsics,
        record
            .annotations
            .iter()
            .map(|a| (a.box3d, a.maturity, a.visible_fraction)),
    );
    write_json(&dir.join("ann.json"), &ann)?;
    Ok(())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generates `n` samples under `out_dir`, assigns a deterministic
/// train/test split and writes `manifest.json` carrying the mean size of
/// the train split. Samples render in parallel; everything is a pure
/// function of `seed`.
pub fn generate_dataset(
    n: usize,
    out_dir: &Path,
    config: &SynthConfig,
    seed: u64,
) -> Result<ManifestFile, SynthError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let records: Vec<(String, SampleRecord)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sub_seed = splitmix64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let spec = sample_scene(config, sub_seed)?;
            let record = render_scene(&spec);
            let dir_name = format!("sample_{i:05}");
            write_sample(&out_dir.join(&dir_name), &record)?;
            Ok((dir_name, record))
        })
        .collect::<Result<_, SynthError>>()?;

    // deterministic shuffled split
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED));
    order.shuffle(&mut rng);
    let train_count = ((n as f64) * config.train_fraction).round() as usize;
    let mut split = vec![Split::Test; n];
    for &i in order.iter().take(train_count) {
        split[i] = Split::Train;
    }

    // mean size over train-split instances
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (i, (_, record)) in records.iter().enumerate() {
        if split[i] != Split::Train {
            continue;
        }
        for ann in &record.annotations {
            sum[0] += ann.box3d.size.h;
            sum[1] += ann.box3d.size.w;
            sum[2] += ann.box3d.size.l;
            count += 1;
        }
    }
    if count == 0 {
        return Err(SynthError::EmptyTrainSplit);
    }
    let mean_size_hwl = [
        sum[0] / count as f64,
        sum[1] / count as f64,
        sum[2] / count as f64,
    ];

    let manifest = ManifestFile {
        seed,
        count: n,
        image_width: config.image_width,
        image_height: config.image_height,
        mean_size_hwl,
        samples: records
            .iter()
            .enumerate()
            .map(|(i, (dir, _))| SampleEntry { dir: dir.clone(), split: split[i] })
            .collect(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Back-projects every valid depth pixel into the camera frame.
pub fn point_cloud(record: &SampleRecord) -> Vec<Vec3> {
    let mut out = Vec::new();
    let k = &record.intrinsics;
    for y in 0..record.height as usize {
        for x in 0..record.width as usize {
            let z = record.depth_m[y * record.width as usize + x];
            if z > 0.0 {
                out.push(k.back_project(x as f64, y as f64, z as f64));
            }
        }
    }
    out
}

/// Per-sample directory name for index `i`, shared by writer and loaders.
pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Occlusion histogram over a set of visible fractions: five equal bins.
pub fn occlusion_histogram(fractions: impl Iterator<Item = f64>) -> [usize; 5] {
    let mut bins = [0usize; 5];
    for f in fractions {
        let b = ((f * 5.0) as usize).min(4);
        bins[b] += 1;
    }
    bins
}

#[allow(unused)]
fn _unused(p: PathBuf) {}
