//! Dataset I/O, augmentation, and the training loop (single-stage and
//! two-stage freeze/fine-tune schedules), with checkpointing and
//! line-delimited JSON metrics.

mod augment;
mod pretrain;

pub use augment::{augment_image, AugmentConfig, AugmentedImage, PixelAffine};
pub use pretrain::{pretrain_2d, Pretrain2dOutcome};

use crate::checkpoint::{self, CheckpointError, CheckpointKind};
use crate::config::AppConfig;
use crate::formats::{self, FormatError, ManifestFile, Split};
use crate::network::{
    batch_to_grids, grid_grad_to_array, Model, NetworkError,
};
use berrypose_core::codec::{
    AnchorSet, CodecError, ConfidenceParams, GridSpec, MeanSize,
};
use berrypose_core::geometry::{CameraIntrinsics, OrientedBox3D};
use berrypose_core::loss::{
    encode_orbit, symmetric_loss_grad, LossBreakdown, LossContext, LossWeights, SymInstance,
};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: String, reason: String },
    #[error("train config: {0}")]
    BadTrainConfig(String),
    #[error("dataset has no {0:?} samples")]
    EmptySplit(Split),
    #[error("non-finite loss at epoch {epoch}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Option<PathBuf>,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

/// An indexed dataset rooted at a manifest.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: ManifestFile,
}

/// One fully loaded sample.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Array3<f32>,
    pub intrinsics: CameraIntrinsics,
    /// `(box, maturity, visible_fraction)` per instance.
    pub instances: Vec<(OrientedBox3D, f64, f64)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset, PipelineError> {
        let manifest_path = root.join("manifest.json");
        let manifest: ManifestFile = formats::read_json(&manifest_path)?;
        manifest.validate(&manifest_path)?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sample_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.samples[index].dir)
    }

    pub fn mean_size(&self) -> Result<MeanSize, CodecError> {
        MeanSize::new(
            self.manifest.mean_size_hwl[0],
            self.manifest.mean_size_hwl[1],
            self.manifest.mean_size_hwl[2],
        )
    }

    /// Annotations only (no image decode) — enough for anchor fitting.
    pub fn load_annotations(
        &self,
        index: usize,
    ) -> Result<(CameraIntrinsics, Vec<(OrientedBox3D, f64, f64)>), PipelineError> {
        let path = self.sample_dir(index).join("ann.json");
        let ann: formats::AnnotationFile = formats::read_json(&path)?;
        let validated = ann.validate(&path)?;
        Ok((validated.intrinsics, validated.instances))
    }

    pub fn load_record(&self, index: usize) -> Result<LoadedRecord, PipelineError> {
        let (intrinsics, instances) = self.load_annotations(index)?;
        let path = self.sample_dir(index).join("rgb.png");
        let img = image::open(&path)
            .map_err(|e| PipelineError::Image {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
            .into_rgb8();
        if img.width() != self.manifest.image_width || img.height() != self.manifest.image_height {
            return Err(PipelineError::Image {
                path: path.display().to_string(),
                reason: format!(
                    "image is {}x{}, manifest says {}x{}",
                    img.width(),
                    img.height(),
                    self.manifest.image_width,
                    self.manifest.image_height
                ),
            });
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut image = Array3::<f32>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    image[(c, y, x)] = p[c] as f32 / 255.0;
                }
            }
        }
        Ok(LoadedRecord { image, intrinsics, instances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Train everything for the full run.
    Single,
    /// Train everything until `freeze_at_epoch`, then freeze the backbone
    /// and fine-tune the head for the remaining epochs.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeightsConfig {
    pub coord: f64,
    pub dim: f64,
    pub conf: f64,
    pub conf_no: f64,
}

impl Default for LossWeightsConfig {
    fn default() -> Self {
        LossWeightsConfig { coord: 1.0, dim: 5.0, conf: 5.0, conf_no: 0.1 }
    }
}

impl From<LossWeightsConfig> for LossWeights {
    fn from(c: LossWeightsConfig) -> LossWeights {
        LossWeights { coord: c.coord, dim: c.dim, conf: c.conf, conf_no: c.conf_no }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub freeze_at_epoch: usize,
    pub augment: AugmentConfig,
    pub loss_weights: LossWeightsConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Worker threads for loading/augmentation; 0 uses the global pool.
    pub workers: usize,
    /// Batches of unaugmented training images used to recompute batch-norm
    /// running statistics before the backbone freezes and before the final
    /// checkpoint (0 disables). Small-batch training leaves noisy running
    /// estimates; deployment checkpoints get exact averages instead.
    pub bn_recalibration_batches: usize,
    /// Epochs during which each instance is supervised at one
    /// deterministic, image-derived spin of its symmetry orbit instead of
    /// the orbit minimum. While predictions are noisy the orbit argmin
    /// flips between spins and the conflicting vertex targets average into
    /// a shrunken constellation; anchoring the early phase to a canonical
    /// spin removes that churn. 0 uses the full orbit from the first step.
    pub sym_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 600,
            learning_rate: 1e-4,
            decay_epochs: vec![120, 240],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Single,
            freeze_at_epoch: 120,
            augment: AugmentConfig::default(),
            loss_weights: LossWeightsConfig::default(),
            seed: 0,
            checkpoint_every: 50,
            workers: 0,
            bn_recalibration_batches: 32,
            sym_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::BadTrainConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(PipelineError::BadTrainConfig("epochs must be >= 1".into()));
        }
        let mut last = None;
        for &d in &self.decay_epochs {
            if d >= self.epochs {
                return Err(PipelineError::BadTrainConfig(format!(
                    "decay epoch {d} is not below total epochs {}",
                    self.epochs
                )));
            }
            if let Some(prev) = last {
                if d <= prev {
                    return Err(PipelineError::BadTrainConfig(
                        "decay_epochs must be strictly increasing".into(),
                    ));
                }
            }
            last = Some(d);
        }
        if self.schedule == Schedule::TwoStage && self.freeze_at_epoch >= self.epochs {
            return Err(PipelineError::BadTrainConfig(
                "freeze_at_epoch must be below total epochs".into(),
            ));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-epoch metrics line, also the schema of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub backbone_frozen: bool,
    pub coord: f64,
    pub dim: f64,
    pub conf: f64,
    pub conf_no: f64,
    pub total: f64,
    pub skipped_outside: usize,
    pub skipped_collisions: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub history: Vec<EpochStats>,
    pub anchors: AnchorSet,
}

#[derive(Debug, Default, Clone)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub backbone_init: Option<PathBuf>,
}

/// Keypoint hulls of every train-split instance, for anchor fitting.
pub fn collect_train_hulls(dataset: &Dataset) -> Result<Vec<(f64, f64)>, PipelineError> {
    let mut hulls = Vec::new();
    for i in dataset.indices(Split::Train) {
        let (k, instances) = dataset.load_annotations(i)?;
        for (b, _, _) in instances {
            if let Ok(pts) = k.project_many(&b.keypoints_3d()) {
                let mut arr = [[0.0; 2]; 9];
                for (slot, p) in arr.iter_mut().zip(pts.iter()) {
                    *slot = [p.0, p.1];
                }
                hulls.push(berrypose_core::codec::keypoint_hull(&arr));
            }
        }
    }
    Ok(hulls)
}

/// Fits the anchor set for a dataset: k-means over train-split hulls.
pub fn fit_anchors(dataset: &Dataset, count: usize) -> Result<AnchorSet, PipelineError> {
    let hulls = collect_train_hulls(dataset)?;
    Ok(AnchorSet::kmeans(&hulls, count)?)
}

struct PreparedSample {
    image: Array3<f32>,
    instances: Vec<SymInstance>,
    skipped_outside: usize,
    skipped_collisions: usize,
}

/// The orbit member whose first corner sits at the smallest polar angle
/// around the projected center: a deterministic spin that is a stable
/// function of the view, used to anchor early training.
fn canonical_spin(orbit_kpts: &[[[f64; 2]; 9]]) -> usize {
    let mut best = 0;
    let mut best_angle = f64::INFINITY;
    for (i, kpts) in orbit_kpts.iter().enumerate() {
        let du = kpts[1][0] - kpts[0][0];
        let dv = kpts[1][1] - kpts[0][1];
        let mut a = dv.atan2(du);
        if a < 0.0 {
            a += std::f64::consts::TAU;
        }
        if a < best_angle {
            best_angle = a;
            best = i;
        }
    }
    best
}

/// Augments a record and encodes its instances with their symmetry orbits
/// in image space (orbit keypoints are projected with the original
/// intrinsics, then pushed through the augmentation affine).
fn prepare_sample(
    record: &LoadedRecord,
    aug_cfg: &AugmentConfig,
    grid: &GridSpec,
    anchors: &AnchorSet,
    means: &MeanSize,
    sym_steps: usize,
    canonical_only: bool,
    rng: &mut ChaCha8Rng,
) -> PreparedSample {
    let mut centers = Vec::with_capacity(record.instances.len());
    let mut projectable = Vec::new();
    for (i, (b, _, _)) in record.instances.iter().enumerate() {
        if let Ok(uv) = record.intrinsics.project(b.pose.translation) {
            centers.push(uv);
            projectable.push(i);
        }
    }
    let aug = augment_image(&record.image, &centers, &record.intrinsics, aug_cfg, rng);

    let mut out = PreparedSample {
        image: aug.image,
        instances: Vec::new(),
        skipped_outside: record.instances.len() - projectable.len(),
        skipped_collisions: 0,
    };
    let mut taken = vec![false; grid.slots()];
    for &kept_pos in &aug.kept {
        let inst = projectable[kept_pos];
        let (b, _, _) = &record.instances[inst];
        let mut orbit_kpts: Vec<[[f64; 2]; 9]> = Vec::with_capacity(sym_steps);
        let mut ok = true;
        for member in berrypose_core::geometry::symmetry_expand(b, sym_steps) {
            let mut kpts = [[0.0; 2]; 9];
            match record.intrinsics.project_many(&member.keypoints_3d()) {
                Ok(pts) => {
                    for (slot, p) in kpts.iter_mut().zip(pts.iter()) {
                        let (u, v) = aug.affine.apply(p.0, p.1);
                        *slot = [u, v];
                    }
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
            orbit_kpts.push(kpts);
        }
        if !ok {
            out.skipped_outside += 1;
            continue;
        }
        if canonical_only {
            orbit_kpts = vec![orbit_kpts[canonical_spin(&orbit_kpts)]];
        }
        match encode_orbit(
            &orbit_kpts,
            &b.size,
            grid,
            means,
            &record.intrinsics,
            anchors,
            &mut taken,
        ) {
            Ok(si) => out.instances.push(si),
            Err(berrypose_core::codec::EncodeError::CenterOutsideImage(..)) => {
                out.skipped_outside += 1
            }
            Err(berrypose_core::codec::EncodeError::AnchorCollision(..)) => {
                out.skipped_collisions += 1
            }
            Err(berrypose_core::codec::EncodeError::Geometry(_)) => out.skipped_outside += 1,
        }
    }
    // instances whose center left the frame under the crop
    out.skipped_outside += projectable.len() - aug.kept.len();
    out
}

/// Trains the 6DoF model on a dataset's train split.
pub fn train(
    app: &AppConfig,
    dataset: &Dataset,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome, PipelineError> {
    let cfg = &app.train;
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let grid = app.grid_spec()?;
    let means = dataset.mean_size()?;
    let train_indices = dataset.indices(Split::Train);
    if train_indices.is_empty() {
        return Err(PipelineError::EmptySplit(Split::Train));
    }

    let (mut model, anchors, start_epoch) = match &opts.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let model = checkpoint::restore_model(&ckpt)?;
            let anchors = ckpt.meta.anchor_set()?;
            (model, anchors, ckpt.meta.epoch as usize)
        }
        None => {
            let anchors = fit_anchors(dataset, grid.anchors)?;
            let mut model = Model::build(app.model_config(cfg.seed))?;
            if let Some(path) = &opts.backbone_init {
                let ckpt = checkpoint::load(path)?;
                checkpoint::load_backbone_into(&mut model, &ckpt)?;
            }
            (model, anchors, 0)
        }
    };

    let weights: LossWeights = cfg.loss_weights.into();
    let confidence = ConfidenceParams {
        alpha: app.codec.alpha,
        d_th_px: app.codec.d_th_px,
    };
    let sym_steps = app.codec.symmetry_steps;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;

    let pool = if cfg.workers > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| PipelineError::BadTrainConfig(e.to_string()))?,
        )
    } else {
        None
    };

    let load_calibration_batches = |count: usize| -> Result<Vec<Array4<f32>>, PipelineError> {
        let mut out = Vec::new();
        for chunk in train_indices.chunks(cfg.batch_size).take(count) {
            let images: Vec<Array3<f32>> = chunk
                .par_iter()
                .map(|&idx| dataset.load_record(idx).map(|r| r.image))
                .collect::<Result<_, _>>()?;
            let mut input = Array4::<f32>::zeros((
                images.len(),
                3,
                grid.input_height as usize,
                grid.input_width as usize,
            ));
            for (i, img) in images.iter().enumerate() {
                input.index_axis_mut(Axis(0), i).assign(img);
            }
            out.push(input);
        }
        Ok(out)
    };

    let mut history = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    for epoch in start_epoch..cfg.epochs {
        if cfg.schedule == Schedule::TwoStage {
            let should_freeze = epoch >= cfg.freeze_at_epoch;
            if should_freeze && !model.backbone_frozen() && cfg.bn_recalibration_batches > 0 {
                // freeze well-calibrated statistics into the backbone
                model.recalibrate_bn(&load_calibration_batches(cfg.bn_recalibration_batches)?)?;
            }
            model.set_backbone_frozen(should_freeze);
        }
        let lr = cfg.learning_rate_at(epoch) as f32;

        let mut order = train_indices.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64).wrapping_mul(0xA5A5)));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = LossBreakdown::default();
        let mut batches = 0usize;
        let mut skipped_outside = 0usize;
        let mut skipped_collisions = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let prep = |batch: &[usize]| -> Result<Vec<PreparedSample>, PipelineError> {
                batch
                    .par_iter()
                    .map(|&idx| {
                        let record = dataset.load_record(idx)?;
                        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
                            cfg.seed
                                ^ (epoch as u64).wrapping_mul(0x9E37_79B9)
                                ^ (idx as u64).wrapping_mul(0x85EB_CA77),
                        ));
                        Ok(prepare_sample(
                            &record,
                            &cfg.augment,
                            &grid,
                            &anchors,
                            &means,
                            sym_steps,
                            epoch < cfg.sym_warmup_epochs,
                            &mut rng,
                        ))
                    })
                    .collect()
            };
            let samples = match &pool {
                Some(p) => p.install(|| prep(batch))?,
                None => prep(batch)?,
            };

            let b = samples.len();
            let mut input = Array4::<f32>::zeros((
                b,
                3,
                grid.input_height as usize,
                grid.input_width as usize,
            ));
            for (i, s) in samples.iter().enumerate() {
                input.index_axis_mut(Axis(0), i).assign(&s.image);
                skipped_outside += s.skipped_outside;
                skipped_collisions += s.skipped_collisions;
            }

            let (pred, tape) = model.forward_train(&input)?;
            let grids = batch_to_grids(&pred, &grid);
            let ctx = LossContext {
                grid: &grid,
                means: &means,
                confidence,
                weights,
            };

            let mut dout = Array4::<f32>::zeros(pred.dim());
            let mut batch_loss = LossBreakdown::default();
            for (i, (pg, s)) in grids.iter().zip(samples.iter()).enumerate() {
                let (bd, grad) = symmetric_loss_grad(pg, &s.instances, &ctx);
                batch_loss.coord += bd.coord;
                batch_loss.dim += bd.dim;
                batch_loss.conf += bd.conf;
                batch_loss.conf_no += bd.conf_no;
                batch_loss.total += bd.total;
                let scaled: Vec<f64> = grad.iter().map(|g| g / b as f64).collect();
                dout.index_axis_mut(Axis(0), i)
                    .assign(&grid_grad_to_array(&scaled, &grid));
            }

            if !batch_loss.total.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch, last_good });
            }

            model.zero_grads();
            model.backward(tape, &dout);
            model.sgd_step(lr, cfg.momentum as f32, cfg.weight_decay as f32);

            let inv = 1.0 / b as f64;
            epoch_loss.coord += batch_loss.coord * inv;
            epoch_loss.dim += batch_loss.dim * inv;
            epoch_loss.conf += batch_loss.conf * inv;
            epoch_loss.conf_no += batch_loss.conf_no * inv;
            epoch_loss.total += batch_loss.total * inv;
            batches += 1;
        }

        let inv = 1.0 / batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            learning_rate: lr as f64,
            backbone_frozen: model.backbone_frozen(),
            coord: epoch_loss.coord * inv,
            dim: epoch_loss.dim * inv,
            conf: epoch_loss.conf * inv,
            conf_no: epoch_loss.conf_no * inv,
            total: epoch_loss.total * inv,
            skipped_outside,
            skipped_collisions,
        };
        let line = serde_json::to_string(&stats).expect("stats serialize");
        writeln!(metrics, "{line}").map_err(|e| io_err(&metrics_path, e))?;
        history.push(stats);

        let completed = epoch + 1;
        if completed % cfg.checkpoint_every == 0 || completed == cfg.epochs {
            let path = out_dir.join(format!("ckpt_epoch_{completed:04}.bpck"));
            checkpoint::save(
                &path,
                CheckpointKind::Full,
                &model,
                &grid,
                &anchors,
                &means,
                completed as u32,
                cfg.seed,
                Some(cfg),
                true,
            )?;
            last_good = Some(path);
        }
    }

    if cfg.bn_recalibration_batches > 0 {
        model.recalibrate_bn(&load_calibration_batches(cfg.bn_recalibration_batches)?)?;
    }

    let final_path = out_dir.join("final.bpck");
    checkpoint::save(
        &final_path,
        CheckpointKind::Full,
        &model,
        &grid,
        &anchors,
        &means,
        cfg.epochs as u32,
        cfg.seed,
        Some(cfg),
        true,
    )?;
    Ok(TrainOutcome { final_checkpoint: final_path, history, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AppConfig;
    use crate::synthgen::{generate_dataset, SynthConfig};

    fn desk_synth() -> SynthConfig {
        SynthConfig {
            image_width: 96,
            image_height: 96,
            fov_deg: 40.0,
            berry_count: (1, 2),
            camera_distance_m: (0.22, 0.4),
            cluster_radius_m: 0.03,
            leaf_count: (0, 1),
            ..SynthConfig::default()
        }
    }

    fn desk_app() -> AppConfig {
        let mut app = AppConfig::default();
        app.grid.input_width = 96;
        app.grid.input_height = 96;
        app.grid.anchors = 2;
        app.model.channels = vec![4, 8, 8, 16, 16, 16];
        app.synth = desk_synth();
        app.codec.d_th_px = 12.0;
        app.train = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        app
    }

    #[test]
    fn fresh_dataset_loads_without_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(6, dir.path(), &desk_synth(), 5).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.manifest.count, 6);
        for i in 0..6 {
            let rec = ds.load_record(i).unwrap();
            assert_eq!(rec.image.dim(), (3, 96, 96));
        }
        let train = ds.indices(Split::Train).len();
        let test = ds.indices(Split::Test).len();
        assert_eq!(train + test, 6);
    }

    #[test]
    fn corrupted_annotation_is_rejected_with_field() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(2, dir.path(), &desk_synth(), 8).unwrap();
        let ann_path = dir.path().join("sample_00000/ann.json");
        let mut ann: crate::formats::AnnotationFile =
            crate::formats::read_json(&ann_path).unwrap();
        if ann.instances.is_empty() {
            return; // no instance in this draw; nothing to corrupt
        }
        ann.instances[0].size_hwl[0] = -1.0;
        crate::formats::write_json(&ann_path, &ann).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let err = ds.load_record(0).unwrap_err().to_string();
        assert!(err.contains("size_hwl"), "{err}");
    }

    #[test]
    fn learning_rate_schedule_decays_tenfold() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            decay_epochs: vec![1],
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!((cfg.learning_rate_at(0) - 1e-3).abs() < 1e-15);
        assert!((cfg.learning_rate_at(1) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn decay_epochs_must_increase_and_stay_below_total() {
        let mut cfg = TrainConfig { epochs: 10, decay_epochs: vec![3, 3], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.decay_epochs = vec![3, 12];
        assert!(cfg.validate().is_err());
        cfg.decay_epochs = vec![3, 7];
        assert!(cfg.validate().is_ok());
    }
}
