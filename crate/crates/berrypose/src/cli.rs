//! The `berrypose` command-line tool: dataset generation, training,
//! evaluation, inference and overlay visualization.

use crate::config::AppConfig;
use crate::formats::{
    self, AnnotationFile, DetectionDto, DetectionsFile, PoseDto, Split,
};
use crate::network::batch_to_grids;
use crate::pipeline::{self, Dataset, TrainOptions};
use crate::synthgen::{self, occlusion_histogram};
use crate::{checkpoint, evalkit, viz};
use anyhow::{bail, Context};
use berrypose_core::geometry::{CameraIntrinsics, OrientedBox3D};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array4;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "berrypose",
    version,
    about = "Single-shot 6DoF pose and 3D size estimation for symmetric fruit"
)]
pub struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true, env = "BERRYPOSE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Base RNG seed (dataset generation, weight init, shuffling).
    #[arg(long, global = true, env = "BERRYPOSE_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset.
    Gen {
        /// Number of samples to generate.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, env = "BERRYPOSE_OUT")]
        out: PathBuf,
    },
    /// Train the 6DoF model on a dataset's train split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, env = "BERRYPOSE_OUT")]
        out: PathBuf,
        /// Resume from a full checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Initialize the backbone from a 2D-pretrained export.
        #[arg(long)]
        backbone_init: Option<PathBuf>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrain the backbone with a temporary 2D detection head.
    Pretrain2d {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, env = "BERRYPOSE_OUT")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint: the eight AP numbers plus timing.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on images and write detection JSON per image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One or more RGB images (dimensions divisible by 32).
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        #[arg(long, env = "BERRYPOSE_OUT")]
        out: PathBuf,
        /// Take intrinsics from this ann.json instead of the image's
        /// sibling (falls back to the configured field of view).
        #[arg(long)]
        intrinsics: Option<PathBuf>,
    },
    /// Draw wireframe overlays of detections and/or ground truth.
    Viz {
        #[arg(long)]
        image: PathBuf,
        /// Detection JSON produced by `infer`.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// ann.json with ground-truth boxes.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, env = "BERRYPOSE_OUT")]
        out: PathBuf,
    },
}

pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut app = AppConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        app.train.seed = seed;
    }
    let seed = cli.seed.unwrap_or(app.train.seed);

    match cli.command {
        Command::Gen { n, out } => cmd_gen(&app, n as usize, &out, seed),
        Command::Train { dataset, out, resume, backbone_init, epochs } => {
            if let Some(e) = epochs {
                retarget_epochs(&mut app, e);
            }
            let ds = Dataset::load(&dataset)?;
            let outcome = pipeline::train(&app, &ds, &out, &TrainOptions { resume, backbone_init })?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "trained {} epochs; final loss {:.4} (coord {:.4}, dim {:.6}, conf {:.4}, no-obj {:.4})",
                    outcome.history.len(),
                    last.total,
                    last.coord,
                    last.dim,
                    last.conf,
                    last.conf_no
                );
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            Ok(())
        }
        Command::Pretrain2d { dataset, out, epochs } => {
            let ds = Dataset::load(&dataset)?;
            let outcome = pipeline::pretrain_2d(&app, &ds, &out, epochs)?;
            if let (Some(first), Some(last)) =
                (outcome.epoch_losses.first(), outcome.epoch_losses.last())
            {
                println!("2d loss: {first:.4} -> {last:.4}");
            }
            println!("backbone export: {}", outcome.backbone_checkpoint.display());
            Ok(())
        }
        Command::Eval { checkpoint, dataset, split, out } => {
            let report = evalkit::evaluate(&checkpoint, &dataset, &app, split.into())?;
            print!("{}", report.table());
            if let Some(path) = out {
                formats::write_json(&path, &report.to_file())?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
        Command::Infer { checkpoint, image, out, intrinsics } => {
            cmd_infer(&app, &checkpoint, &image, &out, intrinsics.as_deref())
        }
        Command::Viz { image, detections, gt, out } => cmd_viz(&image, detections.as_deref(), gt.as_deref(), &out),
    }
}

fn retarget_epochs(app: &mut AppConfig, epochs: usize) {
    app.train.epochs = epochs;
    app.train.decay_epochs.retain(|&d| d < epochs);
    if app.train.freeze_at_epoch >= epochs {
        app.train.freeze_at_epoch = epochs.saturating_sub(1);
    }
}

fn cmd_gen(app: &AppConfig, n: usize, out: &Path, seed: u64) -> anyhow::Result<()> {
    let manifest = synthgen::generate_dataset(n, out, &app.synth, seed)?;
    let mut fractions = Vec::new();
    let mut instances = 0usize;
    for entry in &manifest.samples {
        let ann: AnnotationFile = formats::read_json(&out.join(&entry.dir).join("ann.json"))?;
        instances += ann.instances.len();
        fractions.extend(ann.instances.iter().map(|i| i.visible_fraction));
    }
    let hist = occlusion_histogram(fractions.into_iter());
    println!("manifest: {}", out.join("manifest.json").display());
    println!(
        "samples: {} (train {}, test {}), instances: {instances}",
        manifest.count,
        manifest.split_count(Split::Train),
        manifest.split_count(Split::Test),
    );
    println!(
        "mean size (h, w, l): ({:.4}, {:.4}, {:.4}) m",
        manifest.mean_size_hwl[0], manifest.mean_size_hwl[1], manifest.mean_size_hwl[2]
    );
    println!(
        "visible-fraction histogram [0-.2 | .2-.4 | .4-.6 | .6-.8 | .8-1]: {:?}",
        hist
    );
    Ok(())
}

fn intrinsics_for_image(
    app: &AppConfig,
    image_path: &Path,
    width: u32,
    height: u32,
    explicit: Option<&Path>,
) -> anyhow::Result<CameraIntrinsics> {
    let ann_path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => {
            let sibling = image_path.parent().map(|d| d.join("ann.json"));
            sibling.filter(|p| p.exists())
        }
    };
    if let Some(path) = ann_path {
        let ann: AnnotationFile = formats::read_json(&path)?;
        let v = ann.validate(&path)?;
        return Ok(v.intrinsics);
    }
    // fall back to the configured field of view at this resolution
    let fx = (width as f64 / 2.0) / (app.synth.fov_deg.to_radians() / 2.0).tan();
    CameraIntrinsics::new(
        fx,
        fx,
        (width - 1) as f64 / 2.0,
        (height - 1) as f64 / 2.0,
        width,
        height,
    )
    .map_err(|e| anyhow::anyhow!("cannot derive intrinsics: {e}"))
}

fn cmd_infer(
    app: &AppConfig,
    ckpt_path: &Path,
    images: &[PathBuf],
    out: &Path,
    intrinsics: Option<&Path>,
) -> anyhow::Result<()> {
    let (model, grid, _anchors, means, _meta) = checkpoint::restore_runtime(ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    for path in images {
        let img = image::open(path)
            .with_context(|| format!("reading image {}", path.display()))?
            .into_rgb8();
        let (w, h) = (img.width(), img.height());
        if w % crate::network::STRIDE != 0 || h % crate::network::STRIDE != 0 {
            bail!(
                "{}: image {w}x{h} is not divisible by the stride {}",
                path.display(),
                crate::network::STRIDE
            );
        }
        let k = intrinsics_for_image(app, path, w, h, intrinsics)?;
        let mut input = Array4::<f32>::zeros((1, 3, h as usize, w as usize));
        for y in 0..h as usize {
            for x in 0..w as usize {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    input[(0, c, y, x)] = p[c] as f32 / 255.0;
                }
            }
        }
        let pred = model.forward_eval(&input)?;
        let grids = batch_to_grids(&pred, &grid);
        let dets = evalkit::detections_from_prediction(
            &grids[0],
            &grid,
            &means,
            app.codec.conf_threshold,
            app.codec.nms_iou_threshold,
            &k,
        )?;
        let file = DetectionsFile {
            image: path.display().to_string(),
            detections: dets
                .iter()
                .map(|d| DetectionDto {
                    keypoints: d.keypoints,
                    size_hwl: [d.size.h, d.size.w, d.size.l],
                    confidence: d.confidence,
                    pose: d.pose.as_ref().map(PoseDto::from),
                })
                .collect(),
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".into());
        let out_path = out.join(format!("{stem}.detections.json"));
        formats::write_json(&out_path, &file)?;
        println!("{}: {} detections -> {}", path.display(), file.detections.len(), out_path.display());
    }
    Ok(())
}

fn boxes_from_detections(path: &Path) -> anyhow::Result<Vec<OrientedBox3D>> {
    let file: DetectionsFile = formats::read_json(path)?;
    file.validate(path)?;
    let mut boxes = Vec::new();
    for (i, d) in file.detections.iter().enumerate() {
        if let Some(p) = &d.pose {
            let pose = p.to_pose(path, &format!("detections[{i}].pose"))?;
            let size = berrypose_core::geometry::Size3D::new(
                d.size_hwl[0],
                d.size_hwl[1],
                d.size_hwl[2],
            )
            .map_err(|e| anyhow::anyhow!("{}: detections[{i}].size_hwl: {e}", path.display()))?;
            boxes.push(OrientedBox3D::new(pose, size));
        }
    }
    Ok(boxes)
}

fn cmd_viz(
    image_path: &Path,
    detections: Option<&Path>,
    gt: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut img = image::open(image_path)
        .with_context(|| format!("reading image {}", image_path.display()))?
        .into_rgb8();

    // intrinsics come from the ground-truth file when given, else from a
    // sibling ann.json
    let ann_path = match gt {
        Some(p) => p.to_path_buf(),
        None => image_path
            .parent()
            .map(|d| d.join("ann.json"))
            .filter(|p| p.exists())
            .ok_or_else(|| anyhow::anyhow!("no ann.json found next to the image; pass --gt"))?,
    };
    let ann: AnnotationFile = formats::read_json(&ann_path)?;
    let validated = ann.validate(&ann_path)?;
    let k = validated.intrinsics;

    let mut total = 0;
    if gt.is_some() {
        let gt_boxes: Vec<OrientedBox3D> = validated.instances.iter().map(|(b, _, _)| *b).collect();
        total += viz::draw_boxes(&mut img, &gt_boxes, &k, viz::GROUND_TRUTH_COLOR);
    }
    if let Some(det_path) = detections {
        let boxes = boxes_from_detections(det_path)?;
        total += viz::draw_boxes(&mut img, &boxes, &k, viz::PREDICTION_COLOR);
    }

    img.save(out)
        .with_context(|| format!("writing overlay {}", out.display()))?;
    println!("{} edges drawn -> {}", total, out.display());
    Ok(())
}
