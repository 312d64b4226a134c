//! Dataset-level evaluation: inference, PnP, symmetric matching, the eight
//! AP numbers and inference timing.
//!
//! Timing covers forward + decode + NMS + PnP per image (model runtime);
//! image decoding and disk I/O happen before the clock starts.

use crate::checkpoint;
use crate::config::{AppConfig, EvalSection};
use crate::formats::{ApEntry, EvalReportFile, Split};
use crate::network::{batch_to_grids, Model};
use crate::pipeline::{Dataset, PipelineError};
use berrypose_core::codec::{self, GridSpec, MeanSize};
use berrypose_core::eval::{
    dataset_average_precision, match_with_scores, score_matrix, EvalDetection, ImageMatches,
    MatchCriterion,
};
use berrypose_core::geometry::OrientedBox3D;
use berrypose_core::pnp::{solve_pnp, Correspondences};
use ndarray::{Array4, Axis};
use std::path::Path;
use std::time::Instant;

pub const IOU_THRESHOLDS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];
/// `(translation threshold m, rotation threshold deg)` pairs.
pub const POSE_THRESHOLDS: [(f64, f64); 4] =
    [(0.02, 20.0), (0.02, 10.0), (0.01, 20.0), (0.01, 10.0)];

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// `(threshold, AP fraction)` per IoU threshold.
    pub ap_iou3d: Vec<(f64, Option<f64>)>,
    /// `((t_thresh_m, r_thresh_deg), AP fraction)` per pose threshold pair.
    pub ap_pose: Vec<((f64, f64), Option<f64>)>,
    pub mean_latency_ms: f64,
    pub fps: f64,
    pub images: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn to_file(&self) -> EvalReportFile {
        EvalReportFile {
            ap_iou3d: self
                .ap_iou3d
                .iter()
                .map(|(t, ap)| ApEntry {
                    threshold: format!("{t:.2}"),
                    ap_percent: ap.map(|v| v * 100.0),
                })
                .collect(),
            ap_pose: self
                .ap_pose
                .iter()
                .map(|((t, r), ap)| ApEntry {
                    threshold: format!("{:.0}cm_{r:.0}deg", t * 100.0),
                    ap_percent: ap.map(|v| v * 100.0),
                })
                .collect(),
            mean_latency_ms: self.mean_latency_ms,
            fps: self.fps,
            images: self.images,
            detections: self.detections,
        }
    }

    /// Human-readable two-table summary.
    pub fn table(&self) -> String {
        let fmt = |ap: &Option<f64>| match ap {
            Some(v) => format!("{:>8.2}", v * 100.0),
            None => format!("{:>8}", "N/A"),
        };
        let mut s = String::new();
        s.push_str("AP of 3D IoU (%)\n  threshold ");
        for (t, _) in &self.ap_iou3d {
            s.push_str(&format!("{t:>8.2}"));
        }
        s.push_str("\n  AP        ");
        for (_, ap) in &self.ap_iou3d {
            s.push_str(&fmt(ap));
        }
        s.push_str("\n\nAP of pose error (%)\n  threshold ");
        for ((t, r), _) in &self.ap_pose {
            s.push_str(&format!("{:>10}", format!("({:.0}cm,{r:.0}°)", t * 100.0)));
        }
        s.push_str("\n  AP        ");
        for (_, ap) in &self.ap_pose {
            s.push_str(&format!("{:>10}", fmt(ap).trim()));
        }
        s.push_str(&format!(
            "\n\nmean latency {:.2} ms ({:.1} FPS) over {} images, {} detections\n",
            self.mean_latency_ms, self.fps, self.images, self.detections
        ));
        s
    }
}

/// One image's worth of evaluation inputs.
pub type Scene = (Vec<EvalDetection>, Vec<OrientedBox3D>);

/// Computes all eight AP numbers from per-image detections and ground
/// truths. Pure and deterministic; used both by [`evaluate`] and by tests
/// feeding synthetic prediction sets.
pub fn evaluate_scenes(scenes: &[Scene], sym_steps: usize) -> (Vec<(f64, Option<f64>)>, Vec<((f64, f64), Option<f64>)>) {
    // score matrices are criterion-independent: compute once per image
    let matrices: Vec<_> = scenes
        .iter()
        .map(|(dets, gts)| score_matrix(dets, gts, sym_steps))
        .collect();
    let gt_counts: Vec<usize> = scenes.iter().map(|(_, gts)| gts.len()).collect();

    let ap_for = |criterion: MatchCriterion| -> Option<f64> {
        let matches: Vec<ImageMatches> = scenes
            .iter()
            .zip(matrices.iter())
            .map(|((dets, gts), m)| match_with_scores(dets, gts.len(), m, criterion))
            .collect();
        let pairs: Vec<(&[EvalDetection], &ImageMatches)> = scenes
            .iter()
            .zip(matches.iter())
            .map(|((dets, _), m)| (dets.as_slice(), m))
            .collect();
        dataset_average_precision(&pairs, &gt_counts, criterion)
    };

    let ap_iou = IOU_THRESHOLDS
        .iter()
        .map(|&t| (t, ap_for(MatchCriterion::Iou3d { threshold: t })))
        .collect();
    let ap_pose = POSE_THRESHOLDS
        .iter()
        .map(|&(t, r)| {
            (
                (t, r),
                ap_for(MatchCriterion::Pose { max_t_m: t, max_r_deg: r }),
            )
        })
        .collect();
    (ap_iou, ap_pose)
}

/// Decodes one prediction tensor into evaluation detections: threshold,
/// NMS, then PnP per survivor. Detections whose PnP fails stay in the list
/// without a pose (they rank as false positives).
pub fn detections_from_prediction(
    grid_pred: &codec::GridTensor,
    grid: &GridSpec,
    means: &MeanSize,
    conf_threshold: f64,
    nms_iou: f64,
    intrinsics: &berrypose_core::geometry::CameraIntrinsics,
) -> Result<Vec<codec::Detection>, PipelineError> {
    let decoded = codec::decode(grid_pred, grid, means, conf_threshold)?;
    let mut kept = codec::nms(decoded, nms_iou);
    for det in kept.iter_mut() {
        let c = Correspondences::from_keypoints(&det.keypoints, &det.size);
        det.pose = solve_pnp(&c, intrinsics).ok();
    }
    Ok(kept)
}

fn to_eval_detections(dets: &[codec::Detection]) -> Vec<EvalDetection> {
    dets.iter()
        .map(|d| EvalDetection {
            confidence: d.confidence,
            box3d: d.pose.map(|p| OrientedBox3D::new(p, d.size)),
        })
        .collect()
}

/// Runs a checkpoint over a dataset split and produces the full report.
pub fn evaluate(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    app: &AppConfig,
    split: Split,
) -> Result<EvalReport, PipelineError> {
    let (model, grid, _anchors, means, _meta) = checkpoint::restore_runtime(checkpoint_path)?;
    let dataset = Dataset::load(dataset_dir)?;
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(PipelineError::EmptySplit(split));
    }
    evaluate_model(&model, &grid, &means, &dataset, &indices, &app.codec, &app.eval)
}

pub fn evaluate_model(
    model: &Model,
    grid: &GridSpec,
    means: &MeanSize,
    dataset: &Dataset,
    indices: &[usize],
    codec_cfg: &crate::config::CodecSection,
    eval_cfg: &EvalSection,
) -> Result<EvalReport, PipelineError> {
    // load first so the clock never sees disk or PNG work
    let records: Vec<_> = indices
        .iter()
        .map(|&i| dataset.load_record(i))
        .collect::<Result<Vec<_>, _>>()?;

    let mut scenes: Vec<Scene> = Vec::with_capacity(records.len());
    let mut total_detections = 0usize;
    let mut elapsed = std::time::Duration::ZERO;

    for (n, record) in records.iter().enumerate() {
        let (_c, h, w) = record.image.dim();
        let mut input = Array4::<f32>::zeros((1, 3, h, w));
        input.index_axis_mut(Axis(0), 0).assign(&record.image);

        if n < eval_cfg.warmup_images.min(records.len().saturating_sub(1)) {
            let _ = model.forward_eval(&input)?;
        }

        let start = Instant::now();
        let pred = model.forward_eval(&input)?;
        let grids = batch_to_grids(&pred, grid);
        let dets = detections_from_prediction(
            &grids[0],
            grid,
            means,
            codec_cfg.conf_threshold,
            codec_cfg.nms_iou_threshold,
            &record.intrinsics,
        )?;
        elapsed += start.elapsed();

        total_detections += dets.len();
        let gts: Vec<OrientedBox3D> = record
            .instances
            .iter()
            .filter(|(_, _, visible)| *visible >= eval_cfg.min_visible_fraction)
            .map(|(b, _, _)| *b)
            .collect();
        scenes.push((to_eval_detections(&dets), gts));
    }

    let (ap_iou3d, ap_pose) = evaluate_scenes(&scenes, codec_cfg.symmetry_steps);
    let mean_latency_ms = elapsed.as_secs_f64() * 1000.0 / records.len() as f64;
    Ok(EvalReport {
        ap_iou3d,
        ap_pose,
        mean_latency_ms,
        fps: 1000.0 / mean_latency_ms,
        images: records.len(),
        detections: total_detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use berrypose_core::geometry::{Pose, Rotation, Size3D};
    use berrypose_core::math::Vec3;

    fn gt_box(x: f64, z: f64) -> OrientedBox3D {
        OrientedBox3D::new(
            Pose::new(
                Rotation::from_axis_angle(Vec3::new(0.2, 1.0, 0.1), 0.5).unwrap(),
                Vec3::new(x, 0.0, z),
            ),
            Size3D::new(0.04, 0.032, 0.03).unwrap(),
        )
    }

    fn perfect_scene(n: usize) -> Scene {
        let gts: Vec<OrientedBox3D> = (0..n).map(|i| gt_box(0.05 * i as f64, 0.5)).collect();
        let dets = gts
            .iter()
            .map(|b| EvalDetection { confidence: 1.0, box3d: Some(*b) })
            .collect();
        (dets, gts)
    }

    #[test]
    fn ground_truth_as_predictions_scores_hundred_everywhere() {
        let scenes: Vec<Scene> = (1..4).map(perfect_scene).collect();
        let (ap_iou, ap_pose) = evaluate_scenes(&scenes, 12);
        for (t, ap) in &ap_iou {
            assert!(
                (ap.unwrap() - 1.0).abs() < 1e-12,
                "IoU {t}: AP {:?}",
                ap
            );
        }
        for ((t, r), ap) in &ap_pose {
            assert!(
                (ap.unwrap() - 1.0).abs() < 1e-12,
                "pose ({t},{r}): AP {:?}",
                ap
            );
        }
    }

    #[test]
    fn perturbed_translation_splits_pose_thresholds() {
        // +1.5 cm on every translation: (2cm, *) passes, (1cm, *) fails
        let gts: Vec<OrientedBox3D> = (0..5).map(|i| gt_box(0.06 * i as f64, 0.5)).collect();
        let dets: Vec<EvalDetection> = gts
            .iter()
            .map(|b| {
                let shifted = OrientedBox3D::new(
                    Pose::new(b.pose.rotation, b.pose.translation + Vec3::new(0.015, 0.0, 0.0)),
                    b.size,
                );
                EvalDetection { confidence: 0.9, box3d: Some(shifted) }
            })
            .collect();
        let scenes = vec![(dets, gts)];
        let (_, ap_pose) = evaluate_scenes(&scenes, 12);
        let by_thresh: std::collections::HashMap<String, Option<f64>> = ap_pose
            .iter()
            .map(|((t, r), ap)| (format!("{t}-{r}"), *ap))
            .collect();
        assert!((by_thresh["0.02-20"].unwrap() - 1.0).abs() < 1e-12);
        assert!((by_thresh["0.02-10"].unwrap() - 1.0).abs() < 1e-12, "rotation is exact");
        assert_eq!(by_thresh["0.01-20"].unwrap(), 0.0);
        assert_eq!(by_thresh["0.01-10"].unwrap(), 0.0);
    }

    #[test]
    fn ap_monotone_across_both_families() {
        // degrade detections progressively and check the required orderings
        let gts: Vec<OrientedBox3D> = (0..8).map(|i| gt_box(0.05 * i as f64, 0.5)).collect();
        let dets: Vec<EvalDetection> = gts
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let off = 0.0025 * i as f64;
                let spin =
                    Rotation::from_axis_angle(Vec3::new(1.0, 0.3, 0.0), 0.04 * i as f64).unwrap();
                EvalDetection {
                    confidence: 1.0 - 0.05 * i as f64,
                    box3d: Some(OrientedBox3D::new(
                        Pose::new(
                            spin.compose(&b.pose.rotation),
                            b.pose.translation + Vec3::new(off, 0.0, 0.0),
                        ),
                        b.size,
                    )),
                }
            })
            .collect();
        let scenes = vec![(dets, gts)];
        let (ap_iou, ap_pose) = evaluate_scenes(&scenes, 12);
        for w in ap_iou.windows(2) {
            assert!(w[0].1.unwrap() >= w[1].1.unwrap() - 1e-12);
        }
        let pose: std::collections::HashMap<String, f64> = ap_pose
            .iter()
            .map(|((t, r), ap)| (format!("{t}-{r}"), ap.unwrap()))
            .collect();
        assert!(pose["0.02-20"] >= pose["0.02-10"] - 1e-12);
        assert!(pose["0.02-20"] >= pose["0.01-20"] - 1e-12);
        assert!(pose["0.01-20"] >= pose["0.01-10"] - 1e-12);
        assert!(pose["0.02-10"] >= pose["0.01-10"] - 1e-12);
    }

    #[test]
    fn empty_gt_reports_na() {
        let scenes = vec![(
            vec![EvalDetection { confidence: 0.5, box3d: Some(gt_box(0.0, 0.4)) }],
            Vec::new(),
        )];
        let (ap_iou, ap_pose) = evaluate_scenes(&scenes, 12);
        assert!(ap_iou.iter().all(|(_, ap)| ap.is_none()));
        assert!(ap_pose.iter().all(|(_, ap)| ap.is_none()));
    }

    #[test]
    fn report_table_and_file_render() {
        let scenes: Vec<Scene> = vec![perfect_scene(2)];
        let (ap_iou3d, ap_pose) = evaluate_scenes(&scenes, 12);
        let report = EvalReport {
            ap_iou3d,
            ap_pose,
            mean_latency_ms: 12.5,
            fps: 1000.0 / 12.5,
            images: 1,
            detections: 2,
        };
        let table = report.table();
        assert!(table.contains("100.00"));
        assert!(table.contains("12.50 ms"));
        let file = report.to_file();
        assert_eq!(file.ap_iou3d.len(), 4);
        assert_eq!(file.ap_pose.len(), 4);
        assert!((file.fps - 80.0).abs() < 1e-9);
    }
}
