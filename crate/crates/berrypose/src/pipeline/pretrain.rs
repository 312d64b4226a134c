//! Backbone pretraining with a temporary 2D detection head.
//!
//! The 2D boxes are the axis-aligned hulls of the projected keypoints, so a
//! 6DoF dataset pretrains without any external labels (any 2D-box dataset
//! converted to the same manifest layout works too). The temporary head
//! predicts `(t_x, t_y, t_w, t_h, p_o)` per anchor: a sigmoid-bounded
//! center, anchor-relative log sizes and an objectness whose target is the
//! rectangle IoU of the prediction (held constant under differentiation).
//! The exported archive carries only `backbone.*` tensors.

use super::{io_err, splitmix64, Dataset, PipelineError, TrainConfig};
use crate::checkpoint::{self, CheckpointKind};
use crate::config::AppConfig;
use crate::formats::Split;
use crate::network::{Conv2d, Model};
use berrypose_core::codec::{self, AnchorSet, GridSpec};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

const CH2D: usize = 5;

#[derive(Debug, Clone, Copy)]
struct Box2d {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

fn rect_iou(a: &Box2d, b: &Box2d) -> f64 {
    let ax0 = a.cx - a.w / 2.0;
    let ax1 = a.cx + a.w / 2.0;
    let ay0 = a.cy - a.h / 2.0;
    let ay1 = a.cy + a.h / 2.0;
    let bx0 = b.cx - b.w / 2.0;
    let bx1 = b.cx + b.w / 2.0;
    let by0 = b.cy - b.h / 2.0;
    let by1 = b.cy + b.h / 2.0;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

struct Target2d {
    cell_x: usize,
    cell_y: usize,
    anchor: usize,
    values: [f64; CH2D],
    gt: Box2d,
}

/// Derives 2D hull boxes from annotated instances and encodes them on the
/// grid.
fn encode_2d(
    boxes: &[Box2d],
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Vec<Target2d> {
    let stride = grid.stride as f64;
    let mut taken = vec![false; grid.slots()];
    let mut out = Vec::new();
    for b in boxes {
        if b.cx < 0.0
            || b.cx > (grid.input_width - 1) as f64
            || b.cy < 0.0
            || b.cy > (grid.input_height - 1) as f64
        {
            continue;
        }
        let gx = b.cx / stride;
        let gy = b.cy / stride;
        let cell_x = (gx as usize).min(grid.cells_x - 1);
        let cell_y = (gy as usize).min(grid.cells_y - 1);
        for a in anchors.ranked_matches((b.w, b.h)) {
            let slot = grid.slot_index(cell_y, cell_x, a);
            if taken[slot] {
                continue;
            }
            taken[slot] = true;
            let prior = anchors.priors()[a];
            out.push(Target2d {
                cell_x,
                cell_y,
                anchor: a,
                values: [
                    codec::logit(gx - cell_x as f64),
                    codec::logit(gy - cell_y as f64),
                    (b.w.max(1e-6) / prior.0).ln(),
                    (b.h.max(1e-6) / prior.1).ln(),
                    0.0,
                ],
                gt: *b,
            });
            break;
        }
    }
    out
}

/// 2D grid loss and gradient (per sample). Returns (loss, grad) with the
/// gradient laid out like the prediction `(A*5, S_y, S_x)`.
fn loss_2d(
    pred: &ndarray::ArrayView3<f32>,
    targets: &[Target2d],
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> (f64, ndarray::Array3<f32>) {
    let stride = grid.stride as f64;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (w_coord, w_size, w_conf, w_noobj) = (1.0, 1.0, 5.0, 0.1);

    let mut grad = ndarray::Array3::<f32>::zeros(pred.dim());
    let mut responsible = vec![false; grid.slots()];
    let mut loss = 0.0;

    for t in targets {
        responsible[grid.slot_index(t.cell_y, t.cell_x, t.anchor)] = true;
        let at = |ch: usize| pred[(t.anchor * CH2D + ch, t.cell_y, t.cell_x)] as f64;
        let prior = anchors.priors()[t.anchor];

        // center (sigmoid space)
        for ch in 0..2 {
            let sp = sig(at(ch));
            let st = sig(t.values[ch]);
            loss += w_coord * (sp - st).powi(2);
            grad[(t.anchor * CH2D + ch, t.cell_y, t.cell_x)] +=
                (w_coord * 2.0 * (sp - st) * sp * (1.0 - sp)) as f32;
        }
        // sizes (log residuals)
        for ch in 2..4 {
            let d = at(ch) - t.values[ch];
            loss += w_size * d * d;
            grad[(t.anchor * CH2D + ch, t.cell_y, t.cell_x)] += (w_size * 2.0 * d) as f32;
        }
        // confidence toward the decoded IoU (detached)
        let decoded = Box2d {
            cx: (sig(at(0)) + t.cell_x as f64) * stride,
            cy: (sig(at(1)) + t.cell_y as f64) * stride,
            w: prior.0 * at(2).clamp(-20.0, 20.0).exp(),
            h: prior.1 * at(3).clamp(-20.0, 20.0).exp(),
        };
        let c = rect_iou(&decoded, &t.gt);
        let po = sig(at(4));
        loss += w_conf * (c - po).powi(2);
        grad[(t.anchor * CH2D + 4, t.cell_y, t.cell_x)] +=
            (w_conf * 2.0 * (po - c) * po * (1.0 - po)) as f32;
    }

    for cy in 0..grid.cells_y {
        for cx in 0..grid.cells_x {
            for a in 0..grid.anchors {
                if responsible[grid.slot_index(cy, cx, a)] {
                    continue;
                }
                let po = sig(pred[(a * CH2D + 4, cy, cx)] as f64);
                loss += w_noobj * po * po;
                grad[(a * CH2D + 4, cy, cx)] += (w_noobj * 2.0 * po * po * (1.0 - po)) as f32;
            }
        }
    }
    (loss, grad)
}

#[derive(Debug)]
pub struct Pretrain2dOutcome {
    pub backbone_checkpoint: PathBuf,
    pub epoch_losses: Vec<f64>,
}

/// Trains backbone + temporary 2D head on hull boxes and exports the
/// backbone weights for [`super::TrainOptions::backbone_init`].
pub fn pretrain_2d(
    app: &AppConfig,
    dataset: &Dataset,
    out_dir: &Path,
    epochs_override: Option<usize>,
) -> Result<Pretrain2dOutcome, PipelineError> {
    let cfg = TrainConfig {
        epochs: epochs_override.unwrap_or(app.train.epochs),
        ..app.train.clone()
    };
    cfg.validate().or_else(|e| {
        // decay epochs may exceed a shortened override; drop them then
        if epochs_override.is_some() {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let grid = app.grid_spec()?;
    let anchors = super::fit_anchors(dataset, grid.anchors)?;
    let means = dataset.mean_size()?;

    let mut model = Model::build(app.model_config(cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x2D));
    let head = Conv2d::new(
        model.backbone_out_channels(),
        grid.anchors * CH2D,
        1,
        1,
        0,
        true,
        &mut rng,
    );
    model.replace_head(head);

    let train_indices = dataset.indices(Split::Train);
    if train_indices.is_empty() {
        return Err(PipelineError::EmptySplit(Split::Train));
    }

    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= cfg.epochs.saturating_sub(cfg.epochs / 4) {
            cfg.learning_rate * 0.1
        } else {
            cfg.learning_rate
        } as f32;
        let mut order = train_indices.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64).wrapping_mul(0x77)));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loaded: Vec<_> = batch
                .par_iter()
                .map(|&idx| -> Result<_, PipelineError> {
                    let rec = dataset.load_record(idx)?;
                    let mut hulls = Vec::new();
                    for (b, _, _) in &rec.instances {
                        if let Ok(pts) = rec.intrinsics.project_many(&b.keypoints_3d()) {
                            let mut arr = [[0.0; 2]; 9];
                            for (s, p) in arr.iter_mut().zip(pts.iter()) {
                                *s = [p.0, p.1];
                            }
                            let (w, h) = codec::keypoint_hull(&arr);
                            hulls.push(Box2d { cx: arr[0][0], cy: arr[0][1], w, h });
                        }
                    }
                    Ok((rec.image, encode_2d(&hulls, &grid, &anchors)))
                })
                .collect::<Result<_, _>>()?;

            let b = loaded.len();
            let mut input = Array4::<f32>::zeros((
                b,
                3,
                grid.input_height as usize,
                grid.input_width as usize,
            ));
            for (i, (img, _)) in loaded.iter().enumerate() {
                input.index_axis_mut(Axis(0), i).assign(img);
            }
            let (pred, tape) = model.forward_train(&input)?;
            let mut dout = Array4::<f32>::zeros(pred.dim());
            let mut batch_loss = 0.0;
            for (i, (_, targets)) in loaded.iter().enumerate() {
                let (l, g) = loss_2d(&pred.index_axis(Axis(0), i), targets, &grid, &anchors);
                batch_loss += l;
                dout.index_axis_mut(Axis(0), i)
                    .assign(&g.mapv(|v| v / b as f32));
            }
            if !batch_loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch, last_good: None });
            }
            model.zero_grads();
            model.backward(tape, &dout);
            model.sgd_step(lr, cfg.momentum as f32, cfg.weight_decay as f32);
            epoch_loss += batch_loss / b as f64;
            steps += 1;
        }
        epoch_losses.push(epoch_loss / steps.max(1) as f64);
    }

    let path = out_dir.join("backbone2d.bpck");
    checkpoint::save(
        &path,
        CheckpointKind::Backbone,
        &model,
        &grid,
        &anchors,
        &means,
        cfg.epochs as u32,
        cfg.seed,
        Some(&cfg),
        false,
    )?;
    Ok(Pretrain2dOutcome { backbone_checkpoint: path, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_iou_basics() {
        let a = Box2d { cx: 0.0, cy: 0.0, w: 2.0, h: 2.0 };
        assert!((rect_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = Box2d { cx: 1.0, cy: 0.0, w: 2.0, h: 2.0 };
        assert!((rect_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
        let c = Box2d { cx: 10.0, cy: 0.0, w: 2.0, h: 2.0 };
        assert_eq!(rect_iou(&a, &c), 0.0);
    }

    #[test]
    fn encode_2d_assigns_cells_and_residuals() {
        let grid = GridSpec::new(96, 96, 32, 2).unwrap();
        let anchors = AnchorSet::new(vec![(20.0, 20.0), (50.0, 50.0)]).unwrap();
        let boxes = [Box2d { cx: 48.0, cy: 16.0, w: 20.0, h: 20.0 }];
        let t = encode_2d(&boxes, &grid, &anchors);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].cell_x, t[0].cell_y), (1, 0));
        assert_eq!(t[0].anchor, 0, "closest prior wins");
        assert!((t[0].values[2]).abs() < 1e-12, "exact prior: zero residual");
    }
}
