//! Symmetric detection-to-ground-truth matching and average precision.
//!
//! Matching is greedy in descending confidence and one-to-one: each
//! detection claims the unclaimed ground truth with the best symmetric
//! criterion value. Pair values are computed against the full spin orbit of
//! the ground truth (maximum IoU, minimum rotation error), so a prediction
//! is never penalized for landing on a different orbit member than the
//! annotation.
//!
//! Average precision is the area under the all-points-interpolated
//! precision/recall curve of the confidence-ranked detections across the
//! whole dataset.

use crate::geometry::{box3d_iou, symmetric_pose_errors, OrientedBox3D};
use alloc::vec;
use alloc::vec::Vec;

/// Number of spin steps in the symmetry orbit used for evaluation.
pub const SYMMETRY_STEPS: usize = 12;

/// Correctness criterion for one metric family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCriterion {
    /// True positive iff the symmetric 3D IoU exceeds the threshold.
    Iou3d { threshold: f64 },
    /// True positive iff the translation error is below `max_t_m` meters
    /// and the symmetric rotation error below `max_r_deg` degrees, both at
    /// the same time.
    Pose { max_t_m: f64, max_r_deg: f64 },
}

impl MatchCriterion {
    pub fn satisfied(&self, s: &PairScores) -> bool {
        match *self {
            MatchCriterion::Iou3d { threshold } => s.iou > threshold,
            MatchCriterion::Pose { max_t_m, max_r_deg } => {
                s.t_err < max_t_m && s.r_err < max_r_deg
            }
        }
    }
}

/// Symmetric scores of one (detection, ground truth) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    /// Max 3D IoU over the ground truth's spin orbit.
    pub iou: f64,
    /// Translation error, meters (orbit-invariant).
    pub t_err: f64,
    /// Min rotation error over the orbit, degrees.
    pub r_err: f64,
}

/// One detection as evaluation sees it: a confidence and, when PnP
/// succeeded, the predicted box. Pose-less detections rank as false
/// positives.
#[derive(Debug, Clone)]
pub struct EvalDetection {
    pub confidence: f64,
    pub box3d: Option<OrientedBox3D>,
}

/// Symmetric pair scores of a predicted box against a ground truth.
pub fn pair_scores(det: &OrientedBox3D, gt: &OrientedBox3D, sym_steps: usize) -> PairScores {
    let mut iou = 0.0f64;
    for member in crate::geometry::symmetry_expand(gt, sym_steps) {
        iou = iou.max(box3d_iou(det, &member));
    }
    let (t_err, r_err) = symmetric_pose_errors(&det.pose, gt, sym_steps);
    PairScores { iou, t_err, r_err }
}

/// Dense detection x ground-truth score matrix for one image, reusable
/// across criteria. `None` marks pose-less detections.
pub fn score_matrix(
    detections: &[EvalDetection],
    gts: &[OrientedBox3D],
    sym_steps: usize,
) -> Vec<Option<PairScores>> {
    let mut out = Vec::with_capacity(detections.len() * gts.len());
    for det in detections {
        for gt in gts {
            out.push(det.box3d.as_ref().map(|b| pair_scores(b, gt, sym_steps)));
        }
    }
    out
}

/// One matched pair with its scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub detection: usize,
    pub gt: usize,
    pub scores: PairScores,
}

/// Matching outcome for one image.
#[derive(Debug, Clone, Default)]
pub struct ImageMatches {
    pub pairs: Vec<MatchPair>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching over a precomputed score matrix. For the IoU
/// family, a detection claims the overlapping (IoU > 0) unclaimed ground
/// truth with maximal IoU; for the pose family it claims the unclaimed
/// ground truth satisfying both thresholds with the lowest rotation error.
pub fn match_with_scores(
    detections: &[EvalDetection],
    gt_count: usize,
    scores: &[Option<PairScores>],
    criterion: MatchCriterion,
) -> ImageMatches {
    assert_eq!(scores.len(), detections.len() * gt_count);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut claimed = vec![false; gt_count];
    let mut out = ImageMatches::default();
    for det in order {
        let mut best: Option<(usize, PairScores)> = None;
        for gt in 0..gt_count {
            if claimed[gt] {
                continue;
            }
            let Some(s) = scores[det * gt_count + gt] else {
                continue;
            };
            let better = match criterion {
                MatchCriterion::Iou3d { .. } => {
                    s.iou > 0.0 && best.map_or(true, |(_, b)| s.iou > b.iou)
                }
                MatchCriterion::Pose { .. } => {
                    criterion.satisfied(&s)
                        && best.map_or(true, |(_, b)| {
                            s.r_err < b.r_err || (s.r_err == b.r_err && s.t_err < b.t_err)
                        })
                }
            };
            if better {
                best = Some((gt, s));
            }
        }
        match best {
            Some((gt, s)) => {
                claimed[gt] = true;
                out.pairs.push(MatchPair { detection: det, gt, scores: s });
            }
            None => out.unmatched_detections.push(det),
        }
    }
    for (gt, &c) in claimed.iter().enumerate() {
        if !c {
            out.unmatched_gts.push(gt);
        }
    }
    out
}

/// Convenience wrapper computing the score matrix internally.
pub fn match_image(
    detections: &[EvalDetection],
    gts: &[OrientedBox3D],
    criterion: MatchCriterion,
    sym_steps: usize,
) -> ImageMatches {
    let scores = score_matrix(detections, gts, sym_steps);
    match_with_scores(detections, gts.len(), &scores, criterion)
}

/// One entry of the dataset-wide ranked list.
#[derive(Debug, Clone, Copy)]
pub struct RankedDetection {
    pub confidence: f64,
    pub true_positive: bool,
}

/// Area under the all-points-interpolated PR curve, as a fraction in
/// `[0, 1]`. `None` when the dataset has no ground truth (AP undefined).
pub fn average_precision(ranked: &[RankedDetection], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| {
        ranked[b]
            .confidence
            .partial_cmp(&ranked[a].confidence)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    // precision after each rank
    let mut precisions = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if ranked[i].true_positive {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    // interpolate: precision at recall r is the max precision at any
    // recall >= r, i.e. the suffix maximum
    let mut suffix = precisions.clone();
    for i in (0..suffix.len().saturating_sub(1)).rev() {
        suffix[i] = suffix[i].max(suffix[i + 1]);
    }

    let mut ap = 0.0;
    let recall_step = 1.0 / gt_count as f64;
    for (rank, &i) in order.iter().enumerate() {
        if ranked[i].true_positive {
            ap += recall_step * suffix[rank];
        }
    }
    Some(ap)
}

/// Assembles the ranked list for one criterion from per-image matches and
/// returns the AP. `images` pairs each image's detections with its match
/// result; `gt_counts` are per-image ground-truth counts.
pub fn dataset_average_precision(
    images: &[(&[EvalDetection], &ImageMatches)],
    gt_counts: &[usize],
    criterion: MatchCriterion,
) -> Option<f64> {
    let total_gt: usize = gt_counts.iter().sum();
    let mut ranked = Vec::new();
    for (dets, matches) in images {
        let mut matched = vec![None; dets.len()];
        for p in &matches.pairs {
            matched[p.detection] = Some(p.scores);
        }
        for (i, det) in dets.iter().enumerate() {
            let tp = matched[i].map_or(false, |s| criterion.satisfied(&s));
            ranked.push(RankedDetection { confidence: det.confidence, true_positive: tp });
        }
    }
    average_precision(&ranked, total_gt)
}
