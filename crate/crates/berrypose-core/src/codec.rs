//! Bidirectional mapping between annotated boxes and the `S x S x A x 22`
//! grid tensor: target building, prediction decoding, confidence targets and
//! non-maximum suppression.
//!
//! Each anchor slot carries 22 channels:
//!
//! ```text
//! 0..17   (t_x, t_y) for the 9 keypoints, center first, interleaved
//! 18..20  log-size residuals t_h, t_w, t_l
//! 21      objectness logit p_o
//! ```
//!
//! Decoding follows the residual scheme of the single-shot detector family:
//! the center offset is sigmoid-bounded to its cell, vertex offsets are
//! unconstrained reals in grid units, and sizes are `mean * exp(t)`.
//! Anchors carry 2D keypoint-hull priors used only for responsibility
//! assignment; they contribute no terms to decoding.

use crate::geometry::{CameraIntrinsics, GeometryError, OrientedBox3D, Pose, Size3D};
use alloc::vec;
use alloc::vec::Vec;

pub const CHANNELS: usize = 22;
const CH_SIZE: usize = 18;
const CH_OBJ: usize = 21;

/// Logit magnitude used when the exact cell-boundary fractions 0 and 1 must
/// be encoded.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("grid input {0}x{1} is not divisible by stride {2}")]
    IndivisibleStride(u32, u32, u32),
    #[error("grid needs at least one anchor per cell")]
    NoAnchors,
    #[error("anchor priors must be strictly positive")]
    BadAnchorPrior,
    #[error("anchor clustering needs at least one hull")]
    NoHulls,
    #[error("mean size must be strictly positive")]
    BadMeanSize,
    #[error("tensor has {got} values, grid expects {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Grid geometry: input resolution, stride and anchors per cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub input_width: u32,
    pub input_height: u32,
    pub stride: u32,
    pub cells_x: usize,
    pub cells_y: usize,
    pub anchors: usize,
}

impl GridSpec {
    pub fn new(
        input_width: u32,
        input_height: u32,
        stride: u32,
        anchors: usize,
    ) -> Result<GridSpec, CodecError> {
        if stride == 0 || input_width % stride != 0 || input_height % stride != 0 {
            return Err(CodecError::IndivisibleStride(input_width, input_height, stride));
        }
        if anchors == 0 {
            return Err(CodecError::NoAnchors);
        }
        Ok(GridSpec {
            input_width,
            input_height,
            stride,
            cells_x: (input_width / stride) as usize,
            cells_y: (input_height / stride) as usize,
            anchors,
        })
    }

    pub fn slots(&self) -> usize {
        self.cells_y * self.cells_x * self.anchors
    }

    pub fn slot_index(&self, cy: usize, cx: usize, a: usize) -> usize {
        (cy * self.cells_x + cx) * self.anchors + a
    }
}

/// Anchor priors over the 2D bounding rectangle of the nine projected
/// keypoints, in pixels, sorted by area.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    priors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(mut priors: Vec<(f64, f64)>) -> Result<AnchorSet, CodecError> {
        if priors.is_empty() {
            return Err(CodecError::NoAnchors);
        }
        if priors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(CodecError::BadAnchorPrior);
        }
        priors.sort_by(|a, b| {
            (a.0 * a.1)
                .partial_cmp(&(b.0 * b.1))
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        Ok(AnchorSet { priors })
    }

    pub fn priors(&self) -> &[(f64, f64)] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// Lloyd k-means over hull rectangles with an IoU distance, a
    /// deterministic quantile initialization and mean updates. This is how
    /// anchor priors are fitted to a training split.
    pub fn kmeans(hulls: &[(f64, f64)], k: usize) -> Result<AnchorSet, CodecError> {
        if k == 0 {
            return Err(CodecError::NoAnchors);
        }
        if hulls.is_empty() {
            return Err(CodecError::NoHulls);
        }
        if hulls.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(CodecError::BadAnchorPrior);
        }

        let mut sorted: Vec<(f64, f64)> = hulls.to_vec();
        sorted.sort_by(|a, b| {
            (a.0 * a.1)
                .partial_cmp(&(b.0 * b.1))
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        let mut centroids: Vec<(f64, f64)> = (0..k)
            .map(|i| sorted[((i as f64 + 0.5) * sorted.len() as f64 / k as f64) as usize])
            .collect();

        let mut assignment = vec![usize::MAX; sorted.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (i, &hull) in sorted.iter().enumerate() {
                let mut best = 0;
                let mut best_iou = -1.0;
                for (c, &prior) in centroids.iter().enumerate() {
                    let iou = centered_rect_iou(hull, prior);
                    if iou > best_iou {
                        best_iou = iou;
                        best = c;
                    }
                }
                if assignment[i] != best {
                    assignment[i] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let mut sum = (0.0, 0.0);
                let mut count = 0usize;
                for (i, &hull) in sorted.iter().enumerate() {
                    if assignment[i] == c {
                        sum.0 += hull.0;
                        sum.1 += hull.1;
                        count += 1;
                    }
                }
                if count > 0 {
                    *centroid = (sum.0 / count as f64, sum.1 / count as f64);
                }
            }
        }
        AnchorSet::new(centroids)
    }

    /// Index of the prior with the highest centered-rectangle IoU against a
    /// keypoint hull.
    pub fn best_match(&self, hull: (f64, f64)) -> usize {
        let mut best = 0;
        let mut best_iou = -1.0;
        for (i, &p) in self.priors.iter().enumerate() {
            let iou = centered_rect_iou(hull, p);
            if iou > best_iou {
                best_iou = iou;
                best = i;
            }
        }
        best
    }

    /// Anchor indices ordered by descending IoU against a hull; used to fall
    /// back to the next-best anchor when two instances share a cell.
    pub fn ranked_matches(&self, hull: (f64, f64)) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .priors
            .iter()
            .enumerate()
            .map(|(i, &p)| (centered_rect_iou(hull, p), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
        scored.into_iter().map(|(_, i)| i).collect()
    }
}

/// IoU of two rectangles that share a center.
pub fn centered_rect_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Dataset-wide average box size anchoring the exponential size decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSize {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl MeanSize {
    pub fn new(h: f64, w: f64, l: f64) -> Result<MeanSize, CodecError> {
        if h > 0.0 && w > 0.0 && l > 0.0 {
            Ok(MeanSize { h, w, l })
        } else {
            Err(CodecError::BadMeanSize)
        }
    }
}

/// Dense `S_y x S_x x A x 22` value tensor, used both for supervision
/// targets and for raw network predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    pub cells_y: usize,
    pub cells_x: usize,
    pub anchors: usize,
    data: Vec<f64>,
}

impl GridTensor {
    pub fn zeros(grid: &GridSpec) -> GridTensor {
        GridTensor {
            cells_y: grid.cells_y,
            cells_x: grid.cells_x,
            anchors: grid.anchors,
            data: vec![0.0; grid.slots() * CHANNELS],
        }
    }

    pub fn from_vec(grid: &GridSpec, data: Vec<f64>) -> Result<GridTensor, CodecError> {
        let want = grid.slots() * CHANNELS;
        if data.len() != want {
            return Err(CodecError::ShapeMismatch { got: data.len(), want });
        }
        Ok(GridTensor {
            cells_y: grid.cells_y,
            cells_x: grid.cells_x,
            anchors: grid.anchors,
            data,
        })
    }

    pub fn matches(&self, grid: &GridSpec) -> bool {
        self.cells_y == grid.cells_y
            && self.cells_x == grid.cells_x
            && self.anchors == grid.anchors
    }

    pub fn slot(&self, cy: usize, cx: usize, a: usize) -> &[f64] {
        let i = ((cy * self.cells_x + cx) * self.anchors + a) * CHANNELS;
        &self.data[i..i + CHANNELS]
    }

    pub fn slot_mut(&mut self, cy: usize, cx: usize, a: usize) -> &mut [f64] {
        let i = ((cy * self.cells_x + cx) * self.anchors + a) * CHANNELS;
        &mut self.data[i..i + CHANNELS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Supervision tensor plus the per-slot responsibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTensor {
    pub tensor: GridTensor,
    pub mask: Vec<bool>,
}

impl TargetTensor {
    pub fn zeros(grid: &GridSpec) -> TargetTensor {
        TargetTensor {
            tensor: GridTensor::zeros(grid),
            mask: vec![false; grid.slots()],
        }
    }

    pub fn responsible(&self, grid: &GridSpec, cy: usize, cx: usize, a: usize) -> bool {
        self.mask[grid.slot_index(cy, cx, a)]
    }
}

/// One decoded instance: nine image-space keypoints (center first), metric
/// size, confidence, and the pose once PnP has run.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub keypoints: [[f64; 2]; 9],
    pub size: Size3D,
    pub confidence: f64,
    pub pose: Option<Pose>,
}

/// Result of encoding one instance before anchor assignment.
#[derive(Debug, Clone)]
pub struct EncodedInstance {
    pub cell_x: usize,
    pub cell_y: usize,
    /// 22 channel values; the objectness channel is left at zero (the
    /// confidence target is computed against live predictions at loss time).
    pub values: [f64; CHANNELS],
    /// Width/height of the keypoint bounding rectangle, pixels.
    pub hull: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncodeError {
    #[error("instance center ({0:.1}, {1:.1}) projects outside the image")]
    CenterOutsideImage(f64, f64),
    #[error("no free anchor left in cell ({0}, {1})")]
    AnchorCollision(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub fn logit(p: f64) -> f64 {
    let t = libm::log(p / (1.0 - p));
    if t.is_finite() {
        t
    } else if p <= 0.0 {
        -LOGIT_CLAMP
    } else {
        LOGIT_CLAMP
    }
}

/// Axis-aligned bounding rectangle (width, height) of a keypoint set.
pub fn keypoint_hull(kpts: &[[f64; 2]; 9]) -> (f64, f64) {
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for p in kpts {
        min_u = min_u.min(p[0]);
        max_u = max_u.max(p[0]);
        min_v = min_v.min(p[1]);
        max_v = max_v.max(p[1]);
    }
    (max_u - min_u, max_v - min_v)
}

/// Encodes nine pixel-space keypoints plus a metric size into the 22-channel
/// residual representation of the keypoints' grid cell.
pub fn encode_keypoints(
    kpts: &[[f64; 2]; 9],
    size: &Size3D,
    grid: &GridSpec,
    means: &MeanSize,
    image: &CameraIntrinsics,
) -> Result<EncodedInstance, EncodeError> {
    let [u0, v0] = kpts[0];
    if !image.contains(u0, v0) {
        return Err(EncodeError::CenterOutsideImage(u0, v0));
    }
    let stride = grid.stride as f64;
    let gx = u0 / stride;
    let gy = v0 / stride;
    let cell_x = (gx as usize).min(grid.cells_x - 1);
    let cell_y = (gy as usize).min(grid.cells_y - 1);

    let mut values = [0.0; CHANNELS];
    values[0] = logit(gx - cell_x as f64);
    values[1] = logit(gy - cell_y as f64);
    for k in 1..9 {
        values[2 * k] = kpts[k][0] / stride - cell_x as f64;
        values[2 * k + 1] = kpts[k][1] / stride - cell_y as f64;
    }
    values[CH_SIZE] = libm::log(size.h / means.h);
    values[CH_SIZE + 1] = libm::log(size.w / means.w);
    values[CH_SIZE + 2] = libm::log(size.l / means.l);

    Ok(EncodedInstance {
        cell_x,
        cell_y,
        values,
        hull: keypoint_hull(kpts),
    })
}

/// Decodes the 22 channels of one slot back into pixel keypoints and a
/// metric size (no confidence handling).
pub fn decode_slot(
    values: &[f64],
    cell_x: usize,
    cell_y: usize,
    grid: &GridSpec,
    means: &MeanSize,
) -> ([[f64; 2]; 9], Size3D) {
    let stride = grid.stride as f64;
    let cx = cell_x as f64;
    let cy = cell_y as f64;
    let mut kpts = [[0.0; 2]; 9];
    kpts[0] = [
        (sigmoid(values[0]) + cx) * stride,
        (sigmoid(values[1]) + cy) * stride,
    ];
    for k in 1..9 {
        kpts[k] = [
            (values[2 * k] + cx) * stride,
            (values[2 * k + 1] + cy) * stride,
        ];
    }
    // exp argument clamped so corrupt predictions cannot produce inf sizes
    let e = |t: f64| libm::exp(t.clamp(-20.0, 20.0));
    let size = Size3D {
        h: means.h * e(values[CH_SIZE]),
        w: means.w * e(values[CH_SIZE + 1]),
        l: means.l * e(values[CH_SIZE + 2]),
    };
    (kpts, size)
}

/// Outcome of building supervision targets for one image.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub targets: TargetTensor,
    /// Instances whose center projected outside the image (skipped).
    pub skipped_outside: usize,
    /// Instances that found no free anchor in their cell (skipped).
    pub skipped_collisions: usize,
    /// `(slot index, instance index)` for each placed instance.
    pub placements: Vec<(usize, usize)>,
}

/// Projects every box and writes its residual encoding into the responsible
/// anchor slot. Two instances may share a cell through distinct anchors;
/// an instance is skipped (and counted) when its center projects outside
/// the image or its cell has no free anchor left.
pub fn build_targets(
    boxes: &[OrientedBox3D],
    intrinsics: &CameraIntrinsics,
    grid: &GridSpec,
    anchors: &AnchorSet,
    means: &MeanSize,
) -> Result<BuildOutcome, CodecError> {
    assert_eq!(anchors.len(), grid.anchors, "anchor set does not match grid");
    let mut out = BuildOutcome {
        targets: TargetTensor::zeros(grid),
        skipped_outside: 0,
        skipped_collisions: 0,
        placements: Vec::new(),
    };

    for (idx, b) in boxes.iter().enumerate() {
        let pts3 = b.keypoints_3d();
        let mut kpts = [[0.0; 2]; 9];
        let mut behind = false;
        for (i, p) in pts3.iter().enumerate() {
            match intrinsics.project(*p) {
                Ok(uv) => kpts[i] = [uv.0, uv.1],
                Err(_) => {
                    behind = true;
                    break;
                }
            }
        }
        if behind {
            out.skipped_outside += 1;
            continue;
        }

        let enc = match encode_keypoints(&kpts, &b.size, grid, means, intrinsics) {
            Ok(e) => e,
            Err(EncodeError::CenterOutsideImage(..)) => {
                out.skipped_outside += 1;
                continue;
            }
            Err(EncodeError::Geometry(g)) => return Err(g.into()),
            Err(EncodeError::AnchorCollision(..)) => unreachable!(),
        };

        let mut placed = false;
        for a in anchors.ranked_matches(enc.hull) {
            let slot = grid.slot_index(enc.cell_y, enc.cell_x, a);
            if !out.targets.mask[slot] {
                out.targets.mask[slot] = true;
                out.targets
                    .tensor
                    .slot_mut(enc.cell_y, enc.cell_x, a)
                    .copy_from_slice(&enc.values);
                out.placements.push((slot, idx));
                placed = true;
                break;
            }
        }
        if !placed {
            out.skipped_collisions += 1;
        }
    }
    Ok(out)
}

/// Decodes a raw prediction tensor into detections above a confidence
/// threshold. Slots are visited in row-major cell order so the output is
/// deterministic.
pub fn decode(
    raw: &GridTensor,
    grid: &GridSpec,
    means: &MeanSize,
    conf_threshold: f64,
) -> Result<Vec<Detection>, CodecError> {
    if !raw.matches(grid) {
        return Err(CodecError::ShapeMismatch {
            got: raw.cells_y * raw.cells_x * raw.anchors * CHANNELS,
            want: grid.slots() * CHANNELS,
        });
    }
    let mut out = Vec::new();
    for cy in 0..grid.cells_y {
        for cx in 0..grid.cells_x {
            for a in 0..grid.anchors {
                let values = raw.slot(cy, cx, a);
                let conf = sigmoid(values[CH_OBJ]);
                if conf < conf_threshold {
                    continue;
                }
                let (keypoints, size) = decode_slot(values, cx, cy, grid, means);
                out.push(Detection {
                    keypoints,
                    size,
                    confidence: conf,
                    pose: None,
                });
            }
        }
    }
    Ok(out)
}

/// Confidence function parameters: the sharpness `alpha` and the distance
/// cutoff `d_th` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    pub alpha: f64,
    pub d_th_px: f64,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        ConfidenceParams { alpha: 2.0, d_th_px: 30.0 }
    }
}

/// Soft confidence target from the mean keypoint distance `D`:
/// `C = (exp(alpha * (1 - D / d_th)) - 1) / (exp(alpha) - 1)` for
/// `D < d_th`, else 0. `C(0) = 1` and `C` falls continuously to 0 at the
/// cutoff.
pub fn confidence_target(
    pred: &[[f64; 2]; 9],
    gt: &[[f64; 2]; 9],
    params: &ConfidenceParams,
) -> f64 {
    let mut d = 0.0;
    for k in 0..9 {
        let du = pred[k][0] - gt[k][0];
        let dv = pred[k][1] - gt[k][1];
        d += libm::sqrt(du * du + dv * dv);
    }
    d /= 9.0;
    if d >= params.d_th_px {
        return 0.0;
    }
    (libm::exp(params.alpha * (1.0 - d / params.d_th_px)) - 1.0)
        / (libm::exp(params.alpha) - 1.0)
}

fn hull_rect_iou(a: &[[f64; 2]; 9], b: &[[f64; 2]; 9]) -> f64 {
    let bounds = |k: &[[f64; 2]; 9]| {
        let mut r = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in k {
            r.0 = r.0.min(p[0]);
            r.1 = r.1.min(p[1]);
            r.2 = r.2.max(p[0]);
            r.3 = r.3.max(p[1]);
        }
        r
    };
    let ra = bounds(a);
    let rb = bounds(b);
    let iw = (ra.2.min(rb.2) - ra.0.max(rb.0)).max(0.0);
    let ih = (ra.3.min(rb.3) - ra.1.max(rb.1)).max(0.0);
    let inter = iw * ih;
    let area = |r: (f64, f64, f64, f64)| (r.2 - r.0).max(0.0) * (r.3 - r.1).max(0.0);
    let union = area(ra) + area(rb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression on the 2D IoU of keypoint-hull
/// rectangles. Survivors come back sorted by descending confidence.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut keep: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        if keep
            .iter()
            .all(|k| hull_rect_iou(&k.keypoints, &d.keypoints) < iou_threshold)
        {
            keep.push(d);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::math::Vec3;

    fn test_grid() -> GridSpec {
        GridSpec::new(416, 416, 32, 5).unwrap()
    }

    fn test_means() -> MeanSize {
        MeanSize::new(0.035, 0.03, 0.03).unwrap()
    }

    fn test_anchors() -> AnchorSet {
        AnchorSet::new(vec![
            (12.0, 14.0),
            (20.0, 24.0),
            (32.0, 36.0),
            (48.0, 52.0),
            (70.0, 80.0),
        ])
        .unwrap()
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 207.5, 207.5, 416, 416).unwrap()
    }

    #[test]
    fn grid_divisibility_enforced() {
        assert!(GridSpec::new(416, 416, 32, 5).is_ok());
        assert!(matches!(
            GridSpec::new(415, 416, 32, 5),
            Err(CodecError::IndivisibleStride(..))
        ));
        assert!(GridSpec::new(416, 416, 32, 0).is_err());
    }

    #[test]
    fn grid_cell_counts() {
        let g = GridSpec::new(224, 224, 32, 3).unwrap();
        assert_eq!((g.cells_x, g.cells_y), (7, 7));
    }

    #[test]
    fn cell_midpoint_encodes_to_half() {
        let grid = test_grid();
        let means = test_means();
        let k = test_intrinsics();
        // center at pixel (stride*(i+0.5), stride*(j+0.5)) for i=4, j=6
        let mut kpts = [[144.0, 208.0]; 9];
        kpts[0] = [32.0 * 4.5, 32.0 * 6.5];
        let size = Size3D::new(0.035, 0.03, 0.03).unwrap();
        let enc = encode_keypoints(&kpts, &size, &grid, &means, &k).unwrap();
        assert_eq!((enc.cell_x, enc.cell_y), (4, 6));
        assert!((sigmoid(enc.values[0]) - 0.5).abs() < 1e-12);
        assert!((sigmoid(enc.values[1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_size_encodes_to_zero_residuals() {
        let grid = test_grid();
        let means = test_means();
        let k = test_intrinsics();
        let kpts = [[100.0, 100.0]; 9];
        let size = Size3D::new(means.h, means.w, means.l).unwrap();
        let enc = encode_keypoints(&kpts, &size, &grid, &means, &k).unwrap();
        assert_eq!(enc.values[CH_SIZE], 0.0);
        assert_eq!(enc.values[CH_SIZE + 1], 0.0);
        assert_eq!(enc.values[CH_SIZE + 2], 0.0);
    }

    #[test]
    fn boundary_fraction_is_clamped() {
        // center exactly on a cell corner: fraction 0 in both axes
        let grid = test_grid();
        let means = test_means();
        let k = test_intrinsics();
        let mut kpts = [[100.0, 100.0]; 9];
        kpts[0] = [96.0, 128.0];
        let size = Size3D::new(0.03, 0.03, 0.03).unwrap();
        let enc = encode_keypoints(&kpts, &size, &grid, &means, &k).unwrap();
        assert_eq!(enc.values[0], -LOGIT_CLAMP);
        assert_eq!(enc.values[1], -LOGIT_CLAMP);
    }

    #[test]
    fn decode_all_zero_slot() {
        let grid = test_grid();
        let means = test_means();
        let raw = GridTensor::zeros(&grid);
        // all-zero logits: sigmoid(0) = 0.5 confidence, every slot decodes
        let dets = decode(&raw, &grid, &means, 0.4).unwrap();
        assert_eq!(dets.len(), grid.slots());
        // find the detection for cell (3, 4): center (112, 144)
        let idx = (4 * grid.cells_x + 3) * grid.anchors;
        let d = &dets[idx];
        assert!((d.keypoints[0][0] - 112.0).abs() < 1e-12);
        assert!((d.keypoints[0][1] - 144.0).abs() < 1e-12);
        for k in 1..9 {
            assert!((d.keypoints[k][0] - 96.0).abs() < 1e-12);
            assert!((d.keypoints[k][1] - 128.0).abs() < 1e-12);
        }
        assert!((d.size.h - means.h).abs() < 1e-15);
        assert!((d.size.w - means.w).abs() < 1e-15);
        assert!((d.size.l - means.l).abs() < 1e-15);
        assert!((d.confidence - 0.5).abs() < 1e-12);
    }

    #[test]
    fn size_residual_ln2_doubles_height() {
        let grid = test_grid();
        let means = test_means();
        let mut raw = GridTensor::zeros(&grid);
        raw.slot_mut(0, 0, 0)[CH_SIZE] = core::f64::consts::LN_2;
        let dets = decode(&raw, &grid, &means, 0.0).unwrap();
        assert!((dets[0].size.h - 2.0 * means.h).abs() < 1e-12);
    }

    #[test]
    fn decode_respects_threshold() {
        let grid = test_grid();
        let means = test_means();
        let raw = GridTensor::zeros(&grid);
        let dets = decode(&raw, &grid, &means, 0.51).unwrap();
        assert!(dets.is_empty());
        let dets = decode(&raw, &grid, &means, 0.5).unwrap();
        assert_eq!(dets.len(), grid.slots());
        assert!(dets.iter().all(|d| d.confidence >= 0.5));
    }

    #[test]
    fn decode_rejects_shape_mismatch() {
        let grid = test_grid();
        let other = GridSpec::new(224, 224, 32, 5).unwrap();
        let raw = GridTensor::zeros(&other);
        assert!(matches!(
            decode(&raw, &grid, &test_means(), 0.5),
            Err(CodecError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn round_trip_random_scenes() {
        let grid = test_grid();
        let means = test_means();
        let anchors = test_anchors();
        let k = test_intrinsics();
        let mut state = 12345u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };

        for _ in 0..100 {
            let n = 1 + (rng() * 4.0) as usize;
            let mut boxes = Vec::new();
            for _ in 0..n {
                let rot = Rotation::from_axis_angle(
                    Vec3::new(rng() - 0.5, rng() - 0.5, rng() - 0.5),
                    rng() * 6.0,
                );
                let rot = match rot {
                    Ok(r) => r,
                    Err(_) => Rotation::IDENTITY,
                };
                boxes.push(OrientedBox3D::new(
                    Pose::new(
                        rot,
                        Vec3::new((rng() - 0.5) * 0.2, (rng() - 0.5) * 0.2, 0.4 + rng() * 0.4),
                    ),
                    Size3D::new(
                        0.02 + rng() * 0.03,
                        0.015 + rng() * 0.025,
                        0.015 + rng() * 0.025,
                    )
                    .unwrap(),
                ));
            }
            let built = build_targets(&boxes, &k, &grid, &anchors, &means).unwrap();
            let dets = decode(&built.targets.tensor, &grid, &means, 0.0).unwrap();
            // every placed instance must be recovered exactly by one slot
            for &(slot, inst) in &built.placements {
                let b = &boxes[inst];
                let gt_kpts: Vec<(f64, f64)> =
                    k.project_many(&b.keypoints_3d()).unwrap();
                // locate the decoded detection for this slot
                let det = dets
                    .iter()
                    .find(|d| {
                        let cx = (d.keypoints[0][0] / 32.0) as usize;
                        let cy = (d.keypoints[0][1] / 32.0) as usize;
                        let base = (cy * grid.cells_x + cx) * grid.anchors;
                        (base..base + grid.anchors).contains(&slot)
                            && (d.keypoints[0][0] - gt_kpts[0].0).abs() < 1e-4
                    })
                    .expect("placed instance must decode");
                for kp in 0..9 {
                    assert!((det.keypoints[kp][0] - gt_kpts[kp].0).abs() < 1e-4);
                    assert!((det.keypoints[kp][1] - gt_kpts[kp].1).abs() < 1e-4);
                }
                assert!((det.size.h - b.size.h).abs() < 1e-9);
                assert!((det.size.w - b.size.w).abs() < 1e-9);
                assert!((det.size.l - b.size.l).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn center_outside_image_is_skipped_and_counted() {
        let grid = test_grid();
        let means = test_means();
        let anchors = test_anchors();
        let k = test_intrinsics();
        let boxes = [OrientedBox3D::new(
            Pose::new(Rotation::IDENTITY, Vec3::new(10.0, 0.0, 0.5)),
            Size3D::new(0.03, 0.03, 0.03).unwrap(),
        )];
        let built = build_targets(&boxes, &k, &grid, &anchors, &means).unwrap();
        assert_eq!(built.skipped_outside, 1);
        assert!(built.placements.is_empty());
        assert!(built.targets.mask.iter().all(|&m| !m));
    }

    #[test]
    fn shared_cell_uses_distinct_anchors_then_collides() {
        let grid = test_grid();
        let means = test_means();
        let anchors = AnchorSet::new(vec![(20.0, 20.0), (40.0, 40.0)]).unwrap();
        let grid2 = GridSpec::new(416, 416, 32, 2).unwrap();
        let k = test_intrinsics();
        // three instances whose centers land in the same cell
        let mk = |z: f64| {
            OrientedBox3D::new(
                Pose::new(Rotation::IDENTITY, Vec3::new(0.0, 0.0, z)),
                Size3D::new(0.03, 0.03, 0.03).unwrap(),
            )
        };
        let boxes = [mk(0.4), mk(0.5), mk(0.6)];
        let built = build_targets(&boxes, &k, &grid2, &anchors, &means).unwrap();
        assert_eq!(built.placements.len(), 2);
        assert_eq!(built.skipped_collisions, 1);
        let _ = grid; // silence: grid2 used instead
    }

    #[test]
    fn confidence_target_trivial_cases() {
        let p = [[10.0, 10.0]; 9];
        let params = ConfidenceParams::default();
        assert!((confidence_target(&p, &p, &params) - 1.0).abs() < 1e-12);

        let mut far = p;
        for kp in far.iter_mut() {
            kp[0] += 30.0;
        }
        assert_eq!(confidence_target(&p, &far, &params), 0.0);
    }

    #[test]
    fn confidence_target_midpoint_value() {
        // D = d_th / 2, alpha = 2  ->  C = (e - 1) / (e^2 - 1)
        let params = ConfidenceParams { alpha: 2.0, d_th_px: 30.0 };
        let gt = [[0.0, 0.0]; 9];
        let mut pred = gt;
        for kp in pred.iter_mut() {
            kp[0] = 15.0;
        }
        let expect = (core::f64::consts::E - 1.0) / (core::f64::consts::E.powi(2) - 1.0);
        assert!((confidence_target(&pred, &gt, &params) - expect).abs() < 1e-12);
        assert!((expect - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn confidence_target_monotone_in_distance() {
        let params = ConfidenceParams::default();
        let gt = [[0.0, 0.0]; 9];
        let mut last = f64::INFINITY;
        for step in 0..300 {
            let d = step as f64 * 0.15;
            let mut pred = gt;
            for kp in pred.iter_mut() {
                kp[0] = d;
            }
            let c = confidence_target(&pred, &gt, &params);
            assert!(c <= last + 1e-12);
            assert!((0.0..=1.0).contains(&c));
            last = c;
        }
    }

    #[test]
    fn nms_trivial_cases() {
        assert!(nms(Vec::new(), 0.45).is_empty());

        let size = Size3D::new(0.03, 0.03, 0.03).unwrap();
        let mk = |conf: f64, offset: f64| Detection {
            keypoints: {
                let mut k = [[0.0; 2]; 9];
                for (i, kp) in k.iter_mut().enumerate() {
                    kp[0] = offset + (i % 3) as f64 * 10.0;
                    kp[1] = offset + (i / 3) as f64 * 10.0;
                }
                k
            },
            size,
            confidence: conf,
            pose: None,
        };

        // identical keypoints: one survivor, the higher-confidence one
        let out = nms(vec![mk(0.6, 0.0), mk(0.9, 0.0)], 0.45);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);

        // far apart: both retained, sorted by confidence
        let out = nms(vec![mk(0.6, 0.0), mk(0.9, 100.0)], 0.45);
        assert_eq!(out.len(), 2);
        assert!(out[0].confidence >= out[1].confidence);
    }

    #[test]
    fn nms_keeps_pairs_below_threshold() {
        // pairwise IoU oracle: rectangles overlap partially
        let size = Size3D::new(0.03, 0.03, 0.03).unwrap();
        let mk = |conf: f64, offset: f64| Detection {
            keypoints: {
                let mut k = [[0.0; 2]; 9];
                for (i, kp) in k.iter_mut().enumerate() {
                    kp[0] = offset + (i % 3) as f64 * 20.0;
                    kp[1] = (i / 3) as f64 * 20.0;
                }
                k
            },
            size,
            confidence: conf,
            pose: None,
        };
        let a = mk(0.9, 0.0);
        let b = mk(0.8, 30.0); // 40x40 hulls offset 30: IoU = (10*40)/(3200-400)
        let iou = hull_rect_iou(&a.keypoints, &b.keypoints);
        assert!((iou - 400.0 / 2800.0).abs() < 1e-12);
        let out = nms(vec![a, b], iou);
        assert_eq!(out.len(), 1, "at threshold == iou the lower one is suppressed");
        let a = mk(0.9, 0.0);
        let b = mk(0.8, 30.0);
        let out = nms(vec![a, b], iou + 1e-9);
        assert_eq!(out.len(), 2, "just above their IoU both survive");
    }

    #[test]
    fn kmeans_anchors_are_positive_sorted_and_deterministic() {
        let mut hulls = Vec::new();
        let mut state = 9u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..500 {
            hulls.push((5.0 + rng() * 80.0, 5.0 + rng() * 80.0));
        }
        let a = AnchorSet::kmeans(&hulls, 5).unwrap();
        let b = AnchorSet::kmeans(&hulls, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let areas: Vec<f64> = a.priors().iter().map(|p| p.0 * p.1).collect();
        assert!(areas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn anchor_best_match_prefers_closest_area() {
        let anchors = test_anchors();
        assert_eq!(anchors.best_match((12.0, 14.0)), 0);
        assert_eq!(anchors.best_match((70.0, 80.0)), 4);
    }
}
