//! The four-term detection loss and its symmetric minimum over the
//! ground-truth spin orbit.
//!
//! Terms (all sums run over anchor slots):
//!
//! - coordinate: squared keypoint residuals in grid units on the
//!   decoded-offset scale (sigmoid space for the center, raw offsets for the
//!   vertices), responsible slots only;
//! - dimension: squared differences of decoded metric sizes, responsible
//!   slots only;
//! - confidence: `(C - sigma(p_o))^2` with the soft target `C` computed from
//!   the current keypoint predictions and treated as a constant under
//!   differentiation (no gradient flows through `C`);
//! - no-object: `sigma(p_o)^2` over all non-responsible slots.
//!
//! The symmetric variant re-encodes each instance at every orbit spin,
//! keeps the per-instance spin minimizing that instance's weighted
//! coordinate + dimension contribution, and evaluates the confidence terms
//! against those winning spins.

use crate::codec::{
    self, confidence_target, decode_slot, keypoint_hull, AnchorSet, CodecError, ConfidenceParams,
    EncodeError, GridSpec, GridTensor, MeanSize, TargetTensor, CHANNELS,
};
use crate::geometry::{symmetry_expand, CameraIntrinsics, OrientedBox3D};
use alloc::vec;
use alloc::vec::Vec;

const CH_SIZE: usize = 18;
const CH_OBJ: usize = 21;

/// Term weights for the total loss. Defaults: coordinate 1, dimension 5,
/// confidence 5, no-object 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub dim: f64,
    pub conf: f64,
    pub conf_no: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { coord: 1.0, dim: 5.0, conf: 5.0, conf_no: 0.1 }
    }
}

/// Unweighted term values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub coord: f64,
    pub dim: f64,
    pub conf: f64,
    pub conf_no: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self, w: &LossWeights) -> LossBreakdown {
        self.total = w.coord * self.coord
            + w.dim * self.dim
            + w.conf * self.conf
            + w.conf_no * self.conf_no;
        self
    }
}

/// Everything the loss needs besides the tensors themselves.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub grid: &'a GridSpec,
    pub means: &'a MeanSize,
    pub confidence: ConfidenceParams,
    pub weights: LossWeights,
}

fn sigmoid(x: f64) -> f64 {
    codec::sigmoid(x)
}

/// Squared keypoint residuals over responsible slots, grid units.
pub fn coord_loss(pred: &GridTensor, target: &GridTensor, mask: &[bool]) -> f64 {
    per_slot_fold(pred, target, mask, 0.0, |acc, p, t| acc + coord_term(p, t))
}

/// Squared decoded-size residuals over responsible slots, meters squared.
pub fn dim_loss(pred: &GridTensor, target: &GridTensor, mask: &[bool], means: &MeanSize) -> f64 {
    per_slot_fold(pred, target, mask, 0.0, |acc, p, t| acc + dim_term(p, t, means))
}

fn per_slot_fold(
    pred: &GridTensor,
    target: &GridTensor,
    mask: &[bool],
    init: f64,
    mut f: impl FnMut(f64, &[f64], &[f64]) -> f64,
) -> f64 {
    let pd = pred.as_slice();
    let td = target.as_slice();
    assert_eq!(pd.len(), td.len());
    assert_eq!(mask.len() * CHANNELS, pd.len());
    let mut acc = init;
    for (slot, &m) in mask.iter().enumerate() {
        if m {
            let i = slot * CHANNELS;
            acc = f(acc, &pd[i..i + CHANNELS], &td[i..i + CHANNELS]);
        }
    }
    acc
}

fn coord_term(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..2 {
        let d = sigmoid(p[c]) - sigmoid(t[c]);
        s += d * d;
    }
    for c in 2..18 {
        let d = p[c] - t[c];
        s += d * d;
    }
    s
}

// Sizes decode with the same +-20 residual clamp as the codec, keeping the
// term finite for arbitrary raw predictions.
fn decode_size(t: f64) -> f64 {
    libm::exp(t.clamp(-20.0, 20.0))
}

fn dim_term(p: &[f64], t: &[f64], means: &MeanSize) -> f64 {
    let m = [means.h, means.w, means.l];
    let mut s = 0.0;
    for c in 0..3 {
        let d = m[c] * decode_size(p[CH_SIZE + c]) - m[c] * decode_size(t[CH_SIZE + c]);
        s += d * d;
    }
    s
}

/// Soft confidence targets for each slot: `C` from the current keypoint
/// predictions for responsible slots, 0 elsewhere. The result is treated as
/// constant by all gradient paths.
pub fn confidence_targets(
    pred: &GridTensor,
    target: &TargetTensor,
    ctx: &LossContext,
) -> Vec<f64> {
    let mut out = vec![0.0; target.mask.len()];
    for cy in 0..pred.cells_y {
        for cx in 0..pred.cells_x {
            for a in 0..pred.anchors {
                let slot = (cy * pred.cells_x + cx) * pred.anchors + a;
                if !target.mask[slot] {
                    continue;
                }
                let (pk, _) = decode_slot(pred.slot(cy, cx, a), cx, cy, ctx.grid, ctx.means);
                let (tk, _) = decode_slot(target.tensor.slot(cy, cx, a), cx, cy, ctx.grid, ctx.means);
                out[slot] = confidence_target(&pk, &tk, &ctx.confidence);
            }
        }
    }
    out
}

/// Objectness loss given precomputed confidence targets. Returns the
/// responsible-slot term and the no-object term separately.
pub fn conf_loss(
    pred: &GridTensor,
    c_target: &[f64],
    obj_mask: &[bool],
    noobj_mask: &[bool],
) -> (f64, f64) {
    let pd = pred.as_slice();
    assert_eq!(obj_mask.len(), noobj_mask.len());
    assert_eq!(obj_mask.len() * CHANNELS, pd.len());
    let mut obj = 0.0;
    let mut noobj = 0.0;
    for slot in 0..obj_mask.len() {
        let po = sigmoid(pd[slot * CHANNELS + CH_OBJ]);
        if obj_mask[slot] {
            let d = c_target[slot] - po;
            obj += d * d;
        }
        if noobj_mask[slot] {
            noobj += po * po;
        }
    }
    (obj, noobj)
}

fn noobj_mask_of(mask: &[bool]) -> Vec<bool> {
    mask.iter().map(|&m| !m).collect()
}

/// Total loss with `C` recomputed from the current predictions.
pub fn total_loss(pred: &GridTensor, target: &TargetTensor, ctx: &LossContext) -> LossBreakdown {
    let c = confidence_targets(pred, target, ctx);
    total_loss_with_conf(pred, target, &c, ctx)
}

/// Total loss with externally supplied confidence targets. This is the
/// function the analytic gradient differentiates (and the one finite
/// differences are checked against).
pub fn total_loss_with_conf(
    pred: &GridTensor,
    target: &TargetTensor,
    c_target: &[f64],
    ctx: &LossContext,
) -> LossBreakdown {
    let coord = coord_loss(pred, &target.tensor, &target.mask);
    let dim = dim_loss(pred, &target.tensor, &target.mask, ctx.means);
    let noobj = noobj_mask_of(&target.mask);
    let (conf, conf_no) = conf_loss(pred, c_target, &target.mask, &noobj);
    LossBreakdown { coord, dim, conf, conf_no, total: 0.0 }.finish(&ctx.weights)
}

/// Total loss plus its analytic gradient with respect to every raw
/// prediction channel. `C` is detached (recomputed first, then held fixed).
pub fn total_loss_grad(
    pred: &GridTensor,
    target: &TargetTensor,
    ctx: &LossContext,
) -> (LossBreakdown, Vec<f64>) {
    let c = confidence_targets(pred, target, ctx);
    total_loss_grad_with_conf(pred, target, &c, ctx)
}

pub fn total_loss_grad_with_conf(
    pred: &GridTensor,
    target: &TargetTensor,
    c_target: &[f64],
    ctx: &LossContext,
) -> (LossBreakdown, Vec<f64>) {
    let breakdown = total_loss_with_conf(pred, target, c_target, ctx);
    let pd = pred.as_slice();
    let td = target.tensor.as_slice();
    let w = &ctx.weights;
    let m = [ctx.means.h, ctx.means.w, ctx.means.l];
    let mut grad = vec![0.0; pd.len()];

    for (slot, &responsible) in target.mask.iter().enumerate() {
        let base = slot * CHANNELS;
        let p = &pd[base..base + CHANNELS];
        let t = &td[base..base + CHANNELS];
        let g = &mut grad[base..base + CHANNELS];

        let po = sigmoid(p[CH_OBJ]);
        let dpo = po * (1.0 - po);
        if responsible {
            for c in 0..2 {
                let sp = sigmoid(p[c]);
                let st = sigmoid(t[c]);
                g[c] = w.coord * 2.0 * (sp - st) * sp * (1.0 - sp);
            }
            for c in 2..18 {
                g[c] = w.coord * 2.0 * (p[c] - t[c]);
            }
            for c in 0..3 {
                let ep = m[c] * decode_size(p[CH_SIZE + c]);
                let et = m[c] * decode_size(t[CH_SIZE + c]);
                // derivative is zero in the clamped region
                let slope = if p[CH_SIZE + c].abs() < 20.0 { ep } else { 0.0 };
                g[CH_SIZE + c] = w.dim * 2.0 * (ep - et) * slope;
            }
            g[CH_OBJ] = w.conf * 2.0 * (po - c_target[slot]) * dpo;
        } else {
            g[CH_OBJ] = w.conf_no * 2.0 * po * dpo;
        }
    }
    (breakdown, grad)
}

/// One ground-truth instance prepared for the symmetric loss: its fixed
/// anchor slot and the 22-channel encoding of every orbit spin.
#[derive(Debug, Clone)]
pub struct SymInstance {
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
    pub orbit: Vec<[f64; CHANNELS]>,
}

/// Outcome of encoding a scene's instances with their symmetry orbits.
#[derive(Debug, Clone)]
pub struct SymBuildOutcome {
    pub instances: Vec<SymInstance>,
    pub skipped_outside: usize,
    pub skipped_collisions: usize,
}

/// Encodes each box at every spin of its symmetry orbit. The responsible
/// anchor is chosen from the orbit-averaged keypoint hull so the assignment
/// is invariant under spinning the annotation, and stays fixed across the
/// orbit.
pub fn build_symmetric_instances(
    boxes: &[OrientedBox3D],
    intrinsics: &CameraIntrinsics,
    grid: &GridSpec,
    anchors: &AnchorSet,
    means: &MeanSize,
    n: usize,
) -> Result<SymBuildOutcome, CodecError> {
    assert!(n >= 1);
    assert_eq!(anchors.len(), grid.anchors, "anchor set does not match grid");
    let mut out = SymBuildOutcome {
        instances: Vec::new(),
        skipped_outside: 0,
        skipped_collisions: 0,
    };
    let mut taken = vec![false; grid.slots()];

    for b in boxes {
        let mut orbit_kpts: Vec<[[f64; 2]; 9]> = Vec::with_capacity(n);
        let mut behind = false;
        for member in symmetry_expand(b, n) {
            let pts3 = member.keypoints_3d();
            let mut kpts = [[0.0; 2]; 9];
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
                break;
            }
            orbit_kpts.push(kpts);
        }
        if behind {
            out.skipped_outside += 1;
            continue;
        }

        match encode_orbit(&orbit_kpts, &b.size, grid, means, intrinsics, anchors, &mut taken) {
            Ok(inst) => out.instances.push(inst),
            Err(EncodeError::CenterOutsideImage(..)) => out.skipped_outside += 1,
            Err(EncodeError::AnchorCollision(..)) => out.skipped_collisions += 1,
            Err(EncodeError::Geometry(g)) => return Err(g.into()),
        }
    }
    Ok(out)
}

/// Orbit encoding from precomputed per-spin keypoints (used directly by
/// training pipelines whose keypoints have passed through image-space
/// augmentation).
pub fn encode_orbit(
    orbit_kpts: &[[[f64; 2]; 9]],
    size: &crate::geometry::Size3D,
    grid: &GridSpec,
    means: &MeanSize,
    image: &CameraIntrinsics,
    anchors: &AnchorSet,
    taken: &mut [bool],
) -> Result<SymInstance, EncodeError> {
    assert!(!orbit_kpts.is_empty());
    let mut encoded = Vec::with_capacity(orbit_kpts.len());
    let mut hull_sum = (0.0, 0.0);
    let mut cell = (0usize, 0usize);
    for (i, kpts) in orbit_kpts.iter().enumerate() {
        let e = codec::encode_keypoints(kpts, size, grid, means, image)?;
        if i == 0 {
            cell = (e.cell_x, e.cell_y);
        }
        debug_assert_eq!(
            (e.cell_x, e.cell_y),
            cell,
            "orbit members share the projected center and therefore the cell"
        );
        let hull = keypoint_hull(kpts);
        hull_sum.0 += hull.0;
        hull_sum.1 += hull.1;
        encoded.push(e.values);
    }
    let mean_hull = (
        hull_sum.0 / orbit_kpts.len() as f64,
        hull_sum.1 / orbit_kpts.len() as f64,
    );

    for a in anchors.ranked_matches(mean_hull) {
        let slot = grid.slot_index(cell.1, cell.0, a);
        if !taken[slot] {
            taken[slot] = true;
            return Ok(SymInstance {
                cell_x: cell.0,
                cell_y: cell.1,
                anchor: a,
                orbit: encoded,
            });
        }
    }
    Err(EncodeError::AnchorCollision(cell.0, cell.1))
}

/// Composes the per-instance winning spins into a concrete target tensor.
fn compose_winning_targets(
    pred: &GridTensor,
    instances: &[SymInstance],
    ctx: &LossContext,
) -> TargetTensor {
    let mut target = TargetTensor::zeros(ctx.grid);
    for inst in instances {
        let slot_pred = pred.slot(inst.cell_y, inst.cell_x, inst.anchor);
        let mut best = 0usize;
        let mut best_val = f64::INFINITY;
        for (i, values) in inst.orbit.iter().enumerate() {
            let v = ctx.weights.coord * coord_term(slot_pred, values)
                + ctx.weights.dim * dim_term(slot_pred, values, ctx.means);
            if v < best_val {
                best_val = v;
                best = i;
            }
        }
        let slot = ctx.grid.slot_index(inst.cell_y, inst.cell_x, inst.anchor);
        target.mask[slot] = true;
        target
            .tensor
            .slot_mut(inst.cell_y, inst.cell_x, inst.anchor)
            .copy_from_slice(&inst.orbit[best]);
    }
    target
}

/// Symmetric loss: per-instance minimum over the spin orbit of the weighted
/// coordinate + dimension contribution, with confidence terms evaluated
/// against the winning spins.
pub fn symmetric_loss(
    pred: &GridTensor,
    instances: &[SymInstance],
    ctx: &LossContext,
) -> LossBreakdown {
    let target = compose_winning_targets(pred, instances, ctx);
    total_loss(pred, &target, ctx)
}

/// Symmetric loss plus its gradient (the subgradient through the winning
/// spins, which is the standard treatment of a minimum of smooth terms).
pub fn symmetric_loss_grad(
    pred: &GridTensor,
    instances: &[SymInstance],
    ctx: &LossContext,
) -> (LossBreakdown, Vec<f64>) {
    let target = compose_winning_targets(pred, instances, ctx);
    total_loss_grad(pred, &target, ctx)
}

/// Convenience wrapper: orbit encoding plus symmetric loss straight from
/// camera-frame boxes.
pub fn symmetric_loss_from_boxes(
    pred: &GridTensor,
    boxes: &[OrientedBox3D],
    intrinsics: &CameraIntrinsics,
    anchors: &AnchorSet,
    ctx: &LossContext,
    n: usize,
) -> Result<LossBreakdown, CodecError> {
    let built = build_symmetric_instances(boxes, intrinsics, ctx.grid, anchors, ctx.means, n)?;
    Ok(symmetric_loss(pred, &built.instances, ctx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Rotation, Size3D};
    use crate::math::Vec3;

    fn small_grid() -> GridSpec {
        GridSpec::new(128, 128, 32, 2).unwrap()
    }

    fn means() -> MeanSize {
        MeanSize::new(0.035, 0.03, 0.03).unwrap()
    }

    fn ctx<'a>(grid: &'a GridSpec, means: &'a MeanSize) -> LossContext<'a> {
        LossContext {
            grid,
            means,
            confidence: ConfidenceParams::default(),
            weights: LossWeights::default(),
        }
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64)
        }
    }

    fn random_tensor(grid: &GridSpec, rng: &mut impl FnMut() -> f64, scale: f64) -> GridTensor {
        let mut t = GridTensor::zeros(grid);
        for v in t.as_mut_slice() {
            *v = (rng() - 0.5) * scale;
        }
        t
    }

    fn random_target(grid: &GridSpec, rng: &mut impl FnMut() -> f64) -> TargetTensor {
        let mut t = TargetTensor::zeros(grid);
        let slots = grid.slots();
        for slot in 0..slots {
            if rng() < 0.2 {
                t.mask[slot] = true;
            }
        }
        for v in t.tensor.as_mut_slice() {
            *v = (rng() - 0.5) * 2.0;
        }
        t
    }

    /// Independent scalar re-implementation of all four loss terms.
    fn loop_oracle(
        pred: &GridTensor,
        target: &TargetTensor,
        c: &[f64],
        means: &MeanSize,
    ) -> (f64, f64, f64, f64) {
        let sig = |x: f64| 1.0 / (1.0 + (-x as f64).exp());
        let (mut coord, mut dim, mut conf, mut conf_no) = (0.0, 0.0, 0.0, 0.0);
        let m = [means.h, means.w, means.l];
        for cy in 0..pred.cells_y {
            for cx in 0..pred.cells_x {
                for a in 0..pred.anchors {
                    let slot = (cy * pred.cells_x + cx) * pred.anchors + a;
                    let p = pred.slot(cy, cx, a);
                    let t = target.tensor.slot(cy, cx, a);
                    let po = sig(p[21]);
                    if target.mask[slot] {
                        for k in 0..9 {
                            let (px, py, tx, ty) = if k == 0 {
                                (sig(p[0]), sig(p[1]), sig(t[0]), sig(t[1]))
                            } else {
                                (p[2 * k], p[2 * k + 1], t[2 * k], t[2 * k + 1])
                            };
                            coord += (px - tx) * (px - tx) + (py - ty) * (py - ty);
                        }
                        for cch in 0..3 {
                            let hp = m[cch] * (p[18 + cch]).clamp(-20.0, 20.0).exp();
                            let ht = m[cch] * (t[18 + cch]).clamp(-20.0, 20.0).exp();
                            dim += (hp - ht) * (hp - ht);
                        }
                        conf += (c[slot] - po) * (c[slot] - po);
                    } else {
                        conf_no += po * po;
                    }
                }
            }
        }
        (coord, dim, conf, conf_no)
    }

    #[test]
    fn zero_loss_when_pred_equals_target() {
        let grid = small_grid();
        let means = means();
        let ctx = ctx(&grid, &means);
        let mut rng = lcg(3);
        let target = random_target(&grid, &mut rng);
        // prediction equal to target everywhere; C = 1 for exact keypoints
        let pred = target.tensor.clone();
        let bd = total_loss(&pred, &target, &ctx);
        assert!(bd.coord.abs() < 1e-18);
        assert!(bd.dim.abs() < 1e-18);
        // conf term is (1 - sigmoid(p_o))^2 per responsible slot: not zero in
        // general, but exactly zero when p_o is large
        let mut pred2 = target.tensor.clone();
        for slot in 0..grid.slots() {
            if target.mask[slot] {
                pred2.as_mut_slice()[slot * CHANNELS + CH_OBJ] = 40.0; // sigmoid ~ 1
            } else {
                pred2.as_mut_slice()[slot * CHANNELS + CH_OBJ] = -40.0; // sigmoid ~ 0
            }
        }
        let bd2 = total_loss(&pred2, &target, &ctx);
        assert!(bd2.total < 1e-12);
    }

    #[test]
    fn single_vertex_offset_gives_unit_coord_loss() {
        let grid = small_grid();
        let means = means();
        let ctx = ctx(&grid, &means);
        let mut target = TargetTensor::zeros(&grid);
        let slot = grid.slot_index(1, 1, 0);
        target.mask[slot] = true;
        let mut pred = target.tensor.clone();
        // vertex 3's x channel off by exactly 1 grid unit
        pred.slot_mut(1, 1, 0)[6] = 1.0;
        let c = confidence_targets(&pred, &target, &ctx);
        let coord = coord_loss(&pred, &target.tensor, &target.mask);
        assert!((coord - 1.0).abs() < 1e-12);
        let _ = c;
    }

    #[test]
    fn dim_loss_centimeter_offset() {
        let grid = small_grid();
        let m = means();
        let mut target = TargetTensor::zeros(&grid);
        let slot = grid.slot_index(0, 0, 0);
        target.mask[slot] = true;
        let mut pred = target.tensor.clone();
        // decoded height off by +0.01 m: t_h = ln((h̄+0.01)/h̄)
        pred.slot_mut(0, 0, 0)[CH_SIZE] = libm::log((m.h + 0.01) / m.h);
        let dim = dim_loss(&pred, &target.tensor, &target.mask, &m);
        assert!((dim - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn empty_scene_conf_no_is_quarter_of_slots() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let target = TargetTensor::zeros(&grid);
        let pred = GridTensor::zeros(&grid); // sigmoid(0) = 0.5 everywhere
        let bd = total_loss(&pred, &target, &ctx);
        assert_eq!(bd.conf, 0.0);
        assert!((bd.conf_no - 0.25 * grid.slots() as f64).abs() < 1e-9);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let bd = LossBreakdown {
            coord: 2.0,
            dim: 1.0,
            conf: 1.0,
            conf_no: 10.0,
            total: 0.0,
        }
        .finish(&w);
        assert!((bd.total - 13.0).abs() < 1e-12);
    }

    #[test]
    fn matches_loop_oracle_on_random_tensors() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let mut rng = lcg(17);
        for _ in 0..20 {
            let target = random_target(&grid, &mut rng);
            let pred = random_tensor(&grid, &mut rng, 3.0);
            let c = confidence_targets(&pred, &target, &ctx);
            let bd = total_loss_with_conf(&pred, &target, &c, &ctx);
            let (coord, dim, conf, conf_no) = loop_oracle(&pred, &target, &c, &m);
            assert!((bd.coord - coord).abs() < 1e-6, "{} vs {coord}", bd.coord);
            assert!((bd.dim - dim).abs() < 1e-6);
            assert!((bd.conf - conf).abs() < 1e-6);
            assert!((bd.conf_no - conf_no).abs() < 1e-6);
            let w = LossWeights::default();
            let expect = w.coord * coord + w.dim * dim + w.conf * conf + w.conf_no * conf_no;
            assert!((bd.total - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let grid = GridSpec::new(96, 96, 32, 2).unwrap();
        let m = means();
        let ctx = ctx(&grid, &m);
        let mut rng = lcg(23);
        for _case in 0..10 {
            let target = random_target(&grid, &mut rng);
            let pred = random_tensor(&grid, &mut rng, 2.0);
            let c = confidence_targets(&pred, &target, &ctx);
            let (_, grad) = total_loss_grad_with_conf(&pred, &target, &c, &ctx);
            let eps = 1e-4;
            let n = pred.as_slice().len();
            for i in 0..n {
                let mut plus = pred.clone();
                plus.as_mut_slice()[i] += eps;
                let mut minus = pred.clone();
                minus.as_mut_slice()[i] -= eps;
                let fp = total_loss_with_conf(&plus, &target, &c, &ctx).total;
                let fm = total_loss_with_conf(&minus, &target, &c, &ctx).total;
                let fd = (fp - fm) / (2.0 * eps);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(
                    (fd - grad[i]).abs() / denom < 1e-3,
                    "channel {i}: fd {fd} vs analytic {}",
                    grad[i]
                );
            }
        }
    }

    fn scene_boxes(rng: &mut impl FnMut() -> f64, count: usize) -> Vec<OrientedBox3D> {
        (0..count)
            .map(|i| {
                let rot = Rotation::from_axis_angle(
                    Vec3::new(rng() - 0.5, rng() - 0.5, rng() - 0.5),
                    rng() * 6.0,
                )
                .unwrap_or(Rotation::IDENTITY);
                OrientedBox3D::new(
                    Pose::new(
                        rot,
                        Vec3::new(
                            (rng() - 0.5) * 0.1 + (i as f64 - 0.5) * 0.08,
                            (rng() - 0.5) * 0.1,
                            0.35 + rng() * 0.2,
                        ),
                    ),
                    Size3D::new(0.03 + rng() * 0.02, 0.024 + rng() * 0.012, 0.024 + rng() * 0.012)
                        .unwrap(),
                )
            })
            .collect()
    }

    fn test_cam(grid: &GridSpec) -> CameraIntrinsics {
        CameraIntrinsics::new(
            220.0,
            220.0,
            (grid.input_width - 1) as f64 / 2.0,
            (grid.input_height - 1) as f64 / 2.0,
            grid.input_width,
            grid.input_height,
        )
        .unwrap()
    }

    fn anchors2() -> AnchorSet {
        AnchorSet::new(vec![(18.0, 18.0), (36.0, 36.0)]).unwrap()
    }

    #[test]
    fn symmetric_loss_zero_coord_on_orbit_member() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let cam = test_cam(&grid);
        let anchors = anchors2();
        let mut rng = lcg(31);
        let boxes = scene_boxes(&mut rng, 1);

        let built =
            build_symmetric_instances(&boxes, &cam, &grid, &anchors, &m, 12).unwrap();
        assert_eq!(built.instances.len(), 1);
        // prediction equal to orbit member 7
        let inst = &built.instances[0];
        let mut pred = GridTensor::zeros(&grid);
        pred.slot_mut(inst.cell_y, inst.cell_x, inst.anchor)
            .copy_from_slice(&inst.orbit[7]);
        let bd = symmetric_loss(&pred, &built.instances, &ctx);
        assert!(bd.coord < 1e-18, "coord term is {}", bd.coord);
        assert!(bd.dim < 1e-18);
    }

    #[test]
    fn symmetric_n1_equals_total_loss() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let cam = test_cam(&grid);
        let anchors = anchors2();
        let mut rng = lcg(37);
        let boxes = scene_boxes(&mut rng, 2);
        let pred = random_tensor(&grid, &mut rng, 2.0);

        let sym = symmetric_loss_from_boxes(&pred, &boxes, &cam, &anchors, &ctx, 1).unwrap();
        let built = crate::codec::build_targets(&boxes, &cam, &grid, &anchors, &m).unwrap();
        let plain = total_loss(&pred, &built.targets, &ctx);
        assert!((sym.total - plain.total).abs() < 1e-12);
        assert!((sym.coord - plain.coord).abs() < 1e-12);
    }

    #[test]
    fn symmetric_matches_exhaustive_orbit_enumeration() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let cam = test_cam(&grid);
        let anchors = anchors2();
        let mut rng = lcg(41);
        let n = 6; // keep n^M enumerable
        for count in 1..=2usize {
            for _ in 0..5 {
                let boxes = scene_boxes(&mut rng, count);
                let built =
                    build_symmetric_instances(&boxes, &cam, &grid, &anchors, &m, n).unwrap();
                if built.instances.len() != count {
                    continue; // collision: enumeration assumes distinct slots
                }
                let pred = random_tensor(&grid, &mut rng, 2.0);
                let sym = symmetric_loss(&pred, &built.instances, &ctx);

                // oracle: enumerate all n^M spin combinations, compose the
                // full target, take the minimal weighted coord+dim total,
                // then evaluate the complete loss at that combination
                let mut best_total = f64::INFINITY;
                let mut best_combo = vec![0usize; count];
                let mut combo = vec![0usize; count];
                loop {
                    let mut target = TargetTensor::zeros(&grid);
                    for (inst, &spin) in built.instances.iter().zip(combo.iter()) {
                        let slot = grid.slot_index(inst.cell_y, inst.cell_x, inst.anchor);
                        target.mask[slot] = true;
                        target
                            .tensor
                            .slot_mut(inst.cell_y, inst.cell_x, inst.anchor)
                            .copy_from_slice(&inst.orbit[spin]);
                    }
                    let coord = coord_loss(&pred, &target.tensor, &target.mask);
                    let dim = dim_loss(&pred, &target.tensor, &target.mask, &m);
                    let v = ctx.weights.coord * coord + ctx.weights.dim * dim;
                    if v < best_total {
                        best_total = v;
                        best_combo = combo.clone();
                    }
                    // next combination
                    let mut i = 0;
                    loop {
                        if i == count {
                            break;
                        }
                        combo[i] += 1;
                        if combo[i] < n {
                            break;
                        }
                        combo[i] = 0;
                        i += 1;
                    }
                    if i == count {
                        break;
                    }
                }
                let mut target = TargetTensor::zeros(&grid);
                for (inst, &spin) in built.instances.iter().zip(best_combo.iter()) {
                    let slot = grid.slot_index(inst.cell_y, inst.cell_x, inst.anchor);
                    target.mask[slot] = true;
                    target
                        .tensor
                        .slot_mut(inst.cell_y, inst.cell_x, inst.anchor)
                        .copy_from_slice(&inst.orbit[spin]);
                }
                let oracle = total_loss(&pred, &target, &ctx);
                assert!(
                    (sym.total - oracle.total).abs() < 1e-9,
                    "sym {} vs exhaustive {}",
                    sym.total,
                    oracle.total
                );
            }
        }
    }

    #[test]
    fn symmetric_never_exceeds_loss_on_unrotated_targets() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let cam = test_cam(&grid);
        let anchors = anchors2();
        let mut rng = lcg(47);
        for _ in 0..20 {
            let boxes = scene_boxes(&mut rng, 2);
            let pred = random_tensor(&grid, &mut rng, 2.0);
            let built =
                build_symmetric_instances(&boxes, &cam, &grid, &anchors, &m, 12).unwrap();
            let sym = symmetric_loss(&pred, &built.instances, &ctx);
            // member 0 of every orbit is the unrotated annotation at the
            // same slot; the per-instance min cannot exceed it
            let mut unrotated = TargetTensor::zeros(&grid);
            for inst in &built.instances {
                let slot = grid.slot_index(inst.cell_y, inst.cell_x, inst.anchor);
                unrotated.mask[slot] = true;
                unrotated
                    .tensor
                    .slot_mut(inst.cell_y, inst.cell_x, inst.anchor)
                    .copy_from_slice(&inst.orbit[0]);
            }
            let plain = total_loss(&pred, &unrotated, &ctx);
            let sym_cd = ctx.weights.coord * sym.coord + ctx.weights.dim * sym.dim;
            let plain_cd = ctx.weights.coord * plain.coord + ctx.weights.dim * plain.dim;
            assert!(sym_cd <= plain_cd + 1e-9);
        }
    }

    #[test]
    fn symmetric_loss_invariant_under_spinning_annotations() {
        let grid = small_grid();
        let m = means();
        let ctx = ctx(&grid, &m);
        let cam = test_cam(&grid);
        let anchors = anchors2();
        let mut rng = lcg(53);
        let n = 12;
        for _ in 0..10 {
            let boxes = scene_boxes(&mut rng, 2);
            let pred = random_tensor(&grid, &mut rng, 2.0);
            let base = match symmetric_loss_from_boxes(&pred, &boxes, &cam, &anchors, &ctx, n) {
                Ok(s) => s,
                Err(_) => continue,
            };
            for k in [1usize, 5, 9] {
                let spun: Vec<OrientedBox3D> = boxes
                    .iter()
                    .map(|b| {
                        let spin = Rotation::from_axis_angle(
                            Vec3::new(0.0, 1.0, 0.0),
                            core::f64::consts::TAU * k as f64 / n as f64,
                        )
                        .unwrap();
                        OrientedBox3D::new(
                            Pose::new(b.pose.rotation.compose(&spin), b.pose.translation),
                            b.size,
                        )
                    })
                    .collect();
                let v = symmetric_loss_from_boxes(&pred, &spun, &cam, &anchors, &ctx, n).unwrap();
                assert!(
                    (v.total - base.total).abs() < 1e-6,
                    "spin {k}: {} vs {}",
                    v.total,
                    base.total
                );
            }
        }
    }
}
