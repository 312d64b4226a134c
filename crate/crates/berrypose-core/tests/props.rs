//! Property tests for the geometry and codec invariants.

use berrypose_core::codec::{
    self, AnchorSet, ConfidenceParams, Detection, GridSpec, MeanSize,
};
use berrypose_core::geometry::{
    box3d_iou, symmetry_expand, CameraIntrinsics, OrientedBox3D, Pose, Rotation, Size3D,
};
use berrypose_core::math::Vec3;
use proptest::prelude::*;

fn rotation_strategy() -> impl Strategy<Value = Rotation> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(u1, u2, u3)| {
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        Rotation::from_wxyz(
            a * (std::f64::consts::TAU * u2).sin(),
            a * (std::f64::consts::TAU * u2).cos(),
            b * (std::f64::consts::TAU * u3).sin(),
            b * (std::f64::consts::TAU * u3).cos(),
        )
        .unwrap()
    })
}

fn box_strategy() -> impl Strategy<Value = OrientedBox3D> {
    (
        rotation_strategy(),
        -0.2..0.2f64,
        -0.2..0.2f64,
        0.3..1.0f64,
        0.02..0.08f64,
        0.02..0.08f64,
        0.02..0.08f64,
    )
        .prop_map(|(r, x, y, z, h, w, l)| {
            OrientedBox3D::new(
                Pose::new(r, Vec3::new(x, y, z)),
                Size3D::new(h, w, l).unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
        let ab = box3d_iou(&a, &b);
        let ba = box3d_iou(&b, &a);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn iou_self_is_one(a in box_strategy()) {
        prop_assert!((box3d_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_invariant_under_rigid_transform(
        a in box_strategy(),
        b in box_strategy(),
        q in rotation_strategy(),
        tx in -0.5..0.5f64,
        ty in -0.5..0.5f64,
        tz in -0.5..0.5f64,
    ) {
        let base = box3d_iou(&a, &b);
        let rigid = Pose::new(q, Vec3::new(tx, ty, tz));
        let move_box = |x: &OrientedBox3D| OrientedBox3D::new(rigid.compose(&x.pose), x.size);
        let moved = box3d_iou(&move_box(&a), &move_box(&b));
        prop_assert!((base - moved).abs() < 1e-6, "{base} vs {moved}");
    }

    #[test]
    fn symmetry_orbit_preserves_translation_and_size(a in box_strategy()) {
        for member in symmetry_expand(&a, 12) {
            prop_assert_eq!(member.pose.translation, a.pose.translation);
            prop_assert_eq!(member.size, a.size);
        }
    }

    #[test]
    fn single_instance_codec_round_trip(b in box_strategy()) {
        let grid = GridSpec::new(416, 416, 32, 3).unwrap();
        let means = MeanSize::new(0.04, 0.035, 0.035).unwrap();
        let anchors = AnchorSet::new(vec![(15.0, 15.0), (30.0, 30.0), (60.0, 60.0)]).unwrap();
        let cam = CameraIntrinsics::new(500.0, 500.0, 207.5, 207.5, 416, 416).unwrap();
        let built = codec::build_targets(&[b], &cam, &grid, &anchors, &means).unwrap();
        if built.placements.is_empty() {
            // center projected outside the image: nothing to check
            return Ok(());
        }
        let dets = codec::decode(&built.targets.tensor, &grid, &means, 0.0).unwrap();
        let gt: Vec<(f64, f64)> = cam.project_many(&b.keypoints_3d()).unwrap();
        let hit = dets.iter().any(|d| {
            (0..9).all(|k| {
                (d.keypoints[k][0] - gt[k].0).abs() < 1e-4
                    && (d.keypoints[k][1] - gt[k].1).abs() < 1e-4
            }) && (d.size.h - b.size.h).abs() < 1e-9
                && (d.size.w - b.size.w).abs() < 1e-9
                && (d.size.l - b.size.l).abs() < 1e-9
        });
        prop_assert!(hit, "no decoded detection reproduces the instance");
    }

    #[test]
    fn confidence_target_stays_in_unit_interval(
        du in -60.0..60.0f64,
        dv in -60.0..60.0f64,
        alpha in 0.5..6.0f64,
        d_th in 5.0..60.0f64,
    ) {
        let gt = [[100.0, 100.0]; 9];
        let mut pred = gt;
        for kp in pred.iter_mut() {
            kp[0] += du;
            kp[1] += dv;
        }
        let c = codec::confidence_target(&pred, &gt, &ConfidenceParams { alpha, d_th_px: d_th });
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn nms_output_is_sorted_subset(
        confs in proptest::collection::vec(0.01..1.0f64, 0..12),
        offsets in proptest::collection::vec(0.0..200.0f64, 0..12),
        threshold in 0.1..0.9f64,
    ) {
        let n = confs.len().min(offsets.len());
        let dets: Vec<Detection> = (0..n)
            .map(|i| Detection {
                keypoints: {
                    let mut k = [[0.0; 2]; 9];
                    for (j, kp) in k.iter_mut().enumerate() {
                        kp[0] = offsets[i] + (j % 3) as f64 * 15.0;
                        kp[1] = offsets[i] * 0.5 + (j / 3) as f64 * 15.0;
                    }
                    k
                },
                size: Size3D::new(0.03, 0.03, 0.03).unwrap(),
                confidence: confs[i],
                pose: None,
            })
            .collect();
        let kept = codec::nms(dets.clone(), threshold);
        prop_assert!(kept.len() <= dets.len());
        for w in kept.windows(2) {
            prop_assert!(w[0].confidence >= w[1].confidence);
        }
        for k in &kept {
            prop_assert!(dets.iter().any(|d| d == k));
        }
    }
}
