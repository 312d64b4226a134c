//! Spot check of the exact oriented-box IoU against a Monte Carlo volume
//! estimate. The full 200-pair study lives in the workspace acceptance
//! suite; this is a quick independent sanity pass.

use berrypose_core::geometry::{box3d_iou, OrientedBox3D, Pose, Rotation, Size3D};
use berrypose_core::math::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
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
    .unwrap()
}

/// Monte Carlo IoU: sample points uniformly inside box `a`, count the hits
/// inside `b`. Independent of the clipping implementation.
fn monte_carlo_iou(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let rb = b.pose.rotation.to_matrix().transpose();
    let tb = b.pose.translation;
    let (hw, hh, hl) = (0.5 * b.size.w, 0.5 * b.size.h, 0.5 * b.size.l);
    let mut hits = 0usize;
    for _ in 0..samples {
        let local = Vec3::new(
            (rng.random::<f64>() - 0.5) * a.size.w,
            (rng.random::<f64>() - 0.5) * a.size.h,
            (rng.random::<f64>() - 0.5) * a.size.l,
        );
        let p = a.pose.apply(local);
        let q = rb.mul_vec(p - tb);
        if q.x.abs() <= hw && q.y.abs() <= hh && q.z.abs() <= hl {
            hits += 1;
        }
    }
    let va = a.size.volume();
    let vb = b.size.volume();
    // Laplace-smoothed hit rate keeps sigma positive near 0 and 1
    let p_hat = (hits as f64 + 1.0) / (samples as f64 + 2.0);
    let vi = va * hits as f64 / samples as f64;
    let iou = vi / (va + vb - vi);
    let sigma_v = va * (p_hat * (1.0 - p_hat) / samples as f64).sqrt();
    // first-order propagation through iou = vi / (va + vb - vi)
    let union = va + vb - vi;
    let sigma_iou = sigma_v * (va + vb) / (union * union);
    (iou, sigma_iou)
}

#[test]
fn exact_iou_agrees_with_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    for _ in 0..20 {
        let size_a = Size3D::new(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
        )
        .unwrap();
        let size_b = Size3D::new(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
        )
        .unwrap();
        let a = OrientedBox3D::new(
            Pose::new(random_rotation(&mut rng), Vec3::ZERO),
            size_a,
        );
        let b = OrientedBox3D::new(
            Pose::new(
                random_rotation(&mut rng),
                Vec3::new(
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                ),
            ),
            size_b,
        );
        let exact = box3d_iou(&a, &b);
        let (mc, sigma) = monte_carlo_iou(&a, &b, 200_000, &mut rng);
        let tol = (3.0 * sigma).max(1e-4);
        assert!(
            (exact - mc).abs() <= tol,
            "exact {exact} vs mc {mc} (sigma {sigma})"
        );
        checked += 1;
    }
    assert_eq!(checked, 20);
}
