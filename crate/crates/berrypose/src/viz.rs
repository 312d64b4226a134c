//! Wireframe overlays: projected 12-edge box outlines drawn over an image.

use berrypose_core::geometry::{CameraIntrinsics, OrientedBox3D};
use image::RgbImage;

pub const PREDICTION_COLOR: [u8; 3] = [255, 140, 0]; // orange
pub const GROUND_TRUTH_COLOR: [u8; 3] = [255, 255, 255]; // white

fn draw_line(img: &mut RgbImage, p0: (f64, f64), p1: (f64, f64), color: [u8; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let steps = ((p1.0 - p0.0).abs().max((p1.1 - p0.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = p0.0 + (p1.0 - p0.0) * t;
        let y = p0.1 + (p1.1 - p0.1) * t;
        if x >= 0.0 && x < w && y >= 0.0 && y < h {
            img.put_pixel(x.round().min(w - 1.0) as u32, y.round().min(h - 1.0) as u32, image::Rgb(color));
        }
    }
}

/// Draws the projected wireframe of each box (edge topology follows the
/// frozen sign-bit corner order). Returns the number of edges drawn; edges
/// with an endpoint behind the camera are skipped.
pub fn draw_boxes(
    img: &mut RgbImage,
    boxes: &[OrientedBox3D],
    k: &CameraIntrinsics,
    color: [u8; 3],
) -> usize {
    let mut drawn = 0;
    for b in boxes {
        let corners = b.corners();
        let projected: Vec<Option<(f64, f64)>> =
            corners.iter().map(|&c| k.project(c).ok()).collect();
        for &(a, bidx) in OrientedBox3D::EDGES.iter() {
            if let (Some(p0), Some(p1)) = (projected[a], projected[bidx]) {
                draw_line(img, p0, p1, color);
                drawn += 1;
            }
        }
    }
    drawn
}
