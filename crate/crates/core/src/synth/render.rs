use nalgebra::Vector3;

use super::scene::{SyntheticScene, VOID};
use crate::geometry::{BEVGrid, Camera, CameraRig, EgoPose};
use crate::tensor::Tensor;

/// RGB colors indexed by class id.
pub const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],       // void
    [128, 64, 128],  // road
    [244, 35, 232],  // sidewalk
    [107, 142, 35],  // vegetation
    [0, 0, 142],     // vehicle
    [255, 255, 0],   // ego
];

/// Ego-frame ground hit `(x, y)` of pixel `(u, v)`, if the ray reaches `z = 0`.
pub fn pixel_ground_point(cam: &Camera, u: f64, v: f64) -> Option<(f64, f64)> {
    let (origin, dir) = cam.unproject(u, v).ok()?;
    if dir.z >= -1e-12 {
        return None;
    }
    let t = -origin.z / dir.z;
    let p: Vector3<f64> = origin + dir * t;
    Some((p.x, p.y))
}

/// Class at each pixel of one camera; void where the ray misses the ground
/// or leaves the image circle.
pub fn render_classes(scene: &SyntheticScene, cam: &Camera, pose: &EgoPose) -> Vec<u8> {
    let (h, w) = (cam.intrinsics.height, cam.intrinsics.width);
    let mut out = vec![VOID; h * w];
    for r in 0..h {
        for c in 0..w {
            if let Some((x, y)) = pixel_ground_point(cam, c as f64, r as f64) {
                out[r * w + c] = scene.class_at_ego(pose, x, y);
            }
        }
    }
    out
}

/// Class map to a `[3, H, W]` image with channels in `[0, 1]`.
pub fn classes_to_image(classes: &[u8], h: usize, w: usize) -> Tensor {
    let mut d = vec![0.0; 3 * h * w];
    for (i, &k) in classes.iter().enumerate() {
        for ch in 0..3 {
            d[ch * h * w + i] = PALETTE[k as usize][ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], d)
}

/// Nearest palette entry of an RGB triple in `[0, 1]`.
pub fn quantize_color(rgb: [f64; 3]) -> u8 {
    (0..PALETTE.len())
        .min_by(|&a, &b| {
            let d = |k: usize| {
                (0..3)
                    .map(|ch| (rgb[ch] - PALETTE[k][ch] as f64 / 255.0).powi(2))
                    .sum::<f64>()
            };
            d(a).total_cmp(&d(b))
        })
        .unwrap() as u8
}

pub fn render_rig(scene: &SyntheticScene, rig: &CameraRig, pose: &EgoPose) -> Vec<Tensor> {
    rig.cameras()
        .iter()
        .map(|cam| {
            let cls = render_classes(scene, cam, pose);
            classes_to_image(&cls, cam.intrinsics.height, cam.intrinsics.width)
        })
        .collect()
}

/// Nearest-cell class map `[H, W]` in the ego frame at `pose`.
pub fn bev_ground_truth(scene: &SyntheticScene, pose: &EgoPose, grid: &BEVGrid) -> Tensor {
    let mut d = Vec::with_capacity(grid.num_queries());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let (x, y) = grid.cell_to_ego(r as f64, c as f64);
            d.push(scene.class_at_ego(pose, x, y) as f64);
        }
    }
    Tensor::from_vec(&[grid.height, grid.width], d)
}
