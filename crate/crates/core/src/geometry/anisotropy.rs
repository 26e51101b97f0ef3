use nalgebra::{Matrix2, Vector3};

use super::camera::CameraIntrinsics;
use crate::tensor::Tensor;

const STEP: f64 = 0.5;

/// `log10(σ_max / σ_min)` of the Jacobian of pixel → viewing direction at
/// `(u, v)`, by central differences of ±0.5 px. NaN when any stencil sample
/// falls outside the image circle.
pub fn anisotropy_at(intr: &CameraIntrinsics, u: f64, v: f64) -> f64 {
    let ray = |du: f64, dv: f64| intr.pixel_to_ray(u + du, v + dv).ok();
    let (Some(up), Some(um), Some(vp), Some(vm)) = (ray(STEP, 0.0), ray(-STEP, 0.0), ray(0.0, STEP), ray(0.0, -STEP))
    else {
        return f64::NAN;
    };
    let ju: Vector3<f64> = (up - um) / (2.0 * STEP);
    let jv: Vector3<f64> = (vp - vm) / (2.0 * STEP);
    let jtj = Matrix2::new(ju.dot(&ju), ju.dot(&jv), jv.dot(&ju), jv.dot(&jv));
    let eig = jtj.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) {
        return f64::NAN;
    }
    0.5 * (hi / lo).log10()
}

/// Heatmap `[H, W]` evaluated at every pixel center.
pub fn anisotropy_heatmap(intr: &CameraIntrinsics) -> Tensor {
    let (h, w) = (intr.height, intr.width);
    let mut data = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            data.push(anisotropy_at(intr, col as f64, row as f64));
        }
    }
    Tensor::from_vec(&[h, w], data)
}
