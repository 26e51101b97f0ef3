use nalgebra::{Matrix3, Vector3};

use super::poly::DistortionPoly;
use crate::error::{Error, Result};

/// Pixel centers sit at integer coordinates, so the image spans
/// `[-0.5, W - 0.5) x [-0.5, H - 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub poly: DistortionPoly,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(poly: DistortionPoly, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera_intrinsics", "empty image"));
        }
        let intr = CameraIntrinsics {
            poly,
            cx,
            cy,
            width,
            height,
        };
        if !intr.contains(cx, cy) {
            return Err(Error::invalid(
                "camera_intrinsics",
                format!("principal point ({cx}, {cy}) outside {width}x{height} image"),
            ));
        }
        Ok(intr)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Camera-frame unit direction of the ray through pixel `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<Vector3<f64>> {
        let (du, dv) = (u - self.cx, v - self.cy);
        let r = du.hypot(dv);
        let theta = self.poly.radius_to_theta(r)?;
        let phi = dv.atan2(du);
        let s = theta.sin();
        Ok(Vector3::new(s * phi.cos(), s * phi.sin(), theta.cos()))
    }

    /// Pixel of a camera-frame direction plus its incidence angle. `None` when
    /// the direction is degenerate or beyond `theta_max`.
    pub fn ray_to_pixel(&self, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let rho = dir.x.hypot(dir.y);
        if rho == 0.0 && dir.z <= 0.0 {
            return None;
        }
        let theta = rho.atan2(dir.z);
        let r = self.poly.theta_to_radius(theta).ok()?;
        let phi = dir.y.atan2(dir.x);
        Some((self.cx + r * phi.cos(), self.cy + r * phi.sin(), theta))
    }
}

/// World-to-camera transform `X_cam = R X_world + t`. Camera axes follow the
/// usual optical convention: z along the optical axis, x right, y down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Camera placement in the ego frame (x forward, y left, z up). Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl CameraPose {
    pub fn new(position: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Self {
        CameraPose {
            position: Vector3::from(position),
            yaw,
            pitch,
            roll,
        }
    }
}

/// Orientation axes `(right, down, forward)` in the world frame.
fn pose_axes(yaw: f64, pitch: f64, roll: f64) -> [Vector3<f64>; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let f = Vector3::new(cp * cy, cp * sy, sp);
    let r0 = Vector3::new(sy, -cy, 0.0);
    let d0 = f.cross(&r0);
    let (sr, cr) = roll.sin_cos();
    [r0 * cr + d0 * sr, d0 * cr - r0 * sr, f]
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid(
                "camera_extrinsics",
                format!("rotation not proper orthonormal (|RᵀR - I| = {ortho:e}, det = {det})"),
            ));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera_extrinsics", "non-finite translation"));
        }
        Ok(CameraExtrinsics {
            rotation,
            translation,
        })
    }

    pub fn from_pose(pose: &CameraPose) -> Self {
        let [r, d, f] = pose_axes(pose.yaw, pose.pitch, pose.roll);
        let rotation = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        CameraExtrinsics {
            rotation,
            translation: -(rotation * pose.position),
        }
    }

    /// Recovers yaw/pitch/roll and position. Ill-conditioned when the optical
    /// axis is vertical.
    pub fn to_pose(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        let (r, f) = (rt.column(0).into_owned(), rt.column(2).into_owned());
        let pitch = f.z.clamp(-1.0, 1.0).asin();
        let yaw = f.y.atan2(f.x);
        let [r0, d0, _] = pose_axes(yaw, pitch, 0.0);
        let roll = r.dot(&d0).atan2(r.dot(&r0));
        CameraPose {
            position: self.center(),
            yaw,
            pitch,
            roll,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub theta: f64,
    pub visible: bool,
}

impl Projection {
    const HIDDEN: Projection = Projection {
        u: f64::NAN,
        v: f64::NAN,
        theta: f64::NAN,
        visible: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Camera {
            intrinsics,
            extrinsics,
        }
    }

    /// Points beyond `theta_max` or at the camera center come back with NaN
    /// pixel coordinates; points inside the cone but off the sensor keep
    /// their coordinates and are flagged invisible.
    pub fn project(&self, x_world: &Vector3<f64>) -> Projection {
        let xc = self.extrinsics.world_to_camera(x_world);
        if xc.norm() == 0.0 {
            return Projection::HIDDEN;
        }
        match self.intrinsics.ray_to_pixel(&xc) {
            Some((u, v, theta)) => Projection {
                u,
                v,
                theta,
                visible: self.intrinsics.contains(u, v),
            },
            None => Projection {
                theta: xc.x.hypot(xc.y).atan2(xc.z),
                ..Projection::HIDDEN
            },
        }
    }

    /// World-frame ray `(origin, unit direction)` through a pixel.
    pub fn unproject(&self, u: f64, v: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let d = self.intrinsics.pixel_to_ray(u, v)?;
        Ok((
            self.extrinsics.center(),
            self.extrinsics.rotation.transpose() * d,
        ))
    }
}
