//! Fisheye camera model, surround rig, BEV grid and projection of BEV
//! queries into the camera images.

mod anisotropy;
mod bev;
mod camera;
mod poly;
mod rig;

pub use anisotropy::{anisotropy_at, anisotropy_heatmap};
pub use bev::{bev_reference_points, BEVGrid, EgoPose, PoseDelta, ReferencePoints};
pub use camera::{Camera, CameraExtrinsics, CameraIntrinsics, CameraPose, Projection};
pub use poly::DistortionPoly;
pub use rig::{
    CameraRig, DEFAULT_CAMERA_NAMES, DEFAULT_MOUNT_HEIGHT, DEFAULT_PITCH_DEG, DEFAULT_THETA_MAX_DEG,
    EGO_HALF_LENGTH, EGO_HALF_WIDTH,
};
