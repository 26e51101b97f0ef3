//! Procedural ground-plane scenes, fisheye rendering, BEV ground truth and
//! the dataset directory format.

mod dataset;
mod render;
mod scene;

pub use dataset::{
    format_pose, frame_dir, make_sequence, parse_pose, pose_deltas, read_sequence, scene_dir, write_manifest,
    write_sequence, Dataset, Manifest, SceneSample, BEV_FILE, MANIFEST_FILE, POSE_FILE, RIG_FILE,
};
pub use render::{
    bev_ground_truth, classes_to_image, pixel_ground_point, quantize_color, render_classes, render_rig, PALETTE,
};
pub use scene::{
    generate_scene, SceneParams, SyntheticScene, EGO, ROAD, SIDEWALK, VEGETATION, VEHICLE, VOID,
};
