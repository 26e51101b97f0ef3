use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::camera::{Camera, CameraExtrinsics, CameraIntrinsics, CameraPose};
use super::poly::DistortionPoly;
use crate::error::{Error, Result};

/// Cameras mounted on the ego vehicle, all expressed in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    names: Vec<String>,
}

pub const DEFAULT_CAMERA_NAMES: [&str; 4] = ["front", "left", "rear", "right"];

/// Ego box half extents used for the default mounting positions (m).
pub const EGO_HALF_LENGTH: f64 = 2.0;
pub const EGO_HALF_WIDTH: f64 = 1.0;
pub const DEFAULT_MOUNT_HEIGHT: f64 = 1.0;
pub const DEFAULT_PITCH_DEG: f64 = -30.0;
pub const DEFAULT_THETA_MAX_DEG: f64 = 95.0;

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, names: Vec<String>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("camera_rig", "rig needs at least one camera"));
        }
        if names.len() != cameras.len() {
            return Err(Error::invalid("camera_rig", "one name per camera"));
        }
        Ok(CameraRig { cameras, names })
    }

    /// Four cameras at the side midpoints of the ego box, looking outward and
    /// pitched down, sharing one set of intrinsics.
    pub fn surround(intrinsics: CameraIntrinsics) -> Self {
        let pitch = DEFAULT_PITCH_DEG.to_radians();
        let h = DEFAULT_MOUNT_HEIGHT;
        let mounts = [
            ([EGO_HALF_LENGTH, 0.0, h], 0.0),
            ([0.0, EGO_HALF_WIDTH, h], 90.0),
            ([-EGO_HALF_LENGTH, 0.0, h], 180.0),
            ([0.0, -EGO_HALF_WIDTH, h], 270.0),
        ];
        let cameras = mounts
            .iter()
            .map(|&(pos, yaw_deg)| {
                let pose = CameraPose::new(pos, f64::to_radians(yaw_deg), pitch, 0.0);
                Camera::new(intrinsics, CameraExtrinsics::from_pose(&pose))
            })
            .collect();
        CameraRig {
            cameras,
            names: DEFAULT_CAMERA_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn default_desk() -> Self {
        let poly = DistortionPoly::new([22.0, -1.5, 0.0, 0.0], DEFAULT_THETA_MAX_DEG.to_radians())
            .expect("default desk polynomial is monotone");
        Self::surround(CameraIntrinsics::new(poly, 31.5, 31.5, 64, 64).unwrap())
    }

    pub fn default_full() -> Self {
        let poly = DistortionPoly::new([220.0, -15.0, 0.0, 0.0], DEFAULT_THETA_MAX_DEG.to_radians())
            .expect("default full polynomial is monotone");
        Self::surround(CameraIntrinsics::new(poly, 319.5, 269.5, 640, 540).unwrap())
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Text form: a `camera = <name>` line opens each block, followed by
    /// `key = value` lines. Angles are degrees, positions meters.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# camera rig: angles in degrees, position in meters (ego frame)\n");
        for (cam, name) in self.cameras.iter().zip(&self.names) {
            let i = &cam.intrinsics;
            let pose = cam.extrinsics.to_pose();
            let a = i.poly.coeffs();
            let _ = writeln!(s, "camera = {name}");
            for (k, v) in ["a1", "a2", "a3", "a4"].iter().zip(a) {
                let _ = writeln!(s, "{k} = {v:?}");
            }
            let _ = writeln!(s, "theta_max = {:?}", i.poly.theta_max().to_degrees());
            let _ = writeln!(s, "cx = {:?}\ncy = {:?}", i.cx, i.cy);
            let _ = writeln!(s, "H = {}\nW = {}", i.height, i.width);
            let _ = writeln!(s, "yaw = {:?}", pose.yaw.to_degrees());
            let _ = writeln!(s, "pitch = {:?}", pose.pitch.to_degrees());
            let _ = writeln!(s, "roll = {:?}", pose.roll.to_degrees());
            let p = pose.position;
            let _ = writeln!(s, "tx = {:?}\nty = {:?}\ntz = {:?}", p.x, p.y, p.z);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        const KEYS: [&str; 15] = [
            "a1", "a2", "a3", "a4", "theta_max", "cx", "cy", "H", "W", "yaw", "pitch", "roll", "tx", "ty",
            "tz",
        ];
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        struct Block {
            name: String,
            offset: usize,
            values: [Option<f64>; 15],
        }
        let mut blocks: Vec<Block> = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len();
            let content = line.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| fail(here, format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "camera" {
                blocks.push(Block {
                    name: value.to_string(),
                    offset: here,
                    values: [None; 15],
                });
                continue;
            }
            let block = blocks
                .last_mut()
                .ok_or_else(|| fail(here, format!("{key} before any camera line")))?;
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| fail(here, format!("unknown key {key:?}")))?;
            let v: f64 = value
                .parse()
                .map_err(|_| fail(here, format!("bad number {value:?} for {key}")))?;
            if block.values[slot].replace(v).is_some() {
                return Err(fail(here, format!("duplicate key {key}")));
            }
        }
        if blocks.is_empty() {
            return Err(fail(0, "no cameras".into()));
        }
        let mut cameras = Vec::new();
        let mut names = Vec::new();
        for b in blocks {
            let mut vals = [0.0; 15];
            for (k, (slot, v)) in vals.iter_mut().zip(&b.values).enumerate() {
                *slot = v.ok_or_else(|| fail(b.offset, format!("camera {} missing {}", b.name, KEYS[k])))?;
            }
            let [a1, a2, a3, a4, tmax, cx, cy, h, w, yaw, pitch, roll, tx, ty, tz] = vals;
            let extent = |v: f64, key: &str| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(fail(b.offset, format!("{key} must be a positive integer")))
                }
            };
            let (h, w) = (extent(h, "H")?, extent(w, "W")?);
            let wrap = |e: Error| fail(b.offset, format!("camera {}: {e}", b.name));
            let poly = DistortionPoly::new([a1, a2, a3, a4], tmax.to_radians()).map_err(wrap)?;
            let intr = CameraIntrinsics::new(poly, cx, cy, w, h).map_err(wrap)?;
            let pose = CameraPose::new([tx, ty, tz], yaw.to_radians(), pitch.to_radians(), roll.to_radians());
            cameras.push(Camera::new(intr, CameraExtrinsics::from_pose(&pose)));
            names.push(b.name);
        }
        CameraRig::new(cameras, names)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
