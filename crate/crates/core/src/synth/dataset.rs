//! On-disk layout:
//!
//! ```text
//! root/manifest.txt
//! root/rig.txt
//! root/scene_0000/frame_00/cam_0.fbt .. cam_3.fbt
//! root/scene_0000/frame_00/bev_gt.fbt
//! root/scene_0000/frame_00/pose.txt      x y yaw
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::render::{bev_ground_truth, render_rig};
use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::geometry::{BEVGrid, CameraRig, EgoPose, PoseDelta};
use crate::tensor::{read_fbt, write_fbt, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RIG_FILE: &str = "rig.txt";
pub const POSE_FILE: &str = "pose.txt";
pub const BEV_FILE: &str = "bev_gt.fbt";

/// One time step of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Per-camera `[3, H, W]` images.
    pub images: Vec<Tensor>,
    /// `[H_bev, W_bev]` class ids.
    pub bev_gt: Tensor,
    pub pose: EgoPose,
}

impl SceneSample {
    pub fn labels(&self) -> Vec<usize> {
        self.bev_gt.data().iter().map(|&v| v as usize).collect()
    }
}

/// Motion of each frame relative to its predecessor; zero for the first.
pub fn pose_deltas(frames: &[SceneSample]) -> Vec<PoseDelta> {
    (0..frames.len())
        .map(|i| {
            if i == 0 {
                PoseDelta::default()
            } else {
                frames[i].pose.delta_from(&frames[i - 1].pose)
            }
        })
        .collect()
}

pub fn make_sequence(scene: &SyntheticScene, rig: &CameraRig, grid: &BEVGrid) -> Vec<SceneSample> {
    scene
        .poses
        .iter()
        .map(|pose| SceneSample {
            images: render_rig(scene, rig, pose),
            bev_gt: bev_ground_truth(scene, pose, grid),
            pose: *pose,
        })
        .collect()
}

pub fn scene_dir(root: &Path, scene: usize) -> PathBuf {
    root.join(format!("scene_{scene:04}"))
}

pub fn frame_dir(scene_dir: &Path, frame: usize) -> PathBuf {
    scene_dir.join(format!("frame_{frame:02}"))
}

pub fn format_pose(p: &EgoPose) -> String {
    format!("{} {} {}\n", p.x, p.y, p.yaw)
}

pub fn parse_pose(text: &str, path: &Path) -> Result<EgoPose> {
    let mut vals = [0.0; 3];
    let mut n = 0;
    let mut offset = 0usize;
    for tok in text.split_ascii_whitespace() {
        let at = text[offset..].find(tok).map_or(offset, |i| offset + i);
        offset = at + tok.len();
        if n == 3 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: at as u64,
                msg: "expected exactly `x y yaw`".into(),
            });
        }
        vals[n] = tok.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: at as u64,
            msg: format!("`{tok}` is not a number"),
        })?;
        n += 1;
    }
    if n != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: text.len() as u64,
            msg: format!("expected `x y yaw`, found {n} values"),
        });
    }
    Ok(EgoPose::new(vals[0], vals[1], vals[2]))
}

pub fn write_sequence(dir: &Path, frames: &[SceneSample]) -> Result<()> {
    for (f, sample) in frames.iter().enumerate() {
        let fd = frame_dir(dir, f);
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        for (c, img) in sample.images.iter().enumerate() {
            write_fbt(fd.join(format!("cam_{c}.fbt")), img)?;
        }
        write_fbt(fd.join(BEV_FILE), &sample.bev_gt)?;
        let p = fd.join(POSE_FILE);
        fs::write(&p, format_pose(&sample.pose)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_sequence(dir: &Path, cameras: usize) -> Result<Vec<SceneSample>> {
    let mut frames = Vec::new();
    loop {
        let fd = frame_dir(dir, frames.len());
        if !fd.is_dir() {
            break;
        }
        let images = (0..cameras)
            .map(|c| read_fbt(fd.join(format!("cam_{c}.fbt"))))
            .collect::<Result<Vec<_>>>()?;
        let bev_gt = read_fbt(fd.join(BEV_FILE))?;
        let p = fd.join(POSE_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let pose = parse_pose(&text, &p)?;
        frames.push(SceneSample { images, bev_gt, pose });
    }
    if frames.is_empty() {
        let fd = frame_dir(dir, 0);
        return Err(Error::io(fd, std::io::Error::new(std::io::ErrorKind::NotFound, "no frames")));
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub scenes: usize,
    pub frames: usize,
    pub cameras: usize,
    pub seed: u64,
    pub scene_seeds: Vec<u64>,
    pub rig_file: String,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "scenes = {}", self.scenes).unwrap();
        writeln!(s, "frames = {}", self.frames).unwrap();
        writeln!(s, "cameras = {}", self.cameras).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        let seeds: Vec<String> = self.scene_seeds.iter().map(|s| s.to_string()).collect();
        writeln!(s, "scene_seeds = {}", seeds.join(" ")).unwrap();
        writeln!(s, "rig = {}", self.rig_file).unwrap();
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Manifest> {
        let mut m = Manifest {
            scenes: 0,
            frames: 0,
            cameras: 0,
            seed: 0,
            scene_seeds: Vec::new(),
            rig_file: RIG_FILE.into(),
        };
        let mut offset = 0u64;
        for line in text.lines() {
            let at = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Format {
                path: path.to_path_buf(),
                offset: at,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("`{v}` is not an integer")));
            match k {
                "scenes" => m.scenes = num(v)? as usize,
                "frames" => m.frames = num(v)? as usize,
                "cameras" => m.cameras = num(v)? as usize,
                "seed" => m.seed = num(v)?,
                "scene_seeds" => m.scene_seeds = v.split_whitespace().map(num).collect::<Result<_>>()?,
                "rig" => m.rig_file = v.to_string(),
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        if m.scene_seeds.len() != m.scenes {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("{} scene seeds for {} scenes", m.scene_seeds.len(), m.scenes),
            });
        }
        Ok(m)
    }
}

pub fn write_manifest(root: &Path, m: &Manifest, rig: &CameraRig) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    rig.write(root.join(&m.rig_file))?;
    let p = root.join(MANIFEST_FILE);
    fs::write(&p, m.to_text()).map_err(|e| Error::io(&p, e))
}

/// A dataset root opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub rig: CameraRig,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let p = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let manifest = Manifest::from_text(&text, &p)?;
        let rig = CameraRig::read(root.join(&manifest.rig_file))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            rig,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes == 0
    }

    pub fn scene(&self, index: usize) -> Result<Vec<SceneSample>> {
        read_sequence(&scene_dir(&self.root, index), self.rig.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{generate_scene, SceneParams};

    fn sample_sequence() -> (Vec<SceneSample>, CameraRig) {
        let s = generate_scene(2, &SceneParams::default()).unwrap();
        let rig = CameraRig::default_desk();
        let g = BEVGrid::new(32, 32, 0.5, vec![0.0]).unwrap();
        (make_sequence(&s, &rig, &g), rig)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (seq, rig) = sample_sequence();
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            scenes: 1,
            frames: seq.len(),
            cameras: 4,
            seed: 9,
            scene_seeds: vec![2],
            rig_file: RIG_FILE.into(),
        };
        write_manifest(dir.path(), &m, &rig).unwrap();
        write_sequence(&scene_dir(dir.path(), 0), &seq).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let back = ds.scene(0).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in seq.iter().zip(&back) {
            assert!(a.bev_gt.bit_eq(&b.bev_gt));
            assert_eq!(a.pose, b.pose);
            for (x, y) in a.images.iter().zip(&b.images) {
                assert!(x.bit_eq(y));
            }
        }
    }

    #[test]
    fn missing_camera_is_named() {
        let (seq, _) = sample_sequence();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq[..1]).unwrap();
        fs::remove_file(frame_dir(dir.path(), 0).join("cam_2.fbt")).unwrap();
        let err = read_sequence(dir.path(), 4).unwrap_err().to_string();
        assert!(err.contains("cam_2.fbt"), "{err}");
    }

    #[test]
    fn pose_parsing() {
        let p = Path::new("pose.txt");
        assert_eq!(parse_pose("1.0 2.0 0.5", p).unwrap(), EgoPose::new(1.0, 2.0, 0.5));
        let e = parse_pose("1.0 x 0.5", p).unwrap_err().to_string();
        assert!(e.contains("byte 4"), "{e}");
        assert!(parse_pose("1.0 2.0", p).is_err());
        assert!(parse_pose("1 2 3 4", p).is_err());
        let q = EgoPose::new(0.1 + 0.2, -1e-300, std::f64::consts::PI);
        assert_eq!(parse_pose(&format_pose(&q), p).unwrap(), q);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let p = Path::new("manifest.txt");
        let e = Manifest::from_text("scenes = 0\nscene_seeds =\ncolour = 3\n", p)
            .unwrap_err()
            .to_string();
        assert!(e.contains("byte 25"), "{e}");
        let m = Manifest::from_text("scenes = 0\nscene_seeds =\n", p).unwrap();
        assert_eq!(m.scenes, 0);
    }

    #[test]
    fn deltas_chain_poses() {
        let (seq, _) = sample_sequence();
        let d = pose_deltas(&seq);
        assert_eq!(d[0], PoseDelta::default());
        let (x, y) = d[1].to_previous(0.0, 0.0);
        let (wx, wy) = seq[0].pose.ego_to_world(x, y);
        assert!((wx - seq[1].pose.x).abs() < 1e-12 && (wy - seq[1].pose.y).abs() < 1e-12);
    }
}
