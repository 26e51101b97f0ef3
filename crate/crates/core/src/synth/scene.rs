use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::geometry::{EgoPose, EGO_HALF_LENGTH, EGO_HALF_WIDTH};

pub const VOID: u8 = 0;
pub const ROAD: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const VEHICLE: u8 = 4;
pub const EGO: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// The map covers `[-half_extent_m, half_extent_m]²` around the start pose.
    pub half_extent_m: f64,
    pub res_m: f64,
    pub frames: usize,
    /// Distance driven per frame, meters.
    pub step_m: (f64, f64),
    /// Largest heading change per frame on arc trajectories, radians.
    pub max_yaw_step: f64,
    pub road_half_width: (f64, f64),
    pub sidewalk_width: (f64, f64),
    pub vegetation_patches: (usize, usize),
    pub vehicles: (usize, usize),
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            half_extent_m: 32.0,
            res_m: 0.1,
            frames: 3,
            step_m: (0.5, 1.5),
            max_yaw_step: 0.08,
            road_half_width: (3.0, 5.0),
            sidewalk_width: (1.5, 2.5),
            vegetation_patches: (4, 9),
            vehicles: (2, 6),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.half_extent_m > 0.0
            && self.res_m > 0.0
            && self.half_extent_m / self.res_m <= 1.0e4
            && self.frames >= 1
            && self.step_m.0 >= 0.0
            && self.step_m.0 <= self.step_m.1
            && self.road_half_width.0 > 0.0
            && self.road_half_width.0 <= self.road_half_width.1
            && self.sidewalk_width.0 >= 0.0
            && self.sidewalk_width.0 <= self.sidewalk_width.1
            && self.vegetation_patches.0 <= self.vegetation_patches.1
            && self.vehicles.0 <= self.vehicles.1;
        if !ok {
            return Err(Error::invalid("scene_params", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Ground-plane semantic map plus the ego trajectory driven through it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub half_extent_m: f64,
    pub res_m: f64,
    /// Cells per side.
    pub size: usize,
    /// Row-major, row index along world y, column index along world x.
    pub classes: Vec<u8>,
    pub poses: Vec<EgoPose>,
}

impl SyntheticScene {
    /// Class of the map cell containing world point `(x, y)`; void off the map.
    pub fn class_at(&self, x: f64, y: f64) -> u8 {
        let i = ((y + self.half_extent_m) / self.res_m).floor();
        let j = ((x + self.half_extent_m) / self.res_m).floor();
        if i < 0.0 || j < 0.0 || i >= self.size as f64 || j >= self.size as f64 {
            return VOID;
        }
        self.classes[i as usize * self.size + j as usize]
    }

    /// Class seen at ego-frame ground point `(x, y)` with the ego at `pose`;
    /// the ego footprint itself reads as [`EGO`].
    pub fn class_at_ego(&self, pose: &EgoPose, x: f64, y: f64) -> u8 {
        if in_footprint(x, y) {
            return EGO;
        }
        let (wx, wy) = pose.ego_to_world(x, y);
        self.class_at(wx, wy)
    }

    pub fn histogram(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0u64; NUM_CLASSES];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }
}

fn in_footprint(x: f64, y: f64) -> bool {
    x.abs() <= EGO_HALF_LENGTH && y.abs() <= EGO_HALF_WIDTH
}

/// Ego path: a straight line or a circular arc through the start pose.
#[derive(Debug, Clone, Copy)]
struct Path {
    start: EgoPose,
    /// Signed curvature, 1/m; zero for a straight path.
    curvature: f64,
}

impl Path {
    /// World point and heading at arc length `s`.
    fn at(&self, s: f64) -> (f64, f64, f64) {
        let p = self.start;
        if self.curvature == 0.0 {
            let (sy, cy) = p.yaw.sin_cos();
            return (p.x + s * cy, p.y + s * sy, p.yaw);
        }
        let k = self.curvature;
        let phi = s * k;
        let (cx, cy) = (p.x - p.yaw.sin() / k, p.y + p.yaw.cos() / k);
        let h = p.yaw + phi;
        (cx + h.sin() / k, cy - h.cos() / k, h)
    }

    /// `(along, left)`: arc length of the closest path point and signed
    /// lateral offset, positive to the left of travel.
    fn frenet(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.start;
        let (sy, cy) = p.yaw.sin_cos();
        if self.curvature == 0.0 {
            let (dx, dy) = (x - p.x, y - p.y);
            return (dx * cy + dy * sy, -dx * sy + dy * cy);
        }
        let k = self.curvature;
        let (ox, oy) = (p.x - sy / k, p.y + cy / k);
        let (dx, dy) = (x - ox, y - oy);
        let dist = dx.hypot(dy);
        let left = k.signum() * (1.0 / k.abs() - dist);
        // angle swept from the start point, measured in the direction of travel
        let a0 = (p.y - oy).atan2(p.x - ox);
        let a = dy.atan2(dx);
        let mut swept = (a - a0) * k.signum();
        swept = (swept + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        (swept / k.abs(), left)
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    cx: f64,
    cy: f64,
    heading: f64,
    half_len: f64,
    half_wid: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy).abs() <= self.half_len && (-s * dx + c * dy).abs() <= self.half_wid
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.heading.sin_cos();
        [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)].map(|(a, b)| {
            let (lx, ly) = (a * self.half_len, b * self.half_wid);
            (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)
        })
    }

    /// Separating-axis overlap test.
    fn overlaps(&self, other: &Rect) -> bool {
        let axes = [self.heading, self.heading + std::f64::consts::FRAC_PI_2, other.heading, other.heading + std::f64::consts::FRAC_PI_2];
        let (a, b) = (self.corners(), other.corners());
        axes.iter().all(|&th| {
            let (s, c) = th.sin_cos();
            let proj = |pts: &[(f64, f64); 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
                    let p = c * x + s * y;
                    (lo.min(p), hi.max(p))
                })
            };
            let (alo, ahi) = proj(&a);
            let (blo, bhi) = proj(&b);
            ahi >= blo && bhi >= alo
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Patch {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Patch {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn uniform<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

fn count<R: Rng>(rng: &mut R, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

/// Lays out a road following the ego path (straight or arc), sidewalk
/// margins, an optional cross street, vegetation patches off the road and
/// vehicle footprints on it, clear of every ego footprint.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let start = EgoPose::new(0.0, 0.0, yaw0);
    let step = uniform(&mut rng, params.step_m);
    let arc = rng.gen_bool(0.5) && step > 0.0;
    let curvature = if arc {
        let yaw_step = rng.gen_range(0.25..1.0) * params.max_yaw_step * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        yaw_step / step
    } else {
        0.0
    };
    let path = Path { start, curvature };
    let poses: Vec<EgoPose> = (0..params.frames)
        .map(|k| {
            let (x, y, h) = path.at(k as f64 * step);
            EgoPose::new(x, y, h)
        })
        .collect();

    let hw = uniform(&mut rng, params.road_half_width);
    let sw = uniform(&mut rng, params.sidewalk_width);
    // road center relative to the ego path; the ego keeps to its lane
    let lane = rng.gen_range(0.0..(hw - 1.2).max(0.0) + 1e-9);
    let cross = (!arc && rng.gen_bool(0.5)).then(|| {
        let along = rng.gen_range(-10.0..15.0);
        let half = uniform(&mut rng, params.road_half_width) * 0.8;
        (along, half)
    });

    let classify_ground = |x: f64, y: f64| -> u8 {
        let (along, left) = path.frenet(x, y);
        let off = (left - lane).abs();
        if off <= hw {
            return ROAD;
        }
        if let Some((ca, ch)) = cross {
            let d = (along - ca).abs();
            if d <= ch {
                return ROAD;
            }
            if d <= ch + sw && off > hw + sw {
                return SIDEWALK;
            }
        }
        if off <= hw + sw {
            return SIDEWALK;
        }
        VOID
    };

    let mut patches = Vec::new();
    for _ in 0..count(&mut rng, params.vegetation_patches) {
        let along = rng.gen_range(-12.0..16.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let left = lane + side * (hw + sw + rng.gen_range(0.5..6.0));
        let (px, py, h) = path.at(along);
        let (nx, ny) = (-h.sin(), h.cos());
        patches.push(Patch {
            cx: px + left * nx,
            cy: py + left * ny,
            rx: rng.gen_range(1.5..4.5),
            ry: rng.gen_range(1.0..3.0),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        });
    }

    let ego_boxes: Vec<Rect> = poses
        .iter()
        .map(|p| Rect {
            cx: p.x,
            cy: p.y,
            heading: p.yaw,
            half_len: EGO_HALF_LENGTH + 0.3,
            half_wid: EGO_HALF_WIDTH + 0.3,
        })
        .collect();
    let mut vehicles: Vec<Rect> = Vec::new();
    let wanted = count(&mut rng, params.vehicles);
    let mut attempts = 0;
    while vehicles.len() < wanted && attempts < 200 {
        attempts += 1;
        let along = rng.gen_range(-10.0..14.0);
        let left = lane + rng.gen_range(-(hw - 1.0).max(0.0)..=(hw - 1.0).max(0.0));
        let (px, py, h) = path.at(along);
        let (nx, ny) = (-h.sin(), h.cos());
        let r = Rect {
            cx: px + left * nx,
            cy: py + left * ny,
            heading: h + rng.gen_range(-0.15..0.15),
            half_len: rng.gen_range(1.9..2.4),
            half_wid: rng.gen_range(0.85..1.0),
        };
        if ego_boxes.iter().chain(&vehicles).any(|b| b.overlaps(&r)) {
            continue;
        }
        vehicles.push(r);
    }

    let size = (2.0 * params.half_extent_m / params.res_m).round() as usize;
    let mut classes = vec![VOID; size * size];
    for i in 0..size {
        let y = -params.half_extent_m + (i as f64 + 0.5) * params.res_m;
        for j in 0..size {
            let x = -params.half_extent_m + (j as f64 + 0.5) * params.res_m;
            let mut c = classify_ground(x, y);
            if c == VOID && patches.iter().any(|p| p.contains(x, y)) {
                c = VEGETATION;
            }
            if vehicles.iter().any(|v| v.contains(x, y)) {
                c = VEHICLE;
            }
            classes[i * size + j] = c;
        }
    }
    Ok(SyntheticScene {
        seed,
        half_extent_m: params.half_extent_m,
        res_m: params.res_m,
        size,
        classes,
        poses,
    })
}
