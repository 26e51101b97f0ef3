use nalgebra::Vector3;

use super::rig::{CameraRig, EGO_HALF_LENGTH, EGO_HALF_WIDTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square-celled bird's-eye grid centered on the ego vehicle. Row 0 is the
/// far front edge and column 0 the far left edge, so ego +x points up the
/// grid and ego +y points left.
#[derive(Debug, Clone, PartialEq)]
pub struct BEVGrid {
    pub height: usize,
    pub width: usize,
    pub cell_m: f64,
    pub z_anchors: Vec<f64>,
}

impl BEVGrid {
    pub fn new(height: usize, width: usize, cell_m: f64, z_anchors: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("bev_grid", "empty grid"));
        }
        if !(cell_m > 0.0) || !cell_m.is_finite() {
            return Err(Error::invalid("bev_grid", format!("cell size {cell_m}")));
        }
        if z_anchors.is_empty() || z_anchors.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("bev_grid", "need at least one finite z anchor"));
        }
        Ok(BEVGrid {
            height,
            width,
            cell_m,
            z_anchors,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.height * self.width
    }

    /// Grid center `O` as `(col, row)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Maximum BEV radius in cells, `W / 2`.
    pub fn radius(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn query_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Ego-frame `(x, y)` of a (possibly fractional) cell position.
    pub fn cell_to_ego(&self, row: f64, col: f64) -> (f64, f64) {
        let (oc, or) = self.center();
        ((or - row) * self.cell_m, (oc - col) * self.cell_m)
    }

    /// Fractional `(row, col)` of an ego-frame ground point.
    pub fn ego_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let (oc, or) = self.center();
        (or - x / self.cell_m, oc - y / self.cell_m)
    }

    /// `‖p_i − O‖ / R` for every query, row-major. Not clamped: corner cells exceed 1.
    pub fn normalized_distances(&self) -> Vec<f64> {
        let (oc, or) = self.center();
        let r = self.radius();
        (0..self.height)
            .flat_map(|row| (0..self.width).map(move |col| (row, col)))
            .map(|(row, col)| (col as f64 - oc).hypot(row as f64 - or) / r)
            .collect()
    }

    /// True when the cell center lies on the ego box footprint.
    pub fn in_ego_footprint(&self, row: usize, col: usize) -> bool {
        let (x, y) = self.cell_to_ego(row as f64, col as f64);
        x.abs() <= EGO_HALF_LENGTH && y.abs() <= EGO_HALF_WIDTH
    }
}

/// Ego motion from the previous frame to the current one, expressed in the
/// previous ego frame: a current-frame point `p` sits at `R(dyaw) p + (dx, dy)`
/// in the previous frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseDelta {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl PoseDelta {
    pub fn new(dx: f64, dy: f64, dyaw: f64) -> Self {
        PoseDelta { dx, dy, dyaw }
    }

    /// Maps a current-frame ground point into the previous frame.
    pub fn to_previous(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.dyaw.sin_cos();
        (c * x - s * y + self.dx, s * x + c * y + self.dy)
    }
}

/// Ego pose in the world (scene) frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        EgoPose { x, y, yaw }
    }

    pub fn ego_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    pub fn world_to_ego(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Motion from `prev` to `self`, expressed in the `prev` ego frame.
    pub fn delta_from(&self, prev: &EgoPose) -> PoseDelta {
        let (dx, dy) = prev.world_to_ego(self.x, self.y);
        PoseDelta::new(dx, dy, self.yaw - prev.yaw)
    }
}

/// Per-camera pixel locations of every BEV query lifted to each z anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoints {
    /// `[N_c, N_q, A, 2]` as `(u, v)`; NaN where the anchor is outside the field of view.
    pub uv: Tensor,
    /// `[N_c, N_q, A]`, 1 where the anchor lands on the sensor.
    pub anchor_visible: Tensor,
    /// `[N_q, N_c]`, 1 when any anchor is visible.
    pub mask: Tensor,
}

impl ReferencePoints {
    pub fn num_cameras(&self) -> usize {
        self.uv.shape()[0]
    }

    pub fn num_queries(&self) -> usize {
        self.uv.shape()[1]
    }

    pub fn num_anchors(&self) -> usize {
        self.uv.shape()[2]
    }

    pub fn visible(&self, query: usize, cam: usize) -> bool {
        self.mask.data()[query * self.num_cameras() + cam] > 0.0
    }
}

pub fn bev_reference_points(grid: &BEVGrid, rig: &CameraRig) -> ReferencePoints {
    let (nc, nq, na) = (rig.len(), grid.num_queries(), grid.z_anchors.len());
    let mut uv = vec![0.0; nc * nq * na * 2];
    let mut vis = vec![0.0; nc * nq * na];
    let mut mask = vec![0.0; nq * nc];
    for (c, cam) in rig.cameras().iter().enumerate() {
        for row in 0..grid.height {
            for col in 0..grid.width {
                let q = grid.query_index(row, col);
                let (x, y) = grid.cell_to_ego(row as f64, col as f64);
                for (a, &z) in grid.z_anchors.iter().enumerate() {
                    let p = cam.project(&Vector3::new(x, y, z));
                    let k = (c * nq + q) * na + a;
                    uv[2 * k] = p.u;
                    uv[2 * k + 1] = p.v;
                    if p.visible {
                        vis[k] = 1.0;
                        mask[q * nc + c] = 1.0;
                    }
                }
            }
        }
    }
    ReferencePoints {
        uv: Tensor::from_vec(&[nc, nq, na, 2], uv),
        anchor_visible: Tensor::from_vec(&[nc, nq, na], vis),
        mask: Tensor::from_vec(&[nq, nc], mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_grid() -> BEVGrid {
        BEVGrid::new(32, 32, 0.5, vec![0.0, 0.5]).unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = desk_grid();
        assert_eq!(g.center(), (15.5, 15.5));
        assert_eq!(g.radius(), 16.0);
        assert_eq!(g.cell_to_ego(0.0, 0.0), (7.75, 7.75));
        let (r, c) = g.ego_to_cell(7.75, 7.75);
        assert!(r.abs() < 1e-12 && c.abs() < 1e-12);
        let d = g.normalized_distances();
        // corner cell: sqrt(2) * 15.5 / 16
        assert!((d[0] - 2f64.sqrt() * 15.5 / 16.0).abs() < 1e-12);
        assert!(BEVGrid::new(0, 4, 0.5, vec![0.0]).is_err());
        assert!(BEVGrid::new(4, 4, 0.5, vec![]).is_err());
    }

    #[test]
    fn pose_delta_matches_world_round_trip() {
        let prev = EgoPose::new(1.0, -2.0, 0.4);
        let cur = EgoPose::new(2.5, -1.0, 0.55);
        let d = cur.delta_from(&prev);
        for (x, y) in [(0.0, 0.0), (3.0, -1.0), (-2.0, 4.5)] {
            let (wx, wy) = cur.ego_to_world(x, y);
            let (px, py) = prev.world_to_ego(wx, wy);
            let (qx, qy) = d.to_previous(x, y);
            assert!((px - qx).abs() < 1e-12 && (py - qy).abs() < 1e-12);
        }
    }

    #[test]
    fn fifty_by_fifty_has_2500_queries() {
        let g = BEVGrid::new(50, 50, 0.4, vec![0.0, 0.5]).unwrap();
        let refs = bev_reference_points(&g, &CameraRig::default_full());
        assert_eq!(refs.num_queries(), 2500);
        assert_eq!(refs.mask.shape(), &[2500, 4]);
        assert_eq!(refs.uv.shape(), &[4, 2500, 2, 2]);
    }

    #[test]
    fn front_footprint_and_far_behind() {
        let g = desk_grid();
        let rig = CameraRig::default_desk();
        let refs = bev_reference_points(&g, &rig);
        // ground directly below the front camera mount
        let (r, c) = g.ego_to_cell(2.0, 0.0);
        let q = g.query_index(r.round() as usize, c.round() as usize);
        assert!(refs.visible(q, 0));
        let far_behind = g.query_index(g.height - 1, g.width / 2);
        assert!(!refs.visible(far_behind, 0));
        assert!(refs.visible(far_behind, 2));
    }

    #[test]
    fn every_cell_off_the_ego_box_is_covered() {
        let g = desk_grid();
        for rig in [CameraRig::default_desk(), CameraRig::default_full()] {
            let refs = bev_reference_points(&g, &rig);
            for row in 0..g.height {
                for col in 0..g.width {
                    if g.in_ego_footprint(row, col) {
                        continue;
                    }
                    let q = g.query_index(row, col);
                    assert!(
                        (0..4).any(|c| refs.visible(q, c)),
                        "cell ({row}, {col}) unseen"
                    );
                }
            }
        }
    }
}
