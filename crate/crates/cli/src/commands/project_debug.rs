//! Geometry diagnostics for the configured rig and grid.
//!
//! Files written to the output directory:
//!
//! - `grid_overlay_cam{c}.ppm`: the scene render with 1 m ground grid lines in white
//! - `anisotropy_cam0.pgm`: per-pixel `log10(σ_max/σ_min)` of the unprojection Jacobian
//! - `anisotropy_cam0.csv`: the same values, one image row per line
//! - `visibility_cam{c}.pgm`: BEV cells seen by camera `c` (255) or not (0)

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fisheye_bev_core::export::{heatmap_gray, image_bytes, write_pgm, write_ppm};
use fisheye_bev_core::geometry::{anisotropy_at, anisotropy_heatmap, bev_reference_points, EgoPose};
use fisheye_bev_core::synth::{generate_scene, pixel_ground_point, render_rig};
use fisheye_bev_core::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

/// Half width of a drawn grid line, in meters.
const LINE_HALF_WIDTH: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct DebugReport {
    pub files: Vec<PathBuf>,
    /// Anisotropy heatmap of the first camera `[H, W]`.
    pub anisotropy: Tensor,
    /// Per camera, `[H_bev, W_bev]` visibility (1 or 0).
    pub visibility: Vec<Tensor>,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<DebugReport, CliError> {
    let rig = cfg.rig();
    let mut files = Vec::new();
    let scene = generate_scene(cfg.seed, &cfg.scene_params())?;
    let pose = EgoPose::default();
    for (c, (cam, img)) in rig.cameras().iter().zip(render_rig(&scene, &rig, &pose)).enumerate() {
        let (h, w) = (cam.intrinsics.height, cam.intrinsics.width);
        let mut rgb = image_bytes(&img);
        for v in 0..h {
            for u in 0..w {
                let Some((x, y)) = pixel_ground_point(cam, u as f64, v as f64) else {
                    continue;
                };
                let on_line = |t: f64| (t - t.round()).abs() < LINE_HALF_WIDTH;
                if on_line(x) || on_line(y) {
                    rgb[3 * (v * w + u)..3 * (v * w + u) + 3].copy_from_slice(&[255, 255, 255]);
                }
            }
        }
        let p = out.join(format!("grid_overlay_cam{c}.ppm"));
        write_ppm(&p, w, h, &rgb)?;
        files.push(p);
    }

    let intr = &rig.cameras()[0].intrinsics;
    let anisotropy = anisotropy_heatmap(intr);
    let p = out.join("anisotropy_cam0.pgm");
    write_pgm(&p, intr.width, intr.height, &heatmap_gray(anisotropy.data()))?;
    files.push(p);
    let mut csv = String::new();
    for row in anisotropy.data().chunks(intr.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(csv, "{}", cells.join(",")).unwrap();
    }
    let p = out.join("anisotropy_cam0.csv");
    fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
    files.push(p);

    let refs = bev_reference_points(&cfg.grid, &rig);
    let (gh, gw) = (cfg.grid.height, cfg.grid.width);
    let mut visibility = Vec::new();
    for c in 0..rig.len() {
        let vis: Vec<f64> = (0..gh * gw).map(|q| refs.visible(q, c) as u8 as f64).collect();
        let gray: Vec<u8> = vis.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
        let p = out.join(format!("visibility_cam{c}.pgm"));
        write_pgm(&p, gw, gh, &gray)?;
        files.push(p);
        visibility.push(Tensor::from_vec(&[gh, gw], vis));
    }
    println!(
        "wrote {} files to {}; anisotropy at the principal point {:.2e}",
        files.len(),
        out.display(),
        anisotropy_at(intr, intr.cx, intr.cy)
    );
    Ok(DebugReport {
        files,
        anisotropy,
        visibility,
    })
}
