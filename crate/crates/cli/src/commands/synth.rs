use std::path::Path;

use fisheye_bev_core::decoder::{CLASS_NAMES, NUM_CLASSES};
use fisheye_bev_core::synth::{generate_scene, make_sequence, scene_dir, write_manifest, write_sequence, Manifest, RIG_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub manifest: Manifest,
    /// BEV ground-truth cells per class over every frame.
    pub histogram: [u64; NUM_CLASSES],
}

/// Scene seeds are drawn from one stream seeded by the run seed, so a dataset
/// is a pure function of `(seed, config)`.
pub fn scene_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<SynthReport, CliError> {
    let rig = cfg.rig();
    let params = cfg.scene_params();
    let seeds = scene_seeds(cfg.seed, cfg.data.scenes);
    let mut histogram = [0u64; NUM_CLASSES];
    for (i, &s) in seeds.iter().enumerate() {
        let scene = generate_scene(s, &params)?;
        let seq = make_sequence(&scene, &rig, &cfg.grid);
        for f in &seq {
            for l in f.labels() {
                histogram[l] += 1;
            }
        }
        write_sequence(&scene_dir(out, i), &seq)?;
    }
    let manifest = Manifest {
        scenes: seeds.len(),
        frames: cfg.data.frames,
        cameras: rig.len(),
        seed: cfg.seed,
        scene_seeds: seeds,
        rig_file: RIG_FILE.into(),
    };
    write_manifest(out, &manifest, &rig)?;
    println!("wrote {} scenes x {} frames to {}", manifest.scenes, manifest.frames, out.display());
    let total: u64 = histogram.iter().sum();
    for (name, n) in CLASS_NAMES.iter().zip(&histogram) {
        let pct = if total > 0 { 100.0 * *n as f64 / total as f64 } else { 0.0 };
        println!("  {name:<11} {n:>9} cells  {pct:5.1}%");
    }
    Ok(SynthReport { manifest, histogram })
}
