//! Scores checkpoints on a dataset. The architecture comes from the run
//! config; the ablation switches of each checkpoint come from the config it
//! was trained with, so several runs can be compared in one report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fisheye_bev_core::decoder::{CLASS_NAMES, NUM_CLASSES};
use fisheye_bev_core::export::{heatmap_gray, write_class_pgm, write_class_ppm, write_pgm};
use fisheye_bev_core::metrics::{iou_per_class, miou, ConfusionMatrix};
use fisheye_bev_core::synth::{Dataset, SceneSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{build_model, load_checkpoint, load_scenes};
use crate::config::RunConfig;
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";

/// Row labels in report order.
pub const VARIANTS: [&str; 4] = ["baseline", "+gating", "+uncertainty", "+both"];

pub fn variant_of(cfg: &RunConfig) -> &'static str {
    let gating = cfg.encoder.gating.enabled;
    let uncertainty = !cfg.encoder.fusion.uniform;
    VARIANTS[gating as usize + 2 * uncertainty as usize]
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub variant: String,
    pub source: String,
    pub iou: [f64; NUM_CLASSES],
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,checkpoint");
        for name in &CLASS_NAMES[1..] {
            write!(s, ",iou_{name}").unwrap();
        }
        s.push_str(",miou\n");
        for r in &self.rows {
            write!(s, "{},{}", r.variant, r.source).unwrap();
            for v in &r.iou[1..] {
                write!(s, ",{v:.6}").unwrap();
            }
            writeln!(s, ",{:.6}", r.miou).unwrap();
        }
        s
    }
}

/// Predicted classes of a sequence's last frame and its per-query confidence.
type Prediction = (Vec<usize>, Option<Vec<f64>>);

fn score(
    variant: &str,
    source: String,
    scenes: &[Vec<SceneSample>],
    predict: &mut dyn FnMut(&[SceneSample]) -> Result<Prediction, CliError>,
    grid_hw: (usize, usize),
    dir: &Path,
) -> Result<EvalRow, CliError> {
    let (h, w) = grid_hw;
    let mut cm = ConfusionMatrix::new();
    for (i, seq) in scenes.iter().enumerate() {
        let truth = seq.last().unwrap().labels();
        let (pred, conf) = predict(seq)?;
        cm.add(&truth, &pred)?;
        write_class_pgm(dir.join(format!("pred_{i:04}.pgm")), w, h, &pred)?;
        write_class_ppm(dir.join(format!("pred_{i:04}.ppm")), w, h, &pred)?;
        write_class_ppm(dir.join(format!("gt_{i:04}.ppm")), w, h, &truth)?;
        if let Some(c) = conf {
            write_pgm(dir.join(format!("conf_{i:04}.pgm")), w, h, &heatmap_gray(&c))?;
        }
    }
    let iou: [f64; NUM_CLASSES] = std::array::from_fn(|c| iou_per_class(&cm, c));
    let m = miou(&cm)?;
    Ok(EvalRow {
        variant: variant.to_string(),
        source,
        iou,
        miou: m,
        confusion: cm,
    })
}

pub fn run(
    cfg: &RunConfig,
    data: &Path,
    checkpoints: &[PathBuf],
    oracle: bool,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let ds = Dataset::open(data)?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("{}: dataset has no scenes", data.display())));
    }
    let scenes = load_scenes(&ds)?;
    let grid_hw = (cfg.grid.height, cfg.grid.width);
    let mut rows = Vec::new();
    if oracle {
        let dir = out.join("oracle");
        let mut predict = |seq: &[SceneSample]| Ok((seq.last().unwrap().labels(), None));
        rows.push(score("oracle", "ground-truth".into(), &scenes, &mut predict, grid_hw, &dir)?);
    }
    for ckpt in checkpoints {
        let (store, trained) = load_checkpoint(ckpt)?;
        let mut run_cfg = cfg.clone();
        if let Some(t) = &trained {
            run_cfg.encoder.fusion.uniform = t.encoder.fusion.uniform;
            run_cfg.encoder.gating.enabled = t.encoder.gating.enabled;
        }
        let model = build_model(&run_cfg, &ds, &scenes)?;
        let diffs = model.init_params(0).shape_differences(&store);
        if !diffs.is_empty() {
            return Err(CliError::Data(format!(
                "{} does not match the config:\n  {}",
                ckpt.display(),
                diffs.join("\n  ")
            )));
        }
        let variant = variant_of(&run_cfg);
        let dir = out.join(variant.trim_start_matches('+'));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut predict = |seq: &[SceneSample]| {
            let (pred, conf) = model.predict(&store, seq, &mut rng)?;
            Ok((pred, conf.map(|c| c.data().to_vec())))
        };
        rows.push(score(variant, ckpt.display().to_string(), &scenes, &mut predict, grid_hw, &dir)?);
    }
    rows.sort_by_key(|r| VARIANTS.iter().position(|v| *v == r.variant).map_or(0, |p| p + 1));
    let report = EvalReport { rows };
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let p = out.join(METRICS_FILE);
    fs::write(&p, report.to_csv()).map_err(|e| CliError::io(&p, e))?;
    print_table(&report);
    Ok(report)
}

fn print_table(report: &EvalReport) {
    let mut head = format!("{:<13}", "variant");
    for name in &CLASS_NAMES[1..] {
        write!(head, " {name:>10}").unwrap();
    }
    println!("{head} {:>8}", "mIoU");
    for r in &report.rows {
        let mut line = format!("{:<13}", r.variant);
        for v in &r.iou[1..] {
            if v.is_nan() {
                write!(line, " {:>10}", "-").unwrap();
            } else {
                write!(line, " {:>10.2}", 100.0 * v).unwrap();
            }
        }
        println!("{line} {:>8.2}", 100.0 * r.miou);
    }
}
