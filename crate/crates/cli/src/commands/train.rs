use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fisheye_bev_core::model::Model;
use fisheye_bev_core::synth::{Dataset, SceneSample};
use fisheye_bev_core::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::optim::AdamW;

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_DIR: &str = "params";
pub const FINAL_DIR: &str = "final";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub focal: f64,
    pub kl: f64,
    pub total: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step,epoch,lr,focal,kl,total";

    /// Shortest round-trip float text, so equal logs are equal bit for bit.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?}",
            self.step, self.epoch, self.lr, self.focal, self.kl, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    /// Directory of the last checkpoint (`out/final`).
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Every sequence of a dataset, loaded into memory.
pub fn load_scenes(ds: &Dataset) -> Result<Vec<Vec<SceneSample>>, CliError> {
    (0..ds.len()).map(|i| ds.scene(i).map_err(CliError::from)).collect()
}

/// A model bound to the dataset's rig, after checking that the dataset was
/// rendered for this configuration.
pub fn build_model(cfg: &RunConfig, ds: &Dataset, scenes: &[Vec<SceneSample>]) -> Result<Model, CliError> {
    let intr = &ds.rig.cameras()[0].intrinsics;
    let mcfg = cfg.model_config((intr.height, intr.width));
    let model = Model::new(mcfg, &ds.rig)?;
    let want = [cfg.grid.height, cfg.grid.width];
    for (i, seq) in scenes.iter().enumerate() {
        if let Some(f) = seq.iter().find(|f| f.bev_gt.shape() != want) {
            return Err(CliError::Data(format!(
                "scene {i}: ground truth is {:?}, config grid is {want:?}",
                f.bev_gt.shape()
            )));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, store: &ParamStore, opt: &AdamW) -> Result<(), CliError> {
    store.save(&dir.join(PARAMS_DIR))?;
    opt.save(dir, store)?;
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_text()).map_err(|e| CliError::io(&p, e))
}

/// Parameters and, when present, the config the checkpoint was trained with.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, Option<RunConfig>), CliError> {
    let store = ParamStore::load(&dir.join(PARAMS_DIR))?;
    let p = dir.join(CONFIG_FILE);
    let cfg = if p.exists() { Some(RunConfig::load(&p)?) } else { None };
    Ok((store, cfg))
}

fn global_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

pub fn run(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainReport, CliError> {
    let t0 = Instant::now();
    let ds = Dataset::open(data)?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("{}: dataset has no scenes", data.display())));
    }
    let scenes = load_scenes(&ds)?;
    let model = build_model(cfg, &ds, &scenes)?;
    let mut store = model.init_params(cfg.seed);
    let mut opt = AdamW::new(&cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let o = &cfg.optim;
    let per_epoch = scenes.len().div_ceil(o.batch);
    let mut budget = if o.max_steps > 0 { o.max_steps } else { usize::MAX };
    let mut log = Vec::new();
    let mut csv = format!("{}\n", StepLog::HEADER);
    let log_path = out.join(LOG_FILE);
    let mut step = 0;
    'epochs: for epoch in 1..=o.epochs.max(1) {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(o.batch).take(per_epoch) {
            if budget == 0 {
                break 'epochs;
            }
            budget -= 1;
            step += 1;
            store.zero_grad();
            let (mut focal, mut kl, mut total) = (0.0, 0.0, 0.0);
            for &i in batch {
                let seq = &scenes[i];
                let mut tape = Tape::new();
                let fwd = model.forward(&mut tape, &store, seq, true, &mut rng)?;
                let parts = model.loss(&mut tape, &fwd, seq.last().unwrap())?;
                let t = tape.value(parts.total).item();
                if !t.is_finite() {
                    fs::write(&log_path, &csv).map_err(|e| CliError::io(&log_path, e))?;
                    return Err(CliError::Data(format!("non-finite loss {t} at step {step}")));
                }
                tape.backward(parts.total, &mut store)?;
                focal += tape.value(parts.focal).item();
                kl += tape.value(parts.kl).item();
                total += t;
            }
            let b = batch.len() as f64;
            store.scale_grads(1.0 / b);
            let norm = global_norm(&store);
            if !norm.is_finite() {
                fs::write(&log_path, &csv).map_err(|e| CliError::io(&log_path, e))?;
                return Err(CliError::Data(format!("non-finite gradient at step {step}")));
            }
            if o.grad_clip > 0.0 && norm > o.grad_clip {
                store.scale_grads(o.grad_clip / norm);
            }
            let entry = StepLog {
                step,
                epoch,
                lr: opt.lr,
                focal: focal / b,
                kl: kl / b,
                total: total / b,
            };
            opt.step(&mut store);
            writeln!(csv, "{}", entry.csv_row()).unwrap();
            log.push(entry);
        }
        opt.end_epoch();
        save_checkpoint(&out.join(format!("epoch_{epoch:02}")), cfg, &store, &opt)?;
        fs::write(&log_path, &csv).map_err(|e| CliError::io(&log_path, e))?;
        let last = log.last().unwrap();
        println!(
            "epoch {epoch:>3}  step {:>5}  focal {:.5}  kl {:.5}  lr {:.3e}",
            last.step, last.focal, last.kl, opt.lr
        );
    }
    fs::write(&log_path, &csv).map_err(|e| CliError::io(&log_path, e))?;
    let checkpoint = out.join(FINAL_DIR);
    save_checkpoint(&checkpoint, cfg, &store, &opt)?;
    Ok(TrainReport {
        log,
        checkpoint,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
