//! Finite-difference checks of every trainable component on small inputs.
//! The hyperparameters that shape each component (offset scale, gating,
//! fusion, focal, λ_KL) come from the run config; sizes are fixed and small.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use fisheye_bev_core::decoder::{self, NUM_CLASSES};
use fisheye_bev_core::encoder::{self, EncoderConfig};
use fisheye_bev_core::geometry::{BEVGrid, CameraIntrinsics, CameraRig, DistortionPoly};
use fisheye_bev_core::gradcheck::{finite_diff_check, FiniteDiffConfig, FiniteDiffReport};
use fisheye_bev_core::model::{Model, ModelConfig};
use fisheye_bev_core::synth::{generate_scene, make_sequence, SceneParams};
use fisheye_bev_core::{nn, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOLERANCE: f64 = 1e-4;
pub const REPORT_FILE: &str = "gradcheck.csv";

const C: usize = 4;
const HIDDEN: usize = 5;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub components: Vec<(String, FiniteDiffReport)>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passes(&self) -> bool {
        self.components.iter().all(|(_, r)| r.passes(TOLERANCE))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,max_rel_error,coords,status\n");
        for (name, r) in &self.components {
            let status = if r.passes(TOLERANCE) { "pass" } else { "FAIL" };
            writeln!(s, "{name},{:e},{},{status}", r.max_rel_error, r.coords_checked).unwrap();
        }
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `Σ out ⊙ R` for a fixed random `R`, so no output direction cancels.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum_all(p))
}

fn init_uncertainty_heads(store: &mut ParamStore, prefix: &str) {
    nn::init_linear(store, &format!("{prefix}.mu1"), C, HIDDEN);
    nn::init_linear(store, &format!("{prefix}.mu2"), HIDDEN, C);
    nn::init_linear(store, &format!("{prefix}.sigma1"), C, HIDDEN);
    nn::init_linear(store, &format!("{prefix}.sigma2"), HIDDEN, C);
}

fn check(
    store: &ParamStore,
    fd: &FiniteDiffConfig,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> std::result::Result<FiniteDiffReport, CliError> {
    Ok(finite_diff_check(store, fd, f)?)
}

fn deformable_attention(cfg: &EncoderConfig, fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let (n, a, k, hw) = (5, 2, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new(1);
    store.insert("map", uniform(&mut rng, &[C, hw, hw], -1.0, 1.0));
    store.insert("offset", uniform(&mut rng, &[n, k, 2], -1.0, 1.0));
    store.insert("logit", uniform(&mut rng, &[n, k], -1.0, 1.0));
    let refs = uniform(&mut rng, &[n, a, 2], 0.3, hw as f64 - 1.3);
    let mut aw = uniform(&mut rng, &[n, a], 0.2, 1.0);
    aw.data_mut()[1] = 0.0;
    check(&store, fd, |t, s| {
        let map = t.param(s, "map")?;
        let off = t.param(s, "offset")?;
        let logit = t.param(s, "logit")?;
        let y = encoder::deformable_attend(t, map, &refs, &aw, off, logit, cfg.offset_scale)?;
        project(t, y, 1)
    })
}

fn uncertainty_mc(cfg: &EncoderConfig, fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let (nq, nc) = (5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new(2);
    store.insert("feat", uniform(&mut rng, &[nq, nc, C], -1.0, 1.0));
    init_uncertainty_heads(&mut store, "u");
    let mut mask = Tensor::ones(&[nq, nc]);
    mask.data_mut()[1] = 0.0;
    let mut fusion = cfg.fusion;
    fusion.mc_samples = fusion.mc_samples.max(2);
    check(&store, fd, |t, s| {
        let f = t.param(s, "feat")?;
        let est = encoder::estimate_uncertainty(t, s, "u", f)?;
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (fused, _) = encoder::mc_fuse(t, &est, &mask, &fusion, &mut r)?;
        let kl = encoder::kl_regularizer(t, &est, fusion.log_var_prior)?;
        let p = project(t, fused, 2)?;
        t.add(p, kl)
    })
}

fn gating(cfg: &EncoderConfig, fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let grid = BEVGrid::new(4, 4, 1.0, vec![0.0]).expect("fixed grid");
    let nq = grid.num_queries();
    let k = 2;
    let mut ecfg = cfg.clone();
    ecfg.points = k;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new(3);
    store.insert("cur", uniform(&mut rng, &[nq, C], -1.0, 1.0));
    store.insert("hist", uniform(&mut rng, &[nq, C], -1.0, 1.0));
    store.insert("pos", uniform(&mut rng, &[nq, C], -0.5, 0.5));
    nn::init_linear(&mut store, "t.offset", C, 2 * k * 2);
    nn::init_linear(&mut store, "t.logit", C, 2 * k);
    nn::init_layer_norm(&mut store, "t.ln", C);
    let gamma = encoder::gating_factors(&grid, &ecfg.gating);
    check(&store, fd, |t, s| {
        let cur = t.param(s, "cur")?;
        let hist = t.param(s, "hist")?;
        let pos = t.param(s, "pos")?;
        let y = encoder::gated_temporal_attend(t, s, "t", cur, hist, pos, &gamma, &grid, &ecfg)?;
        project(t, y, 3)
    })
}

fn ffn(cfg: &EncoderConfig, fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new(4);
    store.insert("x", uniform(&mut rng, &[6, C], -1.0, 1.0));
    nn::init_linear(&mut store, "f.fc1", C, 2 * C);
    nn::init_linear(&mut store, "f.fc2", 2 * C, C);
    nn::init_layer_norm(&mut store, "f.ln", C);
    check(&store, fd, |t, s| {
        let x = t.param(s, "x")?;
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let y = encoder::ffn_forward(t, s, "f", x, cfg.dropout, true, &mut r)?;
        project(t, y, 4)
    })
}

fn decoder_head(fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new(5);
    store.insert("q", uniform(&mut rng, &[16, C], -1.0, 1.0));
    decoder::init_params(&mut store, C);
    check(&store, fd, |t, s| {
        let q = t.param(s, "q")?;
        let y = decoder::mask_head_decode(t, s, q, (4, 4), (4, 4))?;
        project(t, y, 5)
    })
}

fn focal_kl(run: &RunConfig, fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new(6);
    store.insert("logits", uniform(&mut rng, &[NUM_CLASSES, 4, 4], -2.0, 2.0));
    store.insert("feat", uniform(&mut rng, &[4, 2, C], -1.0, 1.0));
    init_uncertainty_heads(&mut store, "u");
    let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    let prior = run.encoder.fusion.log_var_prior;
    check(&store, fd, |t, s| {
        let logits = t.param(s, "logits")?;
        let focal = decoder::focal_loss(t, logits, &labels, &run.focal)?;
        let f = t.param(s, "feat")?;
        let est = encoder::estimate_uncertainty(t, s, "u", f)?;
        let kl = encoder::kl_regularizer(t, &est, prior)?;
        decoder::total_loss(t, focal, kl, run.lambda_kl)
    })
}

/// The whole network on a 16×16 four-camera rig and a 4×4 grid.
fn full_objective(run: &RunConfig, fd: &FiniteDiffConfig) -> std::result::Result<FiniteDiffReport, CliError> {
    let poly = DistortionPoly::new([5.5, -0.375, 0.0, 0.0], 95f64.to_radians())?;
    let rig = CameraRig::surround(CameraIntrinsics::new(poly, 7.5, 7.5, 16, 16)?);
    let mut enc = run.encoder.clone();
    enc.blocks = 1;
    enc.dim = 8;
    enc.head_hidden = 8;
    enc.ffn_hidden = 16;
    enc.points = 2;
    enc.fusion.mc_samples = 2;
    let mut drme = run.drme.clone();
    drme.patch = 4;
    drme.dim = 6;
    drme.layers = 4;
    drme.hidden = 8;
    drme.out_channels = 8;
    let grid = BEVGrid::new(4, 4, 2.0, vec![0.0, 0.5])?;
    let mcfg = ModelConfig {
        image_hw: (16, 16),
        drme,
        encoder: enc,
        grid: grid.clone(),
        output_hw: (4, 4),
        focal: run.focal,
        lambda_kl: run.lambda_kl,
    };
    let model = Model::new(mcfg, &rig)?;
    let store = model.init_params(7);
    let params = SceneParams {
        frames: 2,
        ..SceneParams::default()
    };
    let seq = make_sequence(&generate_scene(4, &params)?, &rig, &grid);
    let fd = FiniteDiffConfig {
        coords_per_param: fd.coords_per_param.min(4),
        ..fd.clone()
    };
    check(&store, &fd, |t, s| {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let out = model.forward(t, s, &seq, false, &mut r)?;
        Ok(model.loss(t, &out, &seq[1])?.total)
    })
}

pub fn check_all(cfg: &RunConfig, corrupt: bool) -> std::result::Result<GradcheckReport, CliError> {
    let t0 = Instant::now();
    let fd = FiniteDiffConfig {
        corrupt_analytic: corrupt,
        seed: cfg.seed,
        ..FiniteDiffConfig::default()
    };
    let e = &cfg.encoder;
    let components = vec![
        ("deformable_attention".to_string(), deformable_attention(e, &fd)?),
        ("uncertainty_mc_fusion".to_string(), uncertainty_mc(e, &fd)?),
        ("distance_gating".to_string(), gating(e, &fd)?),
        ("ffn".to_string(), ffn(e, &fd)?),
        ("decoder".to_string(), decoder_head(&fd)?),
        ("focal_kl".to_string(), focal_kl(cfg, &fd)?),
        ("full_objective".to_string(), full_objective(cfg, &fd)?),
    ];
    let report = GradcheckReport {
        components,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok(report)
}

pub fn run(cfg: &RunConfig, corrupt: bool, out: &Path) -> std::result::Result<GradcheckReport, CliError> {
    let report = check_all(cfg, corrupt)?;
    for (name, r) in &report.components {
        let status = if r.passes(TOLERANCE) { "pass" } else { "FAIL" };
        println!("{name:<24} max rel err {:.3e}  ({} coords)  {status}", r.max_rel_error, r.coords_checked);
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let p = out.join(REPORT_FILE);
    fs::write(&p, report.to_csv()).map_err(|e| CliError::io(&p, e))?;
    if report.passes() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report
            .components
            .iter()
            .filter(|(_, r)| !r.passes(TOLERANCE))
            .map(|(n, _)| n.as_str())
            .collect();
        Err(CliError::Check(format!("gradient check above {TOLERANCE:e}: {}", failed.join(", "))))
    }
}
