use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fisheye_bev_cli::commands::{eval, train};
use fisheye_bev_cli::config::RunConfig;
use fisheye_bev_cli::optim::AdamW;
use fisheye_bev_core::synth::{frame_dir, scene_dir, Dataset};
use fisheye_bev_core::tensor::{read_fbt, write_fbt};
use fisheye_bev_core::Tensor;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fisheye-bev"))
        .args(args)
        .output()
        .expect("run fisheye-bev")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, seed: u64, scenes: usize) {
    let o = bin(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--out",
        s(out),
        "--set",
        &format!("data.scenes={scenes}"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

/// Writes an untrained checkpoint for `cfg` without running any steps.
fn untrained_checkpoint(cfg: &RunConfig, data: &Path, dir: &Path) -> PathBuf {
    let ds = Dataset::open(data).unwrap();
    let scenes = train::load_scenes(&ds).unwrap();
    let model = train::build_model(cfg, &ds, &scenes).unwrap();
    let store = model.init_params(cfg.seed);
    train::save_checkpoint(dir, cfg, &store, &AdamW::new(&cfg.optim)).unwrap();
    dir.to_path_buf()
}

fn metrics_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join(eval::METRICS_FILE))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_with_zero_scenes_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0, 0);
    assert!(tmp.path().join("manifest.txt").is_file());
    assert!(!scene_dir(tmp.path(), 0).exists());
}

#[test]
fn same_seed_gives_identical_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, 4, 2);
    synth(&b, 4, 2);
    synth(&c, 5, 2);
    let img = |root: &Path| fs::read(frame_dir(&scene_dir(root, 1), 2).join("cam_3.fbt")).unwrap();
    assert_eq!(img(&a), img(&b));
    assert_ne!(img(&a), img(&c));
    let gt = |root: &Path| fs::read(frame_dir(&scene_dir(root, 0), 0).join("bev_gt.fbt")).unwrap();
    assert_eq!(gt(&a), gt(&b));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 1, 1);
    let p = frame_dir(&scene_dir(&data, 0), 0).join("cam_0.fbt");
    let img = read_fbt(&p).unwrap();
    write_fbt(&p, &Tensor::full(img.shape(), f64::NAN)).unwrap();
    let out = tmp.path().join("run");
    let o = bin(&["train", "--data", s(&data), "--out", s(&out), "--set", "optim.max_steps=2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("non-finite") && err.contains("step 1"), "{err}");
    // the log written so far is kept
    assert_eq!(fs::read_to_string(out.join(train::LOG_FILE)).unwrap().lines().count(), 1);
}

#[test]
fn short_training_run_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 1, 2);
    let out = tmp.path().join("run");
    let o = bin(&["train", "--data", s(&data), "--out", s(&out), "--set", "optim.max_steps=3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join(train::LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], train::StepLog::HEADER);
    assert_eq!(lines.len(), 4);
    let fin = out.join(train::FINAL_DIR);
    assert!(fin.join(train::CONFIG_FILE).is_file());
    let (store, cfg) = train::load_checkpoint(&fin).unwrap();
    assert!(!store.is_empty());
    assert_eq!(cfg.unwrap().optim.max_steps, 3);
}

#[test]
fn oracle_eval_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 2);
    let out = tmp.path().join("eval");
    let o = bin(&["eval", "--data", s(&data), "--oracle", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = metrics_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "oracle");
    assert_eq!(rows[0].last().unwrap().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn untrained_checkpoints_score_low_and_rows_follow_ablation_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 2);
    let mut both = RunConfig::desk();
    both.seed = 7;
    let mut base = both.clone();
    base.encoder.fusion.uniform = true;
    base.encoder.gating.enabled = false;
    let mut gating = base.clone();
    gating.encoder.gating.enabled = true;
    let c_both = untrained_checkpoint(&both, &data, &tmp.path().join("both"));
    let c_base = untrained_checkpoint(&base, &data, &tmp.path().join("base"));
    let c_gate = untrained_checkpoint(&gating, &data, &tmp.path().join("gate"));
    let out = tmp.path().join("eval");
    let o = bin(&[
        "eval", "--data", s(&data), "--checkpoint", s(&c_both), "--checkpoint", s(&c_base), "--checkpoint",
        s(&c_gate), "--oracle", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = metrics_rows(&out);
    let variants: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(variants, ["oracle", "baseline", "+gating", "+both"]);
    for r in &rows[1..] {
        let m: f64 = r.last().unwrap().parse().unwrap();
        assert!(m < 0.3, "untrained mIoU {m}");
    }
}

#[test]
fn shape_mismatch_lists_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 1);
    let mut small = RunConfig::desk();
    small.encoder.ffn_hidden = 32;
    let ck = untrained_checkpoint(&small, &data, &tmp.path().join("ck"));
    let o = bin(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ffn"), "{err}");
}

#[test]
fn corrupted_gradcheck_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck", "--corrupt", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.contains("FAIL"));
}

#[test]
fn project_debug_writes_overlays() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["project-debug", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for c in 0..4 {
        assert!(tmp.path().join(format!("grid_overlay_cam{c}.ppm")).is_file());
        assert!(tmp.path().join(format!("visibility_cam{c}.pgm")).is_file());
    }
    assert!(tmp.path().join("anisotropy_cam0.pgm").is_file());
    assert!(tmp.path().join("anisotropy_cam0.csv").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["bogus"]).status.code(), Some(1));
    assert_eq!(bin(&["synth", "--set", "no.such=1", "--out", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(bin(&["synth", "--set", "data.scenes=-3", "--out", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(bin(&["eval", "--data", s(tmp.path()), "--out", s(tmp.path())]).status.code(), Some(1));
    let missing = tmp.path().join("missing");
    assert_eq!(
        bin(&["train", "--data", s(&missing), "--out", s(tmp.path())]).status.code(),
        Some(2)
    );
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_round_trips_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.set("optim.lr", "0.0005").unwrap();
    cfg.set("encoder.distance_gating", "off").unwrap();
    let path = tmp.path().join("cfg.txt");
    fs::write(&path, cfg.to_text()).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(RunConfig::parse(&back.to_text()).unwrap().to_text(), cfg.to_text());
    let out = tmp.path().join("d");
    let o = bin(&["synth", "--config", s(&path), "--set", "data.scenes=0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn front_camera_sees_the_road_ahead() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::desk();
    let report = fisheye_bev_cli::commands::project_debug::run(&cfg, tmp.path()).unwrap();
    let vis = &report.visibility[0];
    let g = &cfg.grid;
    let mut ahead = 0;
    for r in 0..g.height {
        for c in 0..g.width {
            let (x, y) = g.cell_to_ego(r as f64, c as f64);
            if x > 2.5 && y.abs() < x {
                ahead += 1;
                assert!(vis.get(&[r, c]) > 0.0, "cell ({r}, {c}) at ({x}, {y}) hidden");
            }
            if x < -2.5 && y.abs() < -x {
                assert_eq!(vis.get(&[r, c]), 0.0, "cell ({r}, {c}) behind is visible");
            }
        }
    }
    assert!(ahead > 100);
}
