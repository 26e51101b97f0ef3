//! Run configuration: `section.key = value` text with `#` comments.
//!
//! Every key has a default drawn from the selected profile. Parsing starts
//! from the profile named in the file (or `desk`) and applies each line in
//! order, so `parse(serialize(c)) == c` for every valid config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fisheye_bev_core::decoder::FocalConfig;
use fisheye_bev_core::drme::DrmeConfig;
use fisheye_bev_core::encoder::{EncoderConfig, FusionConfig, GatingConfig};
use fisheye_bev_core::geometry::{BEVGrid, CameraRig};
use fisheye_bev_core::model::ModelConfig;
use fisheye_bev_core::synth::SceneParams;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(format!("unknown profile `{s}` (desk|full)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub frames: usize,
    pub half_extent_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means `epochs` alone decides.
    pub max_steps: usize,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub drme: DrmeConfig,
    pub encoder: EncoderConfig,
    pub grid: BEVGrid,
    pub focal: FocalConfig,
    pub lambda_kl: f64,
    pub optim: OptimConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            data: DataConfig {
                scenes: 40,
                frames: 3,
                half_extent_m: 32.0,
            },
            drme: DrmeConfig {
                in_channels: 3,
                patch: 8,
                dim: 64,
                layers: 4,
                hidden: 128,
                out_channels: 64,
            },
            encoder: EncoderConfig {
                blocks: 2,
                dim: 64,
                head_hidden: 64,
                ffn_hidden: 128,
                points: 4,
                offset_scale: 3.0,
                dropout: 0.1,
                fusion: FusionConfig {
                    mc_samples: 4,
                    xi: 1e-6,
                    log_var_prior: -4.0,
                    uniform: false,
                },
                gating: GatingConfig {
                    kappa: 10.0,
                    delta: 0.8,
                    enabled: true,
                },
            },
            grid: BEVGrid::new(32, 32, 0.5, vec![0.0, 0.5]).expect("desk grid"),
            focal: FocalConfig::default(),
            lambda_kl: 0.01,
            optim: OptimConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
                lr_decay: 0.99,
                batch: 1,
                epochs: 8,
                max_steps: 300,
                grad_clip: 1.0,
            },
        }
    }

    pub fn full() -> Self {
        let mut c = Self::desk();
        c.profile = Profile::Full;
        c.data.scenes = 1000;
        c.drme = DrmeConfig {
            in_channels: 3,
            patch: 5,
            dim: 256,
            layers: 12,
            hidden: 1024,
            out_channels: 256,
        };
        c.encoder.dim = 256;
        c.encoder.head_hidden = 256;
        c.encoder.ffn_hidden = 512;
        c.encoder.blocks = 2;
        c.encoder.points = 4;
        c.grid = BEVGrid::new(50, 50, 0.4, vec![0.0, 0.5, 1.0, 1.5]).expect("full grid");
        c.optim.lr = 3e-5;
        c.optim.batch = 2;
        c.optim.epochs = 50;
        c.optim.max_steps = 0;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn rig(&self) -> CameraRig {
        match self.profile {
            Profile::Desk => CameraRig::default_desk(),
            Profile::Full => CameraRig::default_full(),
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            half_extent_m: self.data.half_extent_m,
            frames: self.data.frames,
            ..SceneParams::default()
        }
    }

    pub fn model_config(&self, image_hw: (usize, usize)) -> ModelConfig {
        ModelConfig {
            image_hw,
            drme: self.drme.clone(),
            encoder: self.encoder.clone(),
            grid: self.grid.clone(),
            output_hw: (self.grid.height, self.grid.width),
            focal: self.focal,
            lambda_kl: self.lambda_kl,
        }
    }

    /// Every key in serialization order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let o = &self.optim;
        let anchors: Vec<String> = self.grid.z_anchors.iter().map(|z| fmt_f64(*z)).collect();
        vec![
            ("run.profile", self.profile.to_string()),
            ("run.seed", self.seed.to_string()),
            ("data.scenes", self.data.scenes.to_string()),
            ("data.frames", self.data.frames.to_string()),
            ("data.half_extent_m", fmt_f64(self.data.half_extent_m)),
            ("drme.patch", self.drme.patch.to_string()),
            ("drme.dim", self.drme.dim.to_string()),
            ("drme.layers", self.drme.layers.to_string()),
            ("drme.hidden", self.drme.hidden.to_string()),
            ("drme.out_channels", self.drme.out_channels.to_string()),
            ("encoder.blocks", e.blocks.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.head_hidden", e.head_hidden.to_string()),
            ("encoder.ffn_hidden", e.ffn_hidden.to_string()),
            ("encoder.points", e.points.to_string()),
            ("encoder.offset_scale", fmt_f64(e.offset_scale)),
            ("encoder.dropout", fmt_f64(e.dropout)),
            (
                "encoder.uncertainty_fusion",
                if e.fusion.uniform { "uniform" } else { "on" }.into(),
            ),
            (
                "encoder.distance_gating",
                if e.gating.enabled { "on" } else { "off" }.into(),
            ),
            ("fusion.mc_samples", e.fusion.mc_samples.to_string()),
            ("fusion.xi", fmt_f64(e.fusion.xi)),
            ("fusion.log_var_prior", fmt_f64(e.fusion.log_var_prior)),
            ("gating.kappa", fmt_f64(e.gating.kappa)),
            ("gating.delta", fmt_f64(e.gating.delta)),
            ("grid.height", self.grid.height.to_string()),
            ("grid.width", self.grid.width.to_string()),
            ("grid.cell_m", fmt_f64(self.grid.cell_m)),
            ("grid.z_anchors", anchors.join(" ")),
            ("focal.alpha", fmt_f64(self.focal.alpha)),
            ("focal.gamma", fmt_f64(self.focal.gamma)),
            ("loss.lambda_kl", fmt_f64(self.lambda_kl)),
            ("optim.lr", fmt_f64(o.lr)),
            ("optim.beta1", fmt_f64(o.beta1)),
            ("optim.beta2", fmt_f64(o.beta2)),
            ("optim.eps", fmt_f64(o.eps)),
            ("optim.weight_decay", fmt_f64(o.weight_decay)),
            ("optim.lr_decay", fmt_f64(o.lr_decay)),
            ("optim.batch", o.batch.to_string()),
            ("optim.epochs", o.epochs.to_string()),
            ("optim.max_steps", o.max_steps.to_string()),
            ("optim.grad_clip", fmt_f64(o.grad_clip)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let sec = k.split_once('.').map_or("", |p| p.0);
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                s.push_str(&format!("# {sec}\n"));
                section = sec;
            }
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let e = &mut self.encoder;
        let o = &mut self.optim;
        match key.trim() {
            "run.profile" => {
                let p: Profile = v.parse()?;
                if p != self.profile {
                    let seed = self.seed;
                    *self = Self::for_profile(p);
                    self.seed = seed;
                }
            }
            "run.seed" => self.seed = num(key, v)?,
            "data.scenes" => self.data.scenes = num(key, v)?,
            "data.frames" => self.data.frames = num(key, v)?,
            "data.half_extent_m" => self.data.half_extent_m = num(key, v)?,
            "drme.patch" => self.drme.patch = num(key, v)?,
            "drme.dim" => self.drme.dim = num(key, v)?,
            "drme.layers" => self.drme.layers = num(key, v)?,
            "drme.hidden" => self.drme.hidden = num(key, v)?,
            "drme.out_channels" => self.drme.out_channels = num(key, v)?,
            "encoder.blocks" => e.blocks = num(key, v)?,
            "encoder.dim" => e.dim = num(key, v)?,
            "encoder.head_hidden" => e.head_hidden = num(key, v)?,
            "encoder.ffn_hidden" => e.ffn_hidden = num(key, v)?,
            "encoder.points" => e.points = num(key, v)?,
            "encoder.offset_scale" => e.offset_scale = num(key, v)?,
            "encoder.dropout" => e.dropout = num(key, v)?,
            "encoder.uncertainty_fusion" => {
                e.fusion.uniform = match v {
                    "on" => false,
                    "uniform" => true,
                    _ => return Err(format!("{key}: expected on|uniform, got `{v}`")),
                }
            }
            "encoder.distance_gating" => {
                e.gating.enabled = match v {
                    "on" => true,
                    "off" => false,
                    _ => return Err(format!("{key}: expected on|off, got `{v}`")),
                }
            }
            "fusion.mc_samples" => e.fusion.mc_samples = num(key, v)?,
            "fusion.xi" => e.fusion.xi = num(key, v)?,
            "fusion.log_var_prior" => e.fusion.log_var_prior = num(key, v)?,
            "gating.kappa" => e.gating.kappa = num(key, v)?,
            "gating.delta" => e.gating.delta = num(key, v)?,
            "grid.height" => self.grid.height = num(key, v)?,
            "grid.width" => self.grid.width = num(key, v)?,
            "grid.cell_m" => self.grid.cell_m = num(key, v)?,
            "grid.z_anchors" => {
                self.grid.z_anchors = v
                    .split_whitespace()
                    .map(|t| num(key, t))
                    .collect::<Result<_, _>>()?
            }
            "focal.alpha" => self.focal.alpha = num(key, v)?,
            "focal.gamma" => self.focal.gamma = num(key, v)?,
            "loss.lambda_kl" => self.lambda_kl = num(key, v)?,
            "optim.lr" => o.lr = num(key, v)?,
            "optim.beta1" => o.beta1 = num(key, v)?,
            "optim.beta2" => o.beta2 = num(key, v)?,
            "optim.eps" => o.eps = num(key, v)?,
            "optim.weight_decay" => o.weight_decay = num(key, v)?,
            "optim.lr_decay" => o.lr_decay = num(key, v)?,
            "optim.batch" => o.batch = num(key, v)?,
            "optim.epochs" => o.epochs = num(key, v)?,
            "optim.max_steps" => o.max_steps = num(key, v)?,
            "optim.grad_clip" => o.grad_clip = num(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses config text on top of `base`. A `run.profile` line resets all
    /// keys to that profile's defaults, so it belongs at the top of a file.
    pub fn parse_onto(base: RunConfig, text: &str) -> Result<RunConfig, String> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |p| p.0).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `section.key = value`", i + 1))?;
            cfg.set(k, v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        Self::parse_onto(Self::desk(), text)
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))
    }

    pub fn validate(&self) -> Result<(), String> {
        let rig = self.rig();
        let cam = &rig.cameras()[0].intrinsics;
        self.model_config((cam.height, cam.width))
            .validate()
            .map_err(|e| e.to_string())?;
        BEVGrid::new(self.grid.height, self.grid.width, self.grid.cell_m, self.grid.z_anchors.clone())
            .map_err(|e| e.to_string())?;
        self.scene_params().validate().map_err(|e| e.to_string())?;
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err("optim: need lr > 0 and betas in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || !(o.lr_decay > 0.0) || !(o.grad_clip >= 0.0) {
            return Err("optim: need eps > 0, weight_decay >= 0, lr_decay > 0, grad_clip >= 0".into());
        }
        if o.batch == 0 {
            return Err("optim.batch must be >= 1".into());
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

/// Shortest text that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [RunConfig::desk(), RunConfig::full()] {
            c.validate().unwrap();
            let text = c.to_text();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn overrides_comments_and_ablation_keys() {
        let text = "# ablation\nrun.seed = 7  # inline\nencoder.uncertainty_fusion = uniform\nencoder.distance_gating = off\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert!(c.encoder.fusion.uniform);
        assert!(!c.encoder.gating.enabled);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(RunConfig::parse("optim.momentum = 0.9").unwrap_err().contains("unknown key"));
        assert!(RunConfig::parse("optim.lr 0.1").is_err());
        assert!(RunConfig::parse("encoder.distance_gating = maybe").is_err());
        assert!(RunConfig::parse("optim.lr = -1").is_err());
    }

    #[test]
    fn stated_hyperparameters() {
        let f = RunConfig::full();
        assert_eq!((f.encoder.gating.delta, f.encoder.gating.kappa), (0.8, 10.0));
        assert_eq!((f.optim.lr, f.optim.lr_decay, f.optim.batch, f.optim.epochs), (3e-5, 0.99, 2, 50));
        assert_eq!((f.grid.height, f.grid.width, f.data.frames), (50, 50, 3));
        assert_eq!(f.lambda_kl, 0.01);
        let d = RunConfig::desk();
        assert_eq!((d.grid.height, d.encoder.dim, d.encoder.blocks, d.optim.batch, d.optim.max_steps), (32, 64, 2, 1, 300));
    }

    #[test]
    fn profile_line_resets_defaults() {
        let c = RunConfig::parse("run.profile = full\nrun.seed = 3\n").unwrap();
        assert_eq!(c.profile, Profile::Full);
        assert_eq!(c.seed, 3);
        assert_eq!(c.grid.height, 50);
    }
}
