//! The full network: per-camera multi-scale image features, the BEV encoder
//! over a frame sequence, and the mask decoder.

use rand::Rng;

use crate::decoder::{self, FocalConfig};
use crate::drme::{self, DrmeConfig};
use crate::encoder::{self, CameraSampling, EncoderConfig, EncoderFrame};
use crate::error::{Error, Result};
use crate::geometry::{bev_reference_points, BEVGrid, CameraRig};
use crate::params::ParamStore;
use crate::synth::{pose_deltas, SceneSample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(H, W)` of every camera image.
    pub image_hw: (usize, usize),
    pub drme: DrmeConfig,
    pub encoder: EncoderConfig,
    pub grid: BEVGrid,
    /// Decoder output resolution; at least the grid size.
    pub output_hw: (usize, usize),
    pub focal: FocalConfig,
    pub lambda_kl: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.drme.validate(self.image_hw.0, self.image_hw.1)?;
        self.encoder.validate()?;
        self.focal.validate()?;
        if self.drme.out_channels != self.encoder.dim {
            return Err(Error::invalid(
                "model",
                format!(
                    "feature channels {} differ from the query dim {}",
                    self.drme.out_channels, self.encoder.dim
                ),
            ));
        }
        if self.output_hw != (self.grid.height, self.grid.width) {
            return Err(Error::invalid("model", "labels are defined at the grid resolution"));
        }
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::invalid("model", "lambda_kl must be >= 0"));
        }
        Ok(())
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        let (h, w) = (self.image_hw.0 / self.drme.patch, self.image_hw.1 / self.drme.patch);
        self.drme.level_sizes(h, w)[0]
    }
}

/// A configured model bound to a rig; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub sampling: CameraSampling,
    pub cameras: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[NUM_CLASSES, H_out, W_out]` for the last frame.
    pub logits: Var,
    pub kl: Var,
    pub conf: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub focal: Var,
    pub kl: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, rig: &CameraRig) -> Result<Model> {
        cfg.validate()?;
        for cam in rig.cameras() {
            if (cam.intrinsics.height, cam.intrinsics.width) != cfg.image_hw {
                return Err(Error::invalid("model", "rig image size differs from the config"));
            }
        }
        let refs = bev_reference_points(&cfg.grid, rig);
        let sampling = CameraSampling::new(&refs, cfg.image_hw, cfg.feature_hw());
        Ok(Model {
            cfg,
            sampling,
            cameras: rig.len(),
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new(seed);
        drme::init_params(&mut store, &self.cfg.drme);
        encoder::init_params(&mut store, &self.cfg.encoder, self.cameras, self.cfg.grid.num_queries());
        decoder::init_params(&mut store, self.cfg.encoder.dim);
        store
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[SceneSample],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let deltas = pose_deltas(frames);
        let mut enc_frames = Vec::with_capacity(frames.len());
        for (sample, &delta) in frames.iter().zip(&deltas) {
            if sample.images.len() != self.cameras {
                return Err(Error::invalid(
                    "model",
                    format!("{} images for {} cameras", sample.images.len(), self.cameras),
                ));
            }
            let maps = sample
                .images
                .iter()
                .map(|img| {
                    let x = tape.constant(img.clone());
                    drme::drme_forward(tape, store, x, &self.cfg.drme)
                })
                .collect::<Result<Vec<_>>>()?;
            enc_frames.push(EncoderFrame { maps, delta });
        }
        let enc = encoder::encoder_forward(
            tape,
            store,
            &enc_frames,
            &self.sampling,
            &self.cfg.grid,
            &self.cfg.encoder,
            training,
            rng,
        )?;
        let grid_hw = (self.cfg.grid.height, self.cfg.grid.width);
        let logits = decoder::mask_head_decode(tape, store, enc.queries, grid_hw, self.cfg.output_hw)?;
        Ok(ForwardOutput {
            logits,
            kl: enc.kl,
            conf: enc.conf,
        })
    }

    /// Focal loss on the last frame's ground truth plus `λ_KL · KL`.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, last: &SceneSample) -> Result<LossParts> {
        let labels = last.labels();
        let focal = decoder::focal_loss(tape, out.logits, &labels, &self.cfg.focal)?;
        let total = decoder::total_loss(tape, focal, out.kl, self.cfg.lambda_kl)?;
        Ok(LossParts {
            total,
            focal,
            kl: out.kl,
        })
    }

    /// Predicted classes of the last frame and the per-query confidence.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        frames: &[SceneSample],
        rng: &mut R,
    ) -> Result<(Vec<usize>, Option<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, frames, false, rng)?;
        Ok((decoder::argmax_classes(tape.value(out.logits)), out.conf))
    }
}
