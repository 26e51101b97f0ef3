//! Per-class mask decoding of the BEV queries and the training objective.

use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "dec";

pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["void", "road", "sidewalk", "vegetation", "vehicle", "ego"];
pub const VOID: usize = 0;

pub fn init_params(store: &mut ParamStore, dim: usize) {
    nn::init_linear(store, &format!("{PREFIX}.proj"), dim, NUM_CLASSES);
    nn::init_conv(store, &format!("{PREFIX}.refine"), NUM_CLASSES, NUM_CLASSES, 3);
}

/// Queries `[H·W, C]` to class logits `[NUM_CLASSES, H_out, W_out]`: a
/// per-query projection, bilinear upsampling, then a residual 3×3 refinement.
pub fn mask_head_decode(
    tape: &mut Tape,
    store: &ParamStore,
    queries: Var,
    bev_hw: (usize, usize),
    target: (usize, usize),
) -> Result<Var> {
    let nq = tape.shape(queries)[0];
    if nq != bev_hw.0 * bev_hw.1 {
        return Err(Error::invalid(
            "mask_head_decode",
            format!("{nq} queries for a {}x{} grid", bev_hw.0, bev_hw.1),
        ));
    }
    if target.0 < bev_hw.0 || target.1 < bev_hw.1 {
        return Err(Error::invalid("mask_head_decode", "target smaller than the grid"));
    }
    let logits = nn::linear(tape, store, &format!("{PREFIX}.proj"), queries)?;
    let t = tape.transpose(logits)?;
    let map = tape.reshape(t, &[NUM_CLASSES, bev_hw.0, bev_hw.1])?;
    let up = if target == bev_hw { map } else { tape.interp_resize(map, target)? };
    let r = nn::conv(tape, store, &format!("{PREFIX}.refine"), up)?;
    tape.add(up, r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::invalid(
                "focal",
                format!("need alpha in (0, 1] and gamma >= 0, got {} / {}", self.alpha, self.gamma),
            ));
        }
        Ok(())
    }
}

/// Mean of `−α(1 − p_t)^γ log p_t` over non-void pixels of `logits[K, H, W]`;
/// `labels` is the row-major `[H, W]` class map. Zero when every pixel is void.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[usize], cfg: &FocalConfig) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || shape[1] * shape[2] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let k = shape[0];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("focal_loss", format!("label {bad} outside [0, {k})")));
    }
    let flat = tape.reshape(logits, &[k, labels.len()])?;
    let rows = tape.transpose(flat)?;
    let logp = tape.log_softmax_lastdim(rows)?;
    let logpt = tape.gather_last(logp, labels)?;
    let pt = tape.exp(logpt);
    let q = tape.scale(pt, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let q = tape.clamp(q, 0.0, 1.0);
    let modulator = if cfg.gamma == 0.0 {
        tape.constant(Tensor::ones(&[labels.len()]))
    } else {
        tape.powf(q, cfg.gamma)?
    };
    let per_px = tape.mul(modulator, logpt)?;
    let scored: Vec<f64> = labels.iter().map(|&y| if y == VOID { 0.0 } else { 1.0 }).collect();
    let count = scored.iter().sum::<f64>();
    let m = tape.constant(Tensor::from_vec(&[labels.len()], scored));
    let per_px = tape.mul(per_px, m)?;
    let total = tape.sum_all(per_px);
    Ok(tape.scale(total, -cfg.alpha / count.max(1.0)))
}

pub fn total_loss(tape: &mut Tape, focal: Var, kl: Var, lambda_kl: f64) -> Result<Var> {
    if !(lambda_kl >= 0.0) {
        return Err(Error::invalid("total_loss", format!("lambda_kl = {lambda_kl}")));
    }
    let k = tape.scale(kl, lambda_kl);
    tape.add(focal, k)
}

/// Per-pixel argmax of `logits[K, H, W]`.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (k, n) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..n)
        .map(|i| {
            (0..k)
                .max_by(|&a, &b| d[a * n + i].total_cmp(&d[b * n + i]))
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FiniteDiffConfig};
    use proptest::prelude::*;

    /// Logits whose softmax puts `p` on class `y` and spreads the rest evenly.
    fn logits_for(p: f64, y: usize, n: usize) -> Tensor {
        let rest = (1.0 - p) / (NUM_CLASSES - 1) as f64;
        let mut d = vec![0.0; NUM_CLASSES * n];
        for c in 0..NUM_CLASSES {
            let v = if c == y { p.ln() } else { rest.ln() };
            for i in 0..n {
                d[c * n + i] = v;
            }
        }
        Tensor::from_vec(&[NUM_CLASSES, 1, n], d)
    }

    fn focal_at(p: f64, cfg: &FocalConfig) -> f64 {
        let mut t = Tape::new();
        let l = t.constant(logits_for(p, 2, 3));
        let f = focal_loss(&mut t, l, &[2, 2, 2], cfg).unwrap();
        t.value(f).item()
    }

    #[test]
    fn focal_examples() {
        let ce = FocalConfig { alpha: 1.0, gamma: 0.0 };
        assert!((focal_at(0.5, &ce) - 2f64.ln()).abs() < 1e-12);
        let v = focal_at(0.9, &FocalConfig::default());
        assert!((v - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((v - 2.63401e-4).abs() < 1e-9);
        let mut t = Tape::new();
        let mut sharp = Tensor::full(&[NUM_CLASSES, 1, 2], -1e3);
        sharp.set(&[3, 0, 0], 0.0);
        sharp.set(&[3, 0, 1], 0.0);
        let l = t.constant(sharp);
        let f = focal_loss(&mut t, l, &[3, 3], &FocalConfig::default()).unwrap();
        assert_eq!(t.value(f).item(), 0.0);
    }

    #[test]
    fn void_pixels_are_not_scored() {
        let mut t = Tape::new();
        let l = t.constant(logits_for(0.9, 2, 3));
        let f = focal_loss(&mut t, l, &[2, VOID, VOID], &FocalConfig::default()).unwrap();
        assert!((t.value(f).item() - 2.63401e-4).abs() < 1e-9);
        let f = focal_loss(&mut t, l, &[VOID; 3], &FocalConfig::default()).unwrap();
        assert_eq!(t.value(f).item(), 0.0);
        assert!(focal_loss(&mut t, l, &[2, 6, 1], &FocalConfig::default()).is_err());
        assert!(focal_loss(&mut t, l, &[2, 2], &FocalConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn focal_is_nonnegative_and_decreasing(a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let cfg = FocalConfig::default();
            let (fa, fb) = (focal_at(a, &cfg), focal_at(b, &cfg));
            prop_assert!(fa >= 0.0 && fb >= 0.0);
            if a < b {
                prop_assert!(fa > fb);
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::scalar(0.5));
        let k = t.constant(Tensor::scalar(1.0));
        let tot = total_loss(&mut t, f, k, 0.01).unwrap();
        assert!((t.value(tot).item() - 0.51).abs() < 1e-15);
        let tot = total_loss(&mut t, f, k, 0.0).unwrap();
        assert_eq!(t.value(tot).item(), 0.5);
        assert!(total_loss(&mut t, f, k, -1.0).is_err());
    }

    #[test]
    fn decode_shapes_and_zero_params() {
        let mut store = ParamStore::new(0);
        init_params(&mut store, 4);
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_vec(&[2500, 4], (0..10_000).map(|i| (i as f64).sin()).collect()));
        let out = mask_head_decode(&mut t, &store, q, (50, 50), (200, 200)).unwrap();
        assert_eq!(t.shape(out), &[NUM_CLASSES, 200, 200]);
        assert!(mask_head_decode(&mut t, &store, q, (50, 50), (40, 40)).is_err());
        assert!(mask_head_decode(&mut t, &store, q, (25, 50), (50, 50)).is_err());

        let mut zero = ParamStore::new(0);
        nn::init_linear_zero(&mut zero, "dec.proj", 4, NUM_CLASSES);
        zero.init_const("dec.refine.k", &[NUM_CLASSES, NUM_CLASSES, 3, 3], 0.0);
        zero.init_const("dec.refine.b", &[NUM_CLASSES], 0.0);
        let mut t = Tape::new();
        let q = t.constant(Tensor::full(&[16, 4], 3.0));
        let out = mask_head_decode(&mut t, &zero, q, (4, 4), (8, 8)).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_resolution_skips_resampling() {
        let mut store = ParamStore::new(3);
        nn::init_linear(&mut store, "dec.proj", 4, NUM_CLASSES);
        store.init_const("dec.refine.k", &[NUM_CLASSES, NUM_CLASSES, 3, 3], 0.0);
        store.init_const("dec.refine.b", &[NUM_CLASSES], 0.0);
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_vec(&[12, 4], (0..48).map(|i| i as f64 * 0.1).collect()));
        let out = mask_head_decode(&mut t, &store, q, (3, 4), (3, 4)).unwrap();
        let w = t.param(&store, "dec.proj.w").unwrap();
        let b = t.param(&store, "dec.proj.b").unwrap();
        let direct = t.linear(q, w, b).unwrap();
        let v = t.value(out);
        let d = t.value(direct);
        for i in 0..12 {
            for c in 0..NUM_CLASSES {
                assert!((v.get(&[c, i / 4, i % 4]) - d.get(&[i, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_picks_largest() {
        let l = logits_for(0.7, 4, 2);
        assert_eq!(argmax_classes(&l), vec![4, 4]);
    }

    #[test]
    fn decoder_and_objective_gradients() {
        let mut store = ParamStore::new(8);
        init_params(&mut store, 5);
        nn::init_linear(&mut store, "head", 3, 5);
        let x = Tensor::from_vec(&[16, 3], (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
        let labels: Vec<usize> = (0..64).map(|i| (i * 7 + i / 5) % NUM_CLASSES).collect();
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            let q = nn::linear(t, s, "head", xv)?;
            let q = t.tanh(q);
            let logits = mask_head_decode(t, s, q, (4, 4), (8, 8))?;
            let focal = focal_loss(t, logits, &labels, &FocalConfig::default())?;
            let kl = t.mul(q, q)?;
            let kl = t.mean_all(kl);
            total_loss(t, focal, kl, 0.01)
        };
        let report = finite_diff_check(&store, &FiniteDiffConfig::default(), f).unwrap();
        assert!(report.passes(1e-4), "{:?}", report.per_param);
    }
}
