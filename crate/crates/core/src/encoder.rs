//! BEV encoder: stacked blocks of distance-gated temporal self-attention,
//! uncertainty-weighted spatial cross-attention over the fisheye cameras, and
//! a feed-forward sublayer. Every sublayer is post-norm: `LN(x + sublayer(x))`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{BEVGrid, PoseDelta, ReferencePoints};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "enc";

/// Sampling positions for invisible anchors; their weight is zero anyway.
const FAR_AWAY: f64 = -1.0e3;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatingConfig {
    pub kappa: f64,
    pub delta: f64,
    /// `false` fixes γ = 0.5 (ablation).
    pub enabled: bool,
}

impl GatingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid(
                "gating",
                format!("need kappa > 0 and delta in [0, 1], got {} / {}", self.kappa, self.delta),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub mc_samples: usize,
    pub xi: f64,
    pub log_var_prior: f64,
    /// `true` replaces precision weights by 1 (ablation).
    pub uniform: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || !(self.xi > 0.0) {
            return Err(Error::invalid("fusion", "need mc_samples >= 1 and xi > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub dim: usize,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
    /// Sampling points per camera (spatial) and per frame (temporal).
    pub points: usize,
    pub offset_scale: f64,
    pub dropout: f64,
    pub fusion: FusionConfig,
    pub gating: GatingConfig,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 || self.points == 0 {
            return Err(Error::invalid("encoder", "blocks, dim and points must be >= 1"));
        }
        if !(self.offset_scale > 1.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("encoder", "need offset_scale > 1 and dropout in [0, 1)"));
        }
        self.fusion.validate()?;
        self.gating.validate()
    }
}

/// Angle of the first initial sampling point. Off the axes so that points
/// around integer cell references do not start on bilinear kinks.
const RING_PHASE: f64 = 0.3;

/// Offset-head biases that place the `k` initial sampling points one pixel
/// from the reference, evenly spread in angle, so they do not start coincident.
fn ring_offsets(k: usize, offset_scale: f64) -> Vec<f64> {
    if k == 1 {
        return vec![0.0, 0.0];
    }
    (0..k)
        .flat_map(|i| {
            let (s, c) = (RING_PHASE + std::f64::consts::TAU * i as f64 / k as f64).sin_cos();
            [(c / offset_scale).atanh(), (s / offset_scale).atanh()]
        })
        .collect()
}

pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, n_cams: usize, n_queries: usize) {
    let c = cfg.dim;
    let k = cfg.points;
    store.init_uniform(&format!("{PREFIX}.query"), &[n_queries, c], c);
    store.init_uniform(&format!("{PREFIX}.pos"), &[n_queries, c], c);
    let ring = ring_offsets(k, cfg.offset_scale);
    for b in 0..cfg.blocks {
        let p = format!("{PREFIX}.block{b}");
        // temporal: two frames
        nn::init_linear_zero(store, &format!("{p}.tsa.offset"), c, 2 * k * 2);
        store.insert(
            format!("{p}.tsa.offset.b"),
            Tensor::from_vec(&[2 * k * 2], ring.iter().chain(&ring).copied().collect()),
        );
        nn::init_linear(store, &format!("{p}.tsa.logit"), c, 2 * k);
        nn::init_layer_norm(store, &format!("{p}.tsa.ln"), c);
        // spatial: one slice per camera
        nn::init_linear_zero(store, &format!("{p}.sca.offset"), c, n_cams * k * 2);
        store.insert(
            format!("{p}.sca.offset.b"),
            Tensor::from_vec(
                &[n_cams * k * 2],
                (0..n_cams).flat_map(|_| ring.iter().copied()).collect(),
            ),
        );
        nn::init_linear(store, &format!("{p}.sca.logit"), c, n_cams * k);
        nn::init_linear(store, &format!("{p}.sca.mu1"), c, cfg.head_hidden);
        nn::init_linear(store, &format!("{p}.sca.mu2"), cfg.head_hidden, c);
        nn::init_linear(store, &format!("{p}.sca.sigma1"), c, cfg.head_hidden);
        // log-variance head starts at the prior
        nn::init_linear_zero(store, &format!("{p}.sca.sigma2"), cfg.head_hidden, c);
        store.init_const(&format!("{p}.sca.sigma2.b"), &[c], cfg.fusion.log_var_prior);
        nn::init_layer_norm(store, &format!("{p}.sca.ln"), c);
        nn::init_linear(store, &format!("{p}.ffn.fc1"), c, cfg.ffn_hidden);
        nn::init_linear(store, &format!("{p}.ffn.fc2"), cfg.ffn_hidden, c);
        nn::init_layer_norm(store, &format!("{p}.ffn.ln"), c);
    }
}

// ------------------------------------------------------------------ sampling

/// `Σ_a Σ_k anchor_w[n, a] · softmax(logits[n])_k · map(refs[n, a] + s·tanh(raw[n, k]))`
/// for `map[C, H, W]`, `refs[N, A, 2]`, `anchor_w[N, A]`, `raw_offsets[N, K, 2]`,
/// `logits[N, K]`. Returns `[N, C]`.
pub fn deformable_attend(
    tape: &mut Tape,
    map: Var,
    refs: &Tensor,
    anchor_w: &Tensor,
    raw_offsets: Var,
    logits: Var,
    offset_scale: f64,
) -> Result<Var> {
    let w = tape.softmax_lastdim(logits)?;
    deformable_attend_weighted(tape, map, refs, anchor_w, raw_offsets, w, offset_scale)
}

/// [`deformable_attend`] with the point weights `[N, K]` supplied directly.
pub fn deformable_attend_weighted(
    tape: &mut Tape,
    map: Var,
    refs: &Tensor,
    anchor_w: &Tensor,
    raw_offsets: Var,
    weights: Var,
    offset_scale: f64,
) -> Result<Var> {
    let (n, a) = (refs.shape()[0], refs.shape()[1]);
    let k = tape.shape(weights)[1];
    if tape.shape(raw_offsets) != [n, k, 2] || anchor_w.shape() != [n, a] || tape.shape(weights)[0] != n {
        return Err(Error::ShapeMismatch {
            op: "deformable_attend",
            lhs: tape.shape(raw_offsets).to_vec(),
            rhs: refs.shape().to_vec(),
        });
    }
    let off = tape.tanh(raw_offsets);
    let off = tape.scale(off, offset_scale);
    let off = tape.reshape(off, &[n, 1, k, 2])?;
    let off = tape.broadcast_to(off, &[n, a, k, 2])?;
    let r = tape.constant(refs.reshape(&[n, a, 1, 2])?);
    let r = tape.broadcast_to(r, &[n, a, k, 2])?;
    let pts = tape.add(r, off)?;
    let pts = tape.reshape(pts, &[n, a * k, 2])?;
    let w = tape.reshape(weights, &[n, 1, k])?;
    let w = tape.broadcast_to(w, &[n, a, k])?;
    let aw = tape.constant(anchor_w.reshape(&[n, a, 1])?);
    let aw = tape.broadcast_to(aw, &[n, a, k])?;
    let w = tape.mul(w, aw)?;
    let w = tape.reshape(w, &[n, a * k])?;
    tape.weighted_sample(map, pts, w)
}

/// Per-camera reference points mapped into feature-map pixels, with the
/// visible anchors of each query weighted equally.
#[derive(Debug, Clone)]
pub struct CameraSampling {
    /// One `[N_q, A, 2]` tensor per camera.
    pub refs: Vec<Tensor>,
    /// One `[N_q, A]` tensor per camera.
    pub anchor_w: Vec<Tensor>,
    /// `[N_q, N_c]`.
    pub mask: Tensor,
}

impl CameraSampling {
    pub fn new(points: &ReferencePoints, image_hw: (usize, usize), feature_hw: (usize, usize)) -> Self {
        let (nc, nq, na) = (points.num_cameras(), points.num_queries(), points.num_anchors());
        let su = feature_hw.1 as f64 / image_hw.1 as f64;
        let sv = feature_hw.0 as f64 / image_hw.0 as f64;
        let uv = points.uv.data();
        let vis = points.anchor_visible.data();
        let mut refs = Vec::with_capacity(nc);
        let mut anchor_w = Vec::with_capacity(nc);
        for c in 0..nc {
            let mut r = vec![FAR_AWAY; nq * na * 2];
            let mut w = vec![0.0; nq * na];
            for q in 0..nq {
                let base = (c * nq + q) * na;
                let n_vis = (0..na).filter(|&a| vis[base + a] > 0.0).count();
                for a in 0..na {
                    let k = base + a;
                    if vis[k] > 0.0 {
                        r[2 * (q * na + a)] = (uv[2 * k] + 0.5) * su - 0.5;
                        r[2 * (q * na + a) + 1] = (uv[2 * k + 1] + 0.5) * sv - 0.5;
                        w[q * na + a] = 1.0 / n_vis as f64;
                    }
                }
            }
            refs.push(Tensor::from_vec(&[nq, na, 2], r));
            anchor_w.push(Tensor::from_vec(&[nq, na], w));
        }
        CameraSampling {
            refs,
            anchor_w,
            mask: points.mask.clone(),
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.refs.len()
    }
}

// --------------------------------------------------------------- uncertainty

#[derive(Debug, Clone, Copy)]
pub struct Uncertainty {
    /// `[N_q, N_c, C]`.
    pub mu: Var,
    /// `[N_q, N_c, C]`, clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var,
}

fn mlp2(tape: &mut Tape, store: &ParamStore, p1: &str, p2: &str, x: Var) -> Result<Var> {
    let h = nn::linear(tape, store, p1, x)?;
    let h = tape.relu(h);
    nn::linear(tape, store, p2, h)
}

/// Two-layer mean and log-variance heads applied to per-camera features.
pub fn estimate_uncertainty(tape: &mut Tape, store: &ParamStore, prefix: &str, f: Var) -> Result<Uncertainty> {
    let mu = mlp2(tape, store, &format!("{prefix}.mu1"), &format!("{prefix}.mu2"), f)?;
    let raw = mlp2(tape, store, &format!("{prefix}.sigma1"), &format!("{prefix}.sigma2"), f)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Ok(Uncertainty { mu, logvar })
}

/// `z = μ + exp(logvar / 2) ⊙ ε`; `eps` may carry extra leading sample axes.
pub fn reparameterize(tape: &mut Tape, est: &Uncertainty, eps: Var) -> Result<Var> {
    let shape = tape.shape(eps).to_vec();
    let half = tape.scale(est.logvar, 0.5);
    let sigma = tape.exp(half);
    let sigma = tape.broadcast_to(sigma, &shape)?;
    let mu = tape.broadcast_to(est.mu, &shape)?;
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Masked precision-weighted mean over cameras. `z` is `[..., N_q, N_c, C]`,
/// `var` is `[N_q, N_c, C]` and `mask` `[N_q, N_c]`; returns `[..., N_q, C]`.
pub fn precision_fuse(tape: &mut Tape, z: Var, var: Var, mask: &Tensor, xi: f64, uniform: bool) -> Result<Var> {
    let vshape = tape.shape(var).to_vec();
    let zshape = tape.shape(z).to_vec();
    let (nq, nc) = (vshape[0], vshape[1]);
    if mask.shape() != [nq, nc] || zshape.len() < 3 || zshape[zshape.len() - 3..] != vshape[..] {
        return Err(Error::ShapeMismatch {
            op: "precision_fuse",
            lhs: zshape,
            rhs: vshape,
        });
    }
    let m = tape.constant(mask.reshape(&[nq, nc, 1])?);
    let m = tape.broadcast_to(m, &vshape)?;
    let mw = if uniform {
        m
    } else {
        let shifted = tape.add_scalar(var, xi);
        let w = tape.powf(shifted, -1.0)?;
        tape.mul(w, m)?
    };
    let den = tape.sum_axis(mw, 1)?;
    let den = tape.add_scalar(den, xi);
    let mwb = tape.broadcast_to(mw, &zshape)?;
    let num = tape.mul(mwb, z)?;
    let num = tape.sum_axis(num, zshape.len() - 2)?;
    let num_shape = tape.shape(num).to_vec();
    let den = tape.broadcast_to(den, &num_shape)?;
    tape.div(num, den)
}

/// Draws `[S, N_q, N_c, C]` standard normal noise.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, samples: usize, shape: &[usize]) -> Tensor {
    let mut full = vec![samples];
    full.extend_from_slice(shape);
    let n: usize = full.iter().product();
    Tensor::from_vec(&full, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Monte-Carlo fusion: mean over samples of the precision-fused
/// reparameterized features, and per query the channel-averaged unbiased
/// variance across samples (`None` with a single sample).
///
/// The fused sample is linear in the noise, so the sample mean is computed as
/// the fusion of `μ + σ ε̄` with `ε̄` the mean noise; [`mc_fuse_samples`] is
/// the per-sample route.
pub fn mc_fuse<R: Rng + ?Sized>(
    tape: &mut Tape,
    est: &Uncertainty,
    mask: &Tensor,
    cfg: &FusionConfig,
    rng: &mut R,
) -> Result<(Var, Option<Tensor>)> {
    let shape = tape.shape(est.mu).to_vec();
    let eps = draw_noise(rng, cfg.mc_samples, &shape);
    let n = eps.numel() / cfg.mc_samples;
    let mut mean = vec![0.0; n];
    for chunk in eps.data().chunks(n) {
        for (m, e) in mean.iter_mut().zip(chunk) {
            *m += e;
        }
    }
    let inv = 1.0 / cfg.mc_samples as f64;
    let eps_mean = tape.constant(Tensor::from_vec(&shape, mean.into_iter().map(|m| m * inv).collect()));
    let z = reparameterize(tape, est, eps_mean)?;
    let var = tape.exp(est.logvar);
    let fused = precision_fuse(tape, z, var, mask, cfg.xi, cfg.uniform)?;
    let conf = (cfg.mc_samples >= 2).then(|| {
        let samples = fuse_samples_offline(tape.value(est.mu), tape.value(est.logvar), &eps, mask, cfg);
        sample_variance(&samples)
    });
    Ok((fused, conf))
}

/// Per-sample route: reparameterizes `eps[S, N_q, N_c, C]`, fuses every sample
/// and averages on the tape. Returns the mean and the `[S, N_q, C]` samples.
pub fn mc_fuse_samples(
    tape: &mut Tape,
    est: &Uncertainty,
    mask: &Tensor,
    cfg: &FusionConfig,
    eps: &Tensor,
) -> Result<(Var, Var)> {
    let eps = tape.constant(eps.clone());
    let z = reparameterize(tape, est, eps)?;
    let var = tape.exp(est.logvar);
    let fused = precision_fuse(tape, z, var, mask, cfg.xi, cfg.uniform)?;
    Ok((tape.mean_axis(fused, 0)?, fused))
}

/// `[S, N_q, C]` fused samples from plain values.
fn fuse_samples_offline(mu: &Tensor, logvar: &Tensor, eps: &Tensor, mask: &Tensor, cfg: &FusionConfig) -> Tensor {
    let (nq, nc, c) = (mu.shape()[0], mu.shape()[1], mu.shape()[2]);
    let s = cfg.mc_samples;
    let (mu, lv, e, m) = (mu.data(), logvar.data(), eps.data(), mask.data());
    let mut w = vec![0.0; nq * nc * c];
    let mut sd = vec![0.0; nq * nc * c];
    let mut den = vec![0.0; nq * c];
    for q in 0..nq {
        for cam in 0..nc {
            for ch in 0..c {
                let i = (q * nc + cam) * c + ch;
                sd[i] = (0.5 * lv[i]).exp();
                let wt = if cfg.uniform { 1.0 } else { 1.0 / (sd[i] * sd[i] + cfg.xi) };
                w[i] = wt * m[q * nc + cam];
                den[q * c + ch] += w[i];
            }
        }
    }
    let mut out = vec![0.0; s * nq * c];
    for k in 0..s {
        for q in 0..nq {
            for cam in 0..nc {
                for ch in 0..c {
                    let i = (q * nc + cam) * c + ch;
                    if w[i] != 0.0 {
                        let z = mu[i] + sd[i] * e[k * nq * nc * c + i];
                        out[(k * nq + q) * c + ch] += w[i] * z;
                    }
                }
            }
        }
        for q in 0..nq {
            for ch in 0..c {
                out[(k * nq + q) * c + ch] /= den[q * c + ch] + cfg.xi;
            }
        }
    }
    Tensor::from_vec(&[s, nq, c], out)
}

/// `[S, N, C]` to `[N]`: unbiased variance over `S`, averaged over `C`.
fn sample_variance(x: &Tensor) -> Tensor {
    let (s, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..c {
            let mean = (0..s).map(|k| d[(k * n + i) * c + ch]).sum::<f64>() / s as f64;
            acc += (0..s).map(|k| (d[(k * n + i) * c + ch] - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        }
        *o = acc / c as f64;
    }
    Tensor::from_vec(&[n], out)
}

/// Mean over every element of `½[log(v_p / v) + (v + μ²) / v_p − 1]`.
pub fn kl_regularizer(tape: &mut Tape, est: &Uncertainty, log_var_prior: f64) -> Result<Var> {
    let var_prior = log_var_prior.exp();
    let var = tape.exp(est.logvar);
    let mu2 = tape.mul(est.mu, est.mu)?;
    let s = tape.add(var, mu2)?;
    let s = tape.scale(s, 1.0 / var_prior);
    let t = tape.sub(s, est.logvar)?;
    let t = tape.add_scalar(t, log_var_prior - 1.0);
    let t = tape.scale(t, 0.5);
    Ok(tape.mean_all(t))
}

#[derive(Debug, Clone)]
pub struct UscaOutput {
    pub queries: Var,
    pub kl: Var,
    pub conf: Option<Tensor>,
    pub uncertainty: Uncertainty,
}

/// Spatial cross-attention of BEV queries `[N_q, C]` into the per-camera
/// feature maps `[C, H_f, W_f]`.
#[allow(clippy::too_many_arguments)]
pub fn usca_block<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    queries: Var,
    pos: Var,
    maps: &[Var],
    sampling: &CameraSampling,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<UscaOutput> {
    let nc = sampling.num_cameras();
    if maps.len() != nc {
        return Err(Error::invalid(
            "usca_block",
            format!("{} feature maps for {nc} cameras", maps.len()),
        ));
    }
    let nq = tape.shape(queries)[0];
    let k = cfg.points;
    let q = tape.add(queries, pos)?;
    let off = nn::linear(tape, store, &format!("{prefix}.offset"), q)?;
    let off = tape.reshape(off, &[nq, nc, k, 2])?;
    let logits = nn::linear(tape, store, &format!("{prefix}.logit"), q)?;
    let logits = tape.reshape(logits, &[nq, nc, k])?;
    let mut per_cam = Vec::with_capacity(nc);
    for (c, &map) in maps.iter().enumerate() {
        let o = tape.slice(off, 1, c, 1)?;
        let o = tape.reshape(o, &[nq, k, 2])?;
        let l = tape.slice(logits, 1, c, 1)?;
        let l = tape.reshape(l, &[nq, k])?;
        per_cam.push(deformable_attend(
            tape,
            map,
            &sampling.refs[c],
            &sampling.anchor_w[c],
            o,
            l,
            cfg.offset_scale,
        )?);
    }
    let f = tape.stack(&per_cam, 1)?;
    let est = estimate_uncertainty(tape, store, prefix, f)?;
    let (fused, conf) = mc_fuse(tape, &est, &sampling.mask, &cfg.fusion, rng)?;
    let kl = kl_regularizer(tape, &est, cfg.fusion.log_var_prior)?;
    let res = tape.add(queries, fused)?;
    let out = nn::layer_norm(tape, store, &format!("{prefix}.ln"), res)?;
    Ok(UscaOutput {
        queries: out,
        kl,
        conf,
        uncertainty: est,
    })
}

// ------------------------------------------------------------------ temporal

/// Normalized distance of every query to the grid center.
pub fn center_distance(grid: &BEVGrid) -> Vec<f64> {
    grid.normalized_distances()
}

pub fn gating_factor(d: f64, cfg: &GatingConfig) -> f64 {
    if !cfg.enabled {
        return 0.5;
    }
    let x = cfg.kappa * (cfg.delta - d);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// γ for every query as a `[N_q]` tensor.
pub fn gating_factors(grid: &BEVGrid, cfg: &GatingConfig) -> Tensor {
    let g = center_distance(grid).into_iter().map(|d| gating_factor(d, cfg)).collect();
    Tensor::from_vec(&[grid.num_queries()], g)
}

/// Cell-center reference points `(col, row)` as `[N_q, 1, 2]`.
pub fn bev_cell_refs(grid: &BEVGrid) -> Tensor {
    let data = (0..grid.height)
        .flat_map(|r| (0..grid.width).flat_map(move |c| [c as f64, r as f64]))
        .collect();
    Tensor::from_vec(&[grid.num_queries(), 1, 2], data)
}

fn queries_to_grid(tape: &mut Tape, q: Var, grid: &BEVGrid) -> Result<Var> {
    let c = tape.shape(q)[1];
    let t = tape.transpose(q)?;
    tape.reshape(t, &[c, grid.height, grid.width])
}

/// Temporal sampling heads for the current queries.
#[derive(Debug, Clone, Copy)]
pub struct TemporalHeads {
    /// `[N_q, 2, K, 2]`, frame slot 0 is `t − 1`, slot 1 is `t`.
    pub offsets: Var,
    /// Gated weights `[N_q, 2, K]`: `(1 − γ)·softmax` for the history slot and
    /// `γ·softmax` for the current slot, so each row sums to 1.
    pub weights: Var,
}

pub fn temporal_heads(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    current: Var,
    pos: Var,
    gamma: &Tensor,
    cfg: &EncoderConfig,
) -> Result<TemporalHeads> {
    let nq = tape.shape(current)[0];
    let k = cfg.points;
    let q = tape.add(current, pos)?;
    let off = nn::linear(tape, store, &format!("{prefix}.offset"), q)?;
    let offsets = tape.reshape(off, &[nq, 2, k, 2])?;
    let logits = nn::linear(tape, store, &format!("{prefix}.logit"), q)?;
    let logits = tape.reshape(logits, &[nq, 2, k])?;
    let w = tape.softmax_lastdim(logits)?;
    let mut g = Vec::with_capacity(2 * nq);
    for &gi in gamma.data() {
        g.extend([1.0 - gi, gi]);
    }
    let g = tape.constant(Tensor::from_vec(&[nq, 2, 1], g));
    let g = tape.broadcast_to(g, &[nq, 2, k])?;
    let weights = tape.mul(w, g)?;
    Ok(TemporalHeads { offsets, weights })
}

/// Gated two-frame deformable mix `Q̃` (before the residual).
#[allow(clippy::too_many_arguments)]
pub fn temporal_mix(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    current: Var,
    history: Var,
    pos: Var,
    gamma: &Tensor,
    grid: &BEVGrid,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let nq = grid.num_queries();
    let k = cfg.points;
    let heads = temporal_heads(tape, store, prefix, current, pos, gamma, cfg)?;
    let refs = bev_cell_refs(grid);
    let ones = Tensor::ones(&[nq, 1]);
    let mut parts = Vec::with_capacity(2);
    for (slot, src) in [history, current].into_iter().enumerate() {
        let map = queries_to_grid(tape, src, grid)?;
        let o = tape.slice(heads.offsets, 1, slot, 1)?;
        let o = tape.reshape(o, &[nq, k, 2])?;
        let w = tape.slice(heads.weights, 1, slot, 1)?;
        let w = tape.reshape(w, &[nq, k])?;
        parts.push(deformable_attend_weighted(tape, map, &refs, &ones, o, w, cfg.offset_scale)?);
    }
    tape.add(parts[0], parts[1])
}

/// `LN(Q_t + Q̃)`.
#[allow(clippy::too_many_arguments)]
pub fn gated_temporal_attend(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    current: Var,
    history: Var,
    pos: Var,
    gamma: &Tensor,
    grid: &BEVGrid,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let mix = temporal_mix(tape, store, prefix, current, history, pos, gamma, grid, cfg)?;
    let res = tape.add(current, mix)?;
    nn::layer_norm(tape, store, &format!("{prefix}.ln"), res)
}

/// Resamples the previous BEV map `[C, H, W]` into the current ego frame.
pub fn ego_align(tape: &mut Tape, prev: Var, delta: PoseDelta, grid: &BEVGrid) -> Result<Var> {
    if delta == PoseDelta::default() {
        return Ok(prev);
    }
    let c = tape.shape(prev)[0];
    let mut pts = Vec::with_capacity(2 * grid.num_queries());
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (x, y) = grid.cell_to_ego(row as f64, col as f64);
            let (xp, yp) = delta.to_previous(x, y);
            let (r, cc) = grid.ego_to_cell(xp, yp);
            pts.extend([cc, r]);
        }
    }
    let pts = tape.constant(Tensor::from_vec(&[grid.num_queries(), 2], pts));
    let sampled = tape.bilinear_sample(prev, pts)?;
    let t = tape.transpose(sampled)?;
    tape.reshape(t, &[c, grid.height, grid.width])
}

pub fn ffn_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = nn::linear(tape, store, &format!("{prefix}.fc1"), x)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, dropout, training, rng)?;
    let y = nn::linear(tape, store, &format!("{prefix}.fc2"), h)?;
    let y = tape.dropout(y, dropout, training, rng)?;
    let res = tape.add(x, y)?;
    nn::layer_norm(tape, store, &format!("{prefix}.ln"), res)
}

/// One time step of the encoder input.
#[derive(Debug, Clone)]
pub struct EncoderFrame {
    /// Per-camera feature maps `[C, H_f, W_f]`.
    pub maps: Vec<Var>,
    /// Motion from the previous frame (ignored for the first frame).
    pub delta: PoseDelta,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Last-frame queries `[N_q, C]`.
    pub queries: Var,
    /// KL averaged over every spatial cross-attention call.
    pub kl: Var,
    /// Last-frame, last-block confidence per query.
    pub conf: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    frames: &[EncoderFrame],
    sampling: &CameraSampling,
    grid: &BEVGrid,
    cfg: &EncoderConfig,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    if frames.is_empty() {
        return Err(Error::invalid("encoder_forward", "empty sequence"));
    }
    let gamma = gating_factors(grid, &cfg.gating);
    let query = tape.param(store, &format!("{PREFIX}.query"))?;
    let pos = tape.param(store, &format!("{PREFIX}.pos"))?;
    let mut prev: Option<Var> = None;
    let mut kls = Vec::new();
    let mut conf = None;
    for frame in frames {
        let history = match prev {
            Some(p) => {
                let g = queries_to_grid(tape, p, grid)?;
                let g = ego_align(tape, g, frame.delta, grid)?;
                let c = tape.shape(g)[0];
                let flat = tape.reshape(g, &[c, grid.num_queries()])?;
                Some(tape.transpose(flat)?)
            }
            None => None,
        };
        let mut q = query;
        for b in 0..cfg.blocks {
            let p = format!("{PREFIX}.block{b}");
            let hist = history.unwrap_or(q);
            q = gated_temporal_attend(tape, store, &format!("{p}.tsa"), q, hist, pos, &gamma, grid, cfg)?;
            let sca = usca_block(tape, store, &format!("{p}.sca"), q, pos, &frame.maps, sampling, cfg, rng)?;
            q = sca.queries;
            kls.push(sca.kl);
            conf = sca.conf;
            q = ffn_forward(tape, store, &format!("{p}.ffn"), q, cfg.dropout, training, rng)?;
        }
        prev = Some(q);
    }
    let kl = tape.stack(&kls, 0)?;
    let kl = tape.mean_all(kl);
    Ok(EncoderOutput {
        queries: prev.unwrap(),
        kl,
        conf,
    })
}
