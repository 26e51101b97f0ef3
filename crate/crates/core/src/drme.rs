//! Multi-scale image features: patch embedding, a small residual backbone
//! standing in for a pretrained vision transformer, taps of its last four
//! layers reshaped to maps, and top-down pyramid fusion.

use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const PREFIX: &str = "drme";

/// Resize factors relative to the token grid, shallowest tap first.
pub const SCALE_SCHEDULE: [f64; 4] = [2.0, 1.0, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct DrmeConfig {
    pub in_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

impl DrmeConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.patch == 0 || !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(Error::invalid(
                "drme",
                format!("{height}x{width} image not divisible by patch {}", self.patch),
            ));
        }
        if self.layers < 4 {
            return Err(Error::invalid("drme", "backbone needs at least 4 layers to tap"));
        }
        let (h, w) = (height / self.patch, width / self.patch);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "drme",
                format!("token grid {h}x{w} must be divisible by 4 for the 1/4 level"),
            ));
        }
        Ok((h, w))
    }

    /// 1-based indices of the tapped layers.
    pub fn taps(&self) -> [usize; 4] {
        let l = self.layers;
        [l - 3, l - 2, l - 1, l]
    }

    pub fn level_sizes(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        SCALE_SCHEDULE.map(|s| ((h as f64 * s) as usize, (w as f64 * s) as usize))
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &DrmeConfig) {
    let p = PREFIX;
    let din = cfg.in_channels * cfg.patch * cfg.patch;
    nn::init_linear(store, &format!("{p}.patch"), din, cfg.dim);
    store.init_uniform(&format!("{p}.cls"), &[1, cfg.dim], cfg.dim);
    for l in 0..cfg.layers {
        let b = format!("{p}.block{l}");
        nn::init_layer_norm(store, &format!("{b}.ln"), cfg.dim);
        nn::init_linear(store, &format!("{b}.fc1"), cfg.dim, cfg.hidden);
        nn::init_linear(store, &format!("{b}.fc2"), cfg.hidden, cfg.dim);
    }
    for lvl in 0..4 {
        nn::init_conv(store, &format!("{p}.lateral{lvl}"), cfg.dim, cfg.out_channels, 1);
        nn::init_conv(store, &format!("{p}.smooth{lvl}"), cfg.out_channels, cfg.out_channels, 3);
        // keep the residual smoothing close to identity at init
        let k = format!("{p}.smooth{lvl}.k");
        let scaled = store.get(&k).unwrap().map(|v| 0.1 * v);
        store.insert(k, scaled);
    }
}

/// `[C, H, W]` image to `[N + 1, D]` tokens; token 0 is the class token.
pub fn patch_embed(tape: &mut Tape, store: &ParamStore, image: Var, cfg: &DrmeConfig) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(Error::invalid("patch_embed", format!("image shape {shape:?}")));
    }
    let (h, w) = cfg.validate(shape[1], shape[2])?;
    let (c, p) = (cfg.in_channels, cfg.patch);
    let x = tape.reshape(image, &[c, h, p, w, p])?;
    let x = tape.permute(x, &[1, 3, 0, 2, 4])?;
    let x = tape.reshape(x, &[h * w, c * p * p])?;
    let tokens = nn::linear(tape, store, &format!("{PREFIX}.patch"), x)?;
    let cls = tape.param(store, &format!("{PREFIX}.cls"))?;
    tape.concat(&[cls, tokens], 0)
}

/// Pre-norm residual MLP blocks: `x + fc2(relu(fc1(LN(x))))`. Returns every
/// layer's output.
pub fn toy_backbone(tape: &mut Tape, store: &ParamStore, tokens: Var, cfg: &DrmeConfig) -> Result<Vec<Var>> {
    let mut x = tokens;
    let mut states = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let b = format!("{PREFIX}.block{l}");
        let y = nn::layer_norm(tape, store, &format!("{b}.ln"), x)?;
        let y = nn::linear(tape, store, &format!("{b}.fc1"), y)?;
        let y = tape.relu(y);
        let y = nn::linear(tape, store, &format!("{b}.fc2"), y)?;
        x = tape.add(x, y)?;
        states.push(x);
    }
    Ok(states)
}

/// Drops the class token and reshapes `[N + 1, D]` to `[D, h, w]`.
pub fn tokens_to_map(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != h * w + 1 {
        return Err(Error::invalid(
            "tokens_to_map",
            format!("{shape:?} tokens for a {h}x{w} map"),
        ));
    }
    let d = shape[1];
    let body = tape.slice(tokens, 0, 1, h * w)?;
    let t = tape.transpose(body)?;
    tape.reshape(t, &[d, h, w])
}

/// Inverse of [`tokens_to_map`] given a class token `[1, D]`.
pub fn map_to_tokens(tape: &mut Tape, map: Var, cls: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    let flat = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    let t = tape.transpose(flat)?;
    tape.concat(&[cls, t], 0)
}

/// Lateral 1x1 projections, resize to the scale schedule, then coarse-to-fine
/// `cur = smooth_l(lat_l + up(cur))` with residual 3x3 smoothing. Returns the
/// finest level.
pub fn multiscale_fuse(tape: &mut Tape, store: &ParamStore, maps: &[Var], cfg: &DrmeConfig) -> Result<Var> {
    if maps.len() != 4 {
        return Err(Error::invalid(
            "multiscale_fuse",
            format!("expected 4 levels, got {}", maps.len()),
        ));
    }
    let s0 = tape.shape(maps[0]).to_vec();
    if maps.iter().any(|&m| tape.shape(m) != s0.as_slice()) {
        return Err(Error::invalid("multiscale_fuse", "levels differ in extent"));
    }
    let sizes = cfg.level_sizes(s0[1], s0[2]);
    let mut laterals = Vec::with_capacity(4);
    for (lvl, &m) in maps.iter().enumerate() {
        let lat = nn::conv(tape, store, &format!("{PREFIX}.lateral{lvl}"), m)?;
        laterals.push(tape.interp_resize(lat, sizes[lvl])?);
    }
    let mut cur: Option<Var> = None;
    for lvl in (0..4).rev() {
        let x = match cur {
            None => laterals[lvl],
            Some(c) => {
                let up = tape.interp_resize(c, sizes[lvl])?;
                tape.add(laterals[lvl], up)?
            }
        };
        let sm = nn::conv(tape, store, &format!("{PREFIX}.smooth{lvl}"), x)?;
        cur = Some(tape.add(x, sm)?);
    }
    Ok(cur.unwrap())
}

/// Image `[C, H, W]` to the fused map `[C_f, 2H/P, 2W/P]`.
pub fn drme_forward(tape: &mut Tape, store: &ParamStore, image: Var, cfg: &DrmeConfig) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    let (h, w) = cfg.validate(shape[1], shape[2])?;
    let tokens = patch_embed(tape, store, image, cfg)?;
    let states = toy_backbone(tape, store, tokens, cfg)?;
    let maps = cfg
        .taps()
        .iter()
        .map(|&l| tokens_to_map(tape, states[l - 1], h, w))
        .collect::<Result<Vec<_>>>()?;
    multiscale_fuse(tape, store, &maps, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FiniteDiffConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DrmeConfig {
        DrmeConfig {
            in_channels: 3,
            patch: 8,
            dim: 6,
            layers: 4,
            hidden: 8,
            out_channels: 5,
        }
    }

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn patch_token_count() {
        let mut store = ParamStore::new(1);
        init_params(&mut store, &cfg());
        let mut t = Tape::new();
        let img = t.constant(random_image(0, 3, 64, 64));
        let tok = patch_embed(&mut t, &store, img, &cfg()).unwrap();
        assert_eq!(t.shape(tok), &[65, 6]);
        let bad = t.constant(Tensor::zeros(&[3, 60, 64]));
        assert!(patch_embed(&mut t, &store, bad, &cfg()).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let mut store = ParamStore::new(1);
        init_params(&mut store, &cfg());
        store.init_const("drme.patch.b", &[6], 0.0);
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[3, 32, 32]));
        let tok = patch_embed(&mut t, &store, img, &cfg()).unwrap();
        assert!(t.value(tok).data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embedding_is_local() {
        let mut store = ParamStore::new(2);
        init_params(&mut store, &cfg());
        let a = random_image(3, 3, 32, 32);
        let mut b = a.clone();
        // pixel (row 9, col 20) belongs to patch (1, 2) = token 1 + 1*4 + 2
        b.set(&[1, 9, 20], 5.0);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let ta = patch_embed(&mut t, &store, va, &cfg()).unwrap();
        let tb = patch_embed(&mut t, &store, vb, &cfg()).unwrap();
        for tok in 0..17 {
            let differs = (0..6).any(|d| t.value(ta).get(&[tok, d]) != t.value(tb).get(&[tok, d]));
            assert_eq!(differs, tok == 7, "token {tok}");
        }
    }

    #[test]
    fn zero_blocks_are_identity() {
        let mut store = ParamStore::new(4);
        init_params(&mut store, &cfg());
        for l in 0..4 {
            for name in ["fc1.w", "fc1.b", "fc2.w", "fc2.b", "ln.g", "ln.b"] {
                let key = format!("drme.block{l}.{name}");
                let shape = store.get(&key).unwrap().shape().to_vec();
                store.init_const(&key, &shape, 0.0);
            }
        }
        let mut t = Tape::new();
        let img = t.constant(random_image(5, 3, 32, 32));
        let tok = patch_embed(&mut t, &store, img, &cfg()).unwrap();
        let states = toy_backbone(&mut t, &store, tok, &cfg()).unwrap();
        assert_eq!(states.len(), 4);
        for s in states {
            assert!(t.value(s).bit_eq(t.value(tok)));
        }
        assert_eq!(cfg().taps(), [1, 2, 3, 4]);
        assert_eq!(DrmeConfig { layers: 6, ..cfg() }.taps(), [3, 4, 5, 6]);
    }

    #[test]
    fn backbone_finite_over_seeds() {
        for seed in 0..100 {
            let mut store = ParamStore::new(seed);
            init_params(&mut store, &cfg());
            let mut t = Tape::new();
            let img = t.constant(random_image(seed + 1000, 3, 32, 32));
            let tok = patch_embed(&mut t, &store, img, &cfg()).unwrap();
            for s in toy_backbone(&mut t, &store, tok, &cfg()).unwrap() {
                assert!(t.value(s).all_finite(), "seed {seed}");
            }
        }
    }

    #[test]
    fn token_map_layout_and_round_trip() {
        // tokens [c, t1, t2, t3, t4] with D = 1
        let mut t = Tape::new();
        let tok = t.constant(Tensor::from_vec(&[5, 1], vec![9.0, 1.0, 2.0, 3.0, 4.0]));
        let m = tokens_to_map(&mut t, tok, 2, 2).unwrap();
        assert_eq!(t.shape(m), &[1, 2, 2]);
        assert_eq!(t.value(m).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(tokens_to_map(&mut t, tok, 2, 3).is_err());

        let map = t.constant(random_image(6, 3, 2, 4));
        let cls = t.constant(Tensor::from_vec(&[1, 3], vec![7.0, 8.0, 9.0]));
        let back = map_to_tokens(&mut t, map, cls).unwrap();
        let again = tokens_to_map(&mut t, back, 2, 4).unwrap();
        assert!(t.value(again).bit_eq(t.value(map)));

        let other = t.constant(Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 1e6]));
        let perturbed = map_to_tokens(&mut t, map, other).unwrap();
        let m2 = tokens_to_map(&mut t, perturbed, 2, 4).unwrap();
        assert!(t.value(m2).bit_eq(t.value(map)));
    }

    #[test]
    fn zero_inputs_fuse_to_zero_and_extent_doubles() {
        let mut store = ParamStore::new(7);
        init_params(&mut store, &cfg());
        for lvl in 0..4 {
            store.init_const(&format!("drme.lateral{lvl}.b"), &[5], 0.0);
            store.init_const(&format!("drme.smooth{lvl}.b"), &[5], 0.0);
        }
        let mut t = Tape::new();
        let maps: Vec<Var> = (0..4).map(|_| t.constant(Tensor::zeros(&[6, 4, 4]))).collect();
        let out = multiscale_fuse(&mut t, &store, &maps, &cfg()).unwrap();
        assert_eq!(t.shape(out), &[5, 8, 8]);
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
        assert!(multiscale_fuse(&mut t, &store, &maps[..3], &cfg()).is_err());
    }

    #[test]
    fn fpn_matches_upsample_sum_oracle() {
        let c = 3;
        let cfg = DrmeConfig {
            dim: c,
            out_channels: c,
            ..cfg()
        };
        let mut store = ParamStore::new(8);
        init_params(&mut store, &cfg);
        for lvl in 0..4 {
            store.insert(format!("drme.lateral{lvl}.k"), nn::identity_kernel(c));
            store.init_const(&format!("drme.lateral{lvl}.b"), &[c], 0.0);
            store.init_const(&format!("drme.smooth{lvl}.k"), &[c, c, 3, 3], 0.0);
            store.init_const(&format!("drme.smooth{lvl}.b"), &[c], 0.0);
        }
        let inputs: Vec<Tensor> = (0..4).map(|i| random_image(20 + i, c, 8, 8)).collect();
        let mut t = Tape::new();
        let maps: Vec<Var> = inputs.iter().map(|m| t.constant(m.clone())).collect();
        let out = multiscale_fuse(&mut t, &store, &maps, &cfg).unwrap();

        // Oracle: independent half-pixel bilinear resize, then up-sum cascade.
        fn resize(x: &Tensor, h2: usize, w2: usize) -> Tensor {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let coord = |i: usize, src: usize, dst: usize| {
                let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, if i1 == i0 { 0.0 } else { s - i0 as f64 })
            };
            let mut out = Tensor::zeros(&[c, h2, w2]);
            for ch in 0..c {
                for i in 0..h2 {
                    let (r0, r1, fy) = coord(i, h, h2);
                    for j in 0..w2 {
                        let (c0, c1, fx) = coord(j, w, w2);
                        let v = (1.0 - fy) * ((1.0 - fx) * x.get(&[ch, r0, c0]) + fx * x.get(&[ch, r0, c1]))
                            + fy * ((1.0 - fx) * x.get(&[ch, r1, c0]) + fx * x.get(&[ch, r1, c1]));
                        out.set(&[ch, i, j], v);
                    }
                }
            }
            out
        }
        let sizes = [16, 8, 4, 2];
        let lat: Vec<Tensor> = inputs.iter().zip(sizes).map(|(m, s)| resize(m, s, s)).collect();
        let mut cur = lat[3].clone();
        for lvl in (0..3).rev() {
            let up = resize(&cur, sizes[lvl], sizes[lvl]);
            cur = Tensor::from_vec(
                &[c, sizes[lvl], sizes[lvl]],
                lat[lvl].data().iter().zip(up.data()).map(|(a, b)| a + b).collect(),
            );
        }
        assert!(t.value(out).max_abs_diff(&cur) < 1e-12);
    }

    #[test]
    fn gradients_reach_patch_embedding() {
        let c = DrmeConfig {
            patch: 4,
            dim: 4,
            hidden: 4,
            out_channels: 3,
            ..cfg()
        };
        let mut store = ParamStore::new(9);
        init_params(&mut store, &c);
        let img = random_image(10, 3, 16, 16);
        let readout = random_image(11, 3, 8, 8);
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.constant(img.clone());
            let y = drme_forward(t, s, x, &c)?;
            let r = t.constant(readout.clone());
            let p = t.mul(y, r)?;
            Ok(t.sum_all(p))
        };
        let report = finite_diff_check(&store, &FiniteDiffConfig::default(), f).unwrap();
        assert!(report.passes(1e-4), "{:?}", report.per_param);
        let g = report.per_param.iter().find(|(n, _)| n == "drme.patch.w").unwrap();
        assert!(g.1 < 1e-4);
        // check that the gradient there is not trivially zero
        let mut store2 = store.clone();
        let mut t = Tape::new();
        let l = f(&mut t, &store2).unwrap();
        t.backward(l, &mut store2).unwrap();
        assert!(store2.grad("drme.patch.w").unwrap().data().iter().any(|v| v.abs() > 1e-8));
    }
}
