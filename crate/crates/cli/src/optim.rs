//! AdamW with decoupled weight decay and a per-epoch learning-rate decay.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fisheye_bev_core::{ParamStore, Tensor};

use crate::config::OptimConfig;
use crate::error::CliError;

const STATE_FILE: &str = "optimizer.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub step: u64,
    /// First and second moments keyed by parameter name.
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            lr_decay: cfg.lr_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update from the gradients accumulated in `store`:
    /// `θ ← θ(1 - lr·wd) - lr·m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = 1.0 - self.lr * self.weight_decay;
            let grad = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] *= decay;
                theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.lr_decay;
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Moments as tensors under `m.<name>` / `v.<name>` plus a small text file
    /// with the scalar state.
    pub fn save(&self, dir: &Path, store: &ParamStore) -> Result<(), CliError> {
        let mut st = ParamStore::new(0);
        for (name, (m, v)) in &self.moments {
            let shape = store.get(name)?.shape().to_vec();
            st.insert(format!("m.{name}"), Tensor::from_vec(&shape, m.clone()));
            st.insert(format!("v.{name}"), Tensor::from_vec(&shape, v.clone()));
        }
        st.save(&dir.join("moments"))?;
        let text = format!(
            "step = {}\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nweight_decay = {:?}\nlr_decay = {:?}\n",
            self.step, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.lr_decay
        );
        let p = dir.join(STATE_FILE);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<AdamW, CliError> {
        let p = dir.join(STATE_FILE);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let mut o = AdamW {
            lr: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
            lr_decay: 1.0,
            step: 0,
            moments: BTreeMap::new(),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bad = || CliError::Data(format!("{}: malformed line `{line}`", p.display()));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let x: f64 = v.trim().parse().map_err(|_| bad())?;
            match k.trim() {
                "step" => o.step = x as u64,
                "lr" => o.lr = x,
                "beta1" => o.beta1 = x,
                "beta2" => o.beta2 = x,
                "eps" => o.eps = x,
                "weight_decay" => o.weight_decay = x,
                "lr_decay" => o.lr_decay = x,
                _ => return Err(bad()),
            }
        }
        let st = ParamStore::load(&dir.join("moments"))?;
        for (name, p) in st.iter() {
            if let Some(base) = name.strip_prefix("m.") {
                let v = st.get(&format!("v.{base}"))?;
                o.moments
                    .insert(base.to_string(), (p.value.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(1);
        s.init_uniform("a", &[3, 2], 3);
        s.init_const("b", &[2], 0.5);
        s
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut s = store();
        let before: Vec<f64> = s.get("a").unwrap().data().to_vec();
        let mut o = AdamW::new(&RunConfig::full().optim);
        o.step(&mut s);
        for (b, a) in before.iter().zip(s.get("a").unwrap().data()) {
            assert_eq!(*a, b * (1.0 - 3e-5 * 0.01));
        }
    }

    #[test]
    fn lr_after_two_epochs() {
        let mut o = AdamW::new(&RunConfig::full().optim);
        o.end_epoch();
        o.end_epoch();
        assert!((o.lr - 2.94030e-5).abs() < 1e-10, "{}", o.lr);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        let mut cfg = RunConfig::desk().optim;
        cfg.weight_decay = 0.0;
        let mut o = AdamW::new(&cfg);
        s.param_mut("b").unwrap().grad = Tensor::from_vec(&[2], vec![2.0, -0.1]);
        o.step(&mut s);
        // bias-corrected first step is lr · g / (|g| + eps)
        let b = s.get("b").unwrap().data();
        assert!((b[0] - (0.5 - cfg.lr)).abs() < 1e-9);
        assert!((b[1] - (0.5 + cfg.lr)).abs() < 1e-8);
        let (m, v) = o.moments("b").unwrap();
        assert!((m[0] - 0.2).abs() < 1e-15 && (v[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store();
        s.param_mut("a").unwrap().grad = Tensor::full(&[3, 2], 0.3);
        let mut o = AdamW::new(&RunConfig::desk().optim);
        o.step(&mut s);
        o.end_epoch();
        o.save(dir.path(), &s).unwrap();
        assert_eq!(AdamW::load(dir.path()).unwrap(), o);
    }
}
