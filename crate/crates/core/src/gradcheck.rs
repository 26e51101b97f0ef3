//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::DType;

#[derive(Debug, Clone)]
pub struct FiniteDiffConfig {
    pub h: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Negative-control hook: perturbs every analytic gradient before
    /// comparison so that a working checker must report failure.
    pub corrupt_analytic: bool,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        FiniteDiffConfig {
            h: 1e-5,
            coords_per_param: 12,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

impl FiniteDiffReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of `f` with central differences, returning
/// the largest `|analytic - numeric| / max(1, |numeric|)` over sampled
/// coordinates. `f` must be deterministic: any sampling inside it has to be
/// driven by a fixed seed.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    cfg: &FiniteDiffConfig,
    f: F,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if let Some((name, _)) = store.iter().find(|(_, p)| p.value.dtype() != DType::Real64) {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("parameter `{name}` is not real64"),
        ));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(Error::invalid(
                "finite_diff_check",
                "objective is not scalar",
            ));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut work = store.clone();
    work.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &work)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite("objective at base point".into()));
        }
        tape.backward(loss, &mut work)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = work
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::new();
    let mut coords_checked = 0;
    let mut worst = 0.0f64;
    for (name, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut param_worst = 0.0f64;
        for i in coords {
            let base = work.get(&name)?.data()[i];
            work.param_mut(&name)?.value.data_mut()[i] = base + cfg.h;
            let plus = eval(&work)?;
            work.param_mut(&name)?.value.data_mut()[i] = base - cfg.h;
            let minus = eval(&work)?;
            work.param_mut(&name)?.value.data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let mut a = grad[i];
            if cfg.corrupt_analytic {
                a = a * 1.5 + 0.1;
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            param_worst = param_worst.max(rel);
            coords_checked += 1;
        }
        worst = worst.max(param_worst);
        per_param.push((name, param_worst));
    }
    Ok(FiniteDiffReport {
        max_rel_error: worst,
        per_param,
        coords_checked,
    })
}
