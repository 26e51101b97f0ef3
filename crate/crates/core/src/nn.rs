//! Parameterized layers built from tape primitives. Each layer reads its
//! tensors from a [`ParamStore`] under a dotted prefix.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear(store: &mut ParamStore, prefix: &str, din: usize, dout: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[din, dout], din);
    store.init_uniform(&format!("{prefix}.b"), &[dout], din);
}

pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, din: usize, dout: usize) {
    store.init_const(&format!("{prefix}.w"), &[din, dout], 0.0);
    store.init_const(&format!("{prefix}.b"), &[dout], 0.0);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.init_const(&format!("{prefix}.g"), &[dim], 1.0);
    store.init_const(&format!("{prefix}.b"), &[dim], 0.0);
}

/// Kernel `[cout, cin, k, k]` plus bias `[cout]`.
pub fn init_conv(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k;
    store.init_uniform(&format!("{prefix}.k"), &[cout, cin, k, k], fan_in);
    store.init_uniform(&format!("{prefix}.b"), &[cout], fan_in);
}

pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.linear(x, w, b)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_normalize(x, g, b, LN_EPS)
}

/// Adds a per-channel bias `[C]` to a map `[C, H, W]`.
pub fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = tape.shape(bias)[0];
    let b = tape.reshape(bias, &[c, 1, 1])?;
    let b = tape.broadcast_to(b, &shape)?;
    tape.add(x, b)
}

/// Same-size convolution (`pad = k / 2`) with bias.
pub fn conv(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let k = tape.param(store, &format!("{prefix}.k"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let pad = tape.shape(k)[2] / 2;
    let y = tape.conv2d(x, k, 1, pad)?;
    add_channel_bias(tape, y, b)
}

/// Broadcasts a row `[C]` over `[N, C]`.
pub fn add_row(tape: &mut Tape, x: Var, row: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = tape.broadcast_to(row, &shape)?;
    tape.add(x, r)
}

/// Identity 1x1 kernel `[c, c, 1, 1]`.
pub fn identity_kernel(c: usize) -> Tensor {
    let mut k = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        k.set(&[i, i, 0, 0], 1.0);
    }
    k
}
