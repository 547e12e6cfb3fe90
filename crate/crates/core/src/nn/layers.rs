//! Parameterised layers. Each layer only stores [`ParamId`]s; values live in
//! the owning network's [`ParamStore`].

use alloc::format;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::NnError;
use crate::rng::{self, SeededRng};

fn normal_values(rng: &mut SeededRng, n: usize, std: f64) -> alloc::vec::Vec<f64> {
    (0..n).map(|_| std * rng::standard_normal(rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut SeededRng) -> Self {
        let std = libm::sqrt(2.0 / (cin * k * k) as f64);
        let weight = store.add(&format!("{name}.weight"), &[cout, cin, k, k], normal_values(rng, cout * cin * k * k, std));
        let bias = store.add(&format!("{name}.bias"), &[cout], alloc::vec![0.0; cout]);
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var, NnError> {
        let w = tape.param(store, self.weight, trainable);
        let b = tape.param(store, self.bias, trainable);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut SeededRng) -> Self {
        // Each output receives about cin * k^2 / stride^2 contributions.
        let fan_in = ((cin * k * k) / (stride * stride)).max(1);
        let std = libm::sqrt(2.0 / fan_in as f64);
        let weight = store.add(&format!("{name}.weight"), &[cin, cout, k, k], normal_values(rng, cin * cout * k * k, std));
        let bias = store.add(&format!("{name}.bias"), &[cout], alloc::vec![0.0; cout]);
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var, NnError> {
        let w = tape.param(store, self.weight, trainable);
        let b = tape.param(store, self.bias, trainable);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut SeededRng) -> Self {
        let std = libm::sqrt(1.0 / din as f64);
        let weight = store.add(&format!("{name}.weight"), &[dout, din], normal_values(rng, dout * din, std));
        let bias = store.add(&format!("{name}.bias"), &[dout], alloc::vec![0.0; dout]);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var, NnError> {
        let w = tape.param(store, self.weight, trainable);
        let b = tape.param(store, self.bias, trainable);
        tape.linear(x, w, b)
    }
}
