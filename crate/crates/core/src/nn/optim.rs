//! First-order parameter updates.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent, no momentum.
    Sgd,
    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "adam" => Some(Self::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies the gradients that belong to `store`; others are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f64>>) {
        self.steps += 1;
        let t = self.steps as f64;
        let group = store.group();
        for (&id, g) in grads.iter().filter(|(id, _)| id.group == group) {
            let values = store.values_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gi) in values.iter_mut().zip(g) {
                        *p -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - libm::pow(BETA1, t);
                    let c2 = 1.0 - libm::pow(BETA2, t);
                    for i in 0..g.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        values[i] -= self.lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + ADAM_EPS);
                    }
                }
            }
        }
    }
}
