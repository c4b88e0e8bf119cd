//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Learning rate of epoch `e` (from 0) is `lr * 2^-e`.
    HalvePerEpoch,
}

impl Schedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::HalvePerEpoch => base * 0.5f64.powi(epoch as i32),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
        }
    }

    /// One descent step on a loss with gradient `grad`. Coordinates with
    /// `frozen[i]` set are left untouched, moments included.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64], lr: f64, frozen: Option<&[bool]>) {
        let skip = |i: usize| frozen.is_some_and(|f| f[i]);
        match self {
            Optimizer::Sgd => {
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    if !skip(i) {
                        *p -= lr * g;
                    }
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for i in 0..params.len() {
                    if skip(i) {
                        continue;
                    }
                    let g = grad[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + ADAM_EPSILON);
                }
            }
        }
    }
}
