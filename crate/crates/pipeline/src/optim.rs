//! First-order optimizers over a [`ParamSet`].

use hfalign_core::config::{OptimizerConfig, OptimizerKind};

use crate::params::ParamSet;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: Rule,
    decay: f64,
}

#[derive(Debug, Clone)]
enum Rule {
    /// Gradient descent with heavy-ball momentum (`momentum = 0` is plain GD).
    Sgd { lr: f64, momentum: f64, clip: f64, velocity: Option<ParamSet> },
    Adam { lr: f64, clip: f64, t: u64, m: Option<ParamSet>, v: Option<ParamSet> },
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        let rule = match cfg.kind {
            OptimizerKind::Sgd => Rule::Sgd {
                lr: cfg.learning_rate,
                momentum: cfg.momentum,
                clip: cfg.clip_norm,
                velocity: None,
            },
            OptimizerKind::Adam => Rule::Adam { lr: cfg.learning_rate, clip: cfg.clip_norm, t: 0, m: None, v: None },
        };
        Self { rule, decay: cfg.weight_decay }
    }

    /// Applies one descent step. `grad` is the gradient of the loss being
    /// minimized and may be rescaled in place by clipping.
    pub fn step(&mut self, params: &mut ParamSet, grad: &mut ParamSet) {
        let (clip, lr) = match &self.rule {
            Rule::Sgd { clip, lr, .. } | Rule::Adam { clip, lr, .. } => (*clip, *lr),
        };
        if self.decay > 0.0 {
            for t in params.tensors.iter_mut().filter(|t| !t.name.ends_with("bias")) {
                t.data.iter_mut().for_each(|v| *v -= lr * self.decay * *v);
            }
        }
        if clip > 0.0 {
            let n = grad.norm();
            if n > clip {
                grad.scale(clip / n);
            }
        }
        match &mut self.rule {
            Rule::Sgd { lr, momentum, velocity, .. } => {
                if *momentum == 0.0 {
                    params.add_scaled(-*lr, grad);
                    return;
                }
                let vel = velocity.get_or_insert_with(|| params.zeros_like());
                vel.scale(*momentum);
                vel.add_scaled(1.0, grad);
                params.add_scaled(-*lr, vel);
            }
            Rule::Adam { lr, t, m, v, .. } => {
                *t += 1;
                let m = m.get_or_insert_with(|| params.zeros_like());
                let v = v.get_or_insert_with(|| params.zeros_like());
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for (((p, g), mt), vt) in params
                    .tensors
                    .iter_mut()
                    .zip(&grad.tensors)
                    .zip(m.tensors.iter_mut())
                    .zip(v.tensors.iter_mut())
                {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        mt.data[i] = ADAM_BETA1 * mt.data[i] + (1.0 - ADAM_BETA1) * gi;
                        vt.data[i] = ADAM_BETA2 * vt.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = mt.data[i] / bc1;
                        let vhat = vt.data[i] / bc2;
                        p.data[i] -= *lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
