//! AdamW with decoupled weight decay and the two learning-rate schedules the
//! training stages use.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` every `period` steps.
    StepDecay {
        period: usize,
        factor: f64,
    },
    /// Linear ramp from zero over `steps`, then constant.
    Warmup {
        steps: usize,
    },
}

impl Schedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::StepDecay { period, factor } => base * factor.powi((step / period.max(1)) as i32),
            Schedule::Warmup { steps } => {
                if steps == 0 || step >= steps {
                    base
                } else {
                    base * (step + 1) as f64 / steps as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    step: usize,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, schedule: Schedule) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.lr, self.step)
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &mut Grads) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.param(id).trainable {
                continue;
            }
            let Some(g) = grads.take(bound[id]) else {
                continue;
            };
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut *m)
                .and(&g)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v)
                .and(&g)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = store.get_mut(id);
            let decay = 1.0 - lr * self.weight_decay;
            let eps = self.eps;
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p * decay - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
