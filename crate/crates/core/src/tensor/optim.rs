use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimKind::SgdMomentum { momentum }
    }
}

/// Step decay: `base_lr * decay^floor(epoch / step_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub decay: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, step_size: usize, decay: f64) -> Result<Self> {
        if step_size == 0 {
            return Err(Error::Config("lr schedule step_size must be positive".into()));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Config(format!("lr decay {decay} outside (0, 1]")));
        }
        Ok(Self { base_lr, step_size, decay })
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            step_size: usize::MAX,
            decay: 1.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.step_size) as i32;
        if steps == 0 {
            return self.base_lr;
        }
        // Dividing by an integral reciprocal keeps 1e-4 -> 1e-5 -> 1e-6
        // bit-exact, which repeated multiplication by 0.1 does not.
        let inverse = 1.0 / self.decay;
        if inverse == inverse.round() {
            self.base_lr / inverse.powi(steps)
        } else {
            self.base_lr * self.decay.powi(steps)
        }
    }
}

/// SGD with momentum or Adam over a fixed, registered parameter set.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    step_count: u64,
    params: Vec<Tensor>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, params: Vec<Tensor>) -> Self {
        let first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = match kind {
            OptimKind::Adam { .. } => params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            OptimKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            step_count: 0,
            params,
            first,
            second,
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// Applies one update from the current gradients. Fails without touching
    /// anything if any registered parameter has no gradient.
    pub fn step(&mut self) -> Result<()> {
        let grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad().ok_or_else(|| {
                    Error::Usage(format!("optimizer step: parameter {i} (shape {:?}) has no gradient", p.shape()))
                })
            })
            .collect::<Result<_>>()?;

        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimKind::SgdMomentum { momentum } => {
                for ((p, g), v) in self.params.iter().zip(&grads).zip(&mut self.first) {
                    p.with_data_mut(|w| {
                        for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                            *v = momentum * *v + g;
                            *w -= lr * *v;
                        }
                    });
                }
            }
            OptimKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in self.params.iter().zip(&grads).zip(&mut self.first).zip(&mut self.second) {
                    p.with_data_mut(|w| {
                        for (((w, g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
