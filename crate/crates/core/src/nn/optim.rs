use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay, matching the PyTorch update order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let decay = T::of(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *p = *p * decay;
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            let denom = v.sqrt() / bc2_sqrt + eps;
            *p = *p - step_size * *m / denom;
        }
    }
}

/// Learning-rate plateau reduction plus the termination rule: stop once the
/// learning rate has reached its floor and validation loss has not improved
/// for `stop_patience` epochs (or `max_epochs` is hit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
}

impl ScheduleConfig {
    pub fn cvae() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 1e-6,
            factor: 0.2,
            plateau_patience: 50,
            stop_patience: 50,
            max_epochs: 100_000,
        }
    }

    pub fn heads() -> Self {
        Self {
            lr: 3e-3,
            min_lr: 1e-6,
            factor: 0.2,
            plateau_patience: 500,
            stop_patience: 1000,
            max_epochs: 1_000_000,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::cvae()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    pub improved: bool,
    pub stop: bool,
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub config: ScheduleConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
    since_best: usize,
    epochs: usize,
}

impl Schedule {
    /// Relative improvement threshold, as in PyTorch's `ReduceLROnPlateau`.
    const THRESHOLD: f64 = 1e-4;

    pub fn new(config: ScheduleConfig) -> Self {
        Self {
            config,
            lr: config.lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            since_best: 0,
            epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss. The returned learning rate
    /// applies to the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> EpochOutcome {
        self.epochs += 1;
        let improved = val_loss < self.best * (1.0 - Self::THRESHOLD)
            || (self.best.is_infinite() && val_loss.is_finite());
        if improved {
            self.best = val_loss;
            self.bad_epochs = 0;
            self.since_best = 0;
        } else {
            self.bad_epochs += 1;
            self.since_best += 1;
            if self.bad_epochs > self.config.plateau_patience {
                let next = (self.lr * self.config.factor).max(self.config.min_lr);
                if self.lr - next > 1e-12 {
                    self.lr = next;
                }
                self.bad_epochs = 0;
            }
        }
        let at_floor = self.lr <= self.config.min_lr * (1.0 + 1e-9);
        let stop = (at_floor && self.since_best >= self.config.stop_patience)
            || self.epochs >= self.config.max_epochs;
        EpochOutcome { improved, stop }
    }
}
