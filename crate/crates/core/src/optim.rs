//! RMSprop and the step learning-rate schedule with loss warm-up.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::loss::LossSelector;
use crate::network::{Bound, Parameters};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    /// Epochs trained with L2 at every scale before the hybrid loss.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_epochs: vec![2, 4, 6, 9, 12],
            decay_factor: 0.5,
            epochs: 15,
            warmup_epochs: 4,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!(self.decay_factor > 0.0, "decay_factor must be positive");
        ensure!(
            self.decay_epochs.windows(2).all(|w| w[0] < w[1]),
            "decay_epochs must be strictly increasing: {:?}",
            self.decay_epochs
        );
        ensure!(self.warmup_epochs < self.epochs, "warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs);
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        Ok(())
    }
}

/// `initial · factor^(number of decay epochs ≤ epoch)`.
pub fn lr_at_epoch(schedule: &TrainSchedule, epoch: usize) -> f64 {
    let decays = schedule.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    schedule.learning_rate * schedule.decay_factor.powi(decays as i32)
}

/// All-L2 during warm-up, hybrid afterwards.
pub fn loss_for_epoch(epoch: usize, schedule: &TrainSchedule) -> LossSelector {
    if epoch < schedule.warmup_epochs {
        LossSelector::AllL2
    } else {
        LossSelector::Hybrid
    }
}

/// Gradients collected after a backward pass, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real> {
    grads: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self { grads: None }
    }

    /// Reads d(loss)/d(param) for every bound parameter.
    pub fn collect(tape: &Tape<T>, bound: &Bound<'_, T>) -> Self {
        let grads = bound.vars().iter().map(|&v| tape.grad(v).expect("bound parameters require grad")).collect();
        Self { grads: Some(grads) }
    }

    pub fn from_tensors(grads: Vec<Tensor<T>>) -> Self {
        Self { grads: Some(grads) }
    }

    pub fn is_populated(&self) -> bool {
        self.grads.is_some()
    }

    pub fn tensors(&self) -> Option<&[Tensor<T>]> {
        self.grads.as_deref()
    }

    /// Euclidean norm over all gradients, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// RMSprop state: one running mean of squared gradients per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T: Real> {
    pub alpha: f64,
    pub eps: f64,
    pub lr: f64,
    mean_sq: Vec<Tensor<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(params: &Parameters<T>, lr: f64) -> Self {
        Self {
            alpha: 0.9,
            eps: 1e-8,
            lr,
            mean_sq: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_state(alpha: f64, eps: f64, lr: f64, mean_sq: Vec<Tensor<T>>) -> Result<Self> {
        ensure!((0.0..1.0).contains(&alpha) && eps > 0.0, "invalid RMSprop constants");
        ensure!(mean_sq.iter().all(|t| t.data().iter().all(|&v| v >= T::zero())), "running averages must be non-negative");
        Ok(Self { alpha, eps, lr, mean_sq })
    }

    pub fn mean_sq(&self) -> &[Tensor<T>] {
        &self.mean_sq
    }

    /// `v ← α·v + (1−α)·g²; p ← p − lr·g / (sqrt(v) + eps)`, then clears `grads`.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &mut Gradients<T>) -> Result<()> {
        let Some(g) = grads.grads.take() else {
            return Err(crate::error::contract("optimizer step without gradients (call backward first)"));
        };
        ensure!(
            g.len() == params.len() && self.mean_sq.len() == params.len(),
            "optimizer state does not match the parameter set"
        );
        let (alpha, eps, lr) = (T::lit(self.alpha), T::lit(self.eps), T::lit(self.lr));
        let one = T::one();
        for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut self.mean_sq).zip(&g) {
            ensure!(p.shape() == g.shape(), "gradient shape {:?} != parameter shape {:?}", g.shape(), p.shape());
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = alpha * *vv + (one - alpha) * gv * gv;
                *pv -= lr * gv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
