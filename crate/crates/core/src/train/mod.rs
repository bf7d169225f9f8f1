//! Optimisation, gradient verification and persistence.

pub mod adam;
pub mod checkpoint;
mod extended;
pub mod gradcheck;
pub mod trainer;

pub use adam::{adam_step, adam_update, lr_schedule, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, grad_check, gradcheck_instance, relative_error, GradCheckReport, TensorCheck};
pub use trainer::{
    accuracy, evaluate, sample_seed, train_loop, write_metrics, MetricsRow, TrainOutcome,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    /// 0-based iteration from which `lr_after` applies.
    pub lr_switch_iter: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_iters: u64,
    pub seed: u64,
    /// A metrics row is logged every this many iterations (and after the last).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_initial: 1e-4,
            lr_after: 1e-5,
            lr_switch_iter: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_iters: 500,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_initial", self.lr_initial), ("lr_after", self.lr_after)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config(format!(
                "adam_eps must be a positive number, got {}",
                self.adam_eps
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_initial: 0.0, ..Default::default() },
            TrainConfig { lr_after: f64::NAN, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: -0.1, ..Default::default() },
            TrainConfig { adam_eps: 0.0, ..Default::default() },
            TrainConfig { eval_every: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
