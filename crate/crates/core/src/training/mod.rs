//! Loss, optimizers, learning-rate schedules and the training loops.

mod fit;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{evaluate, fine_tune, fit, gradient_flow, pretrain, Evaluation, GradientFlow};
pub use optim::{build_optimizer, Optimizer, OptimizerSpec, OPTIMIZER_KINDS};
pub use schedule::{build_schedule, scheduler_lr, LrSchedule, ScheduleContext, SchedulerSpec, SCHEDULER_KINDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: SchedulerSpec,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Plain SGD at 0.1 with a constant rate.
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.1,
            scheduler: SchedulerSpec::default(),
            optimizer: OptimizerSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Contract("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        build_schedule(&self.scheduler)?;
        build_optimizer(&self.optimizer)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
    /// Squared gradient norm over all trainable parameters on the probe batch.
    pub grad_flow: f64,
    /// Squared gradient norm of each activated layer's weight and bias.
    pub layer_grad_flow: Vec<f64>,
}

/// Per-epoch training records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    /// Names of the layers in `layer_grad_flow`, in order.
    pub layers: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl FitHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,train_acc,val_acc,lr,grad_flow`, one row per epoch.
    /// Missing validation accuracy is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc,lr,grad_flow\n");
        for r in &self.records {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, val, r.lr, r.grad_flow
            );
        }
        out
    }

    /// `epoch,<layer>...,global` gradient-flow table.
    pub fn grad_flow_csv(&self) -> String {
        let mut out = String::from("epoch");
        for name in &self.layers {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",global\n");
        for r in &self.records {
            let _ = write!(out, "{}", r.epoch);
            for v in &r.layer_grad_flow {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", r.grad_flow);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
