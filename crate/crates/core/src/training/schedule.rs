//! Learning-rate schedules.
//!
//! A schedule is a pure function of the epoch, the base learning rate, the
//! epoch budget and the monitored metric of every completed epoch. Stateful
//! schedules (plateau) replay the metric history, so the same inputs always
//! give the same rate.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Every schedule kind, in the order used for categorical sampling.
pub const SCHEDULER_KINDS: [&str; 7] = [
    "constant",
    "step",
    "linear",
    "cosine-annealing",
    "exp-mod20",
    "plateau",
    "cosine-warm-restarts",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSpec {
    pub kind: String,
    /// step: epochs between decays.
    pub step_size: usize,
    /// step: decay factor.
    pub gamma: f64,
    /// cosine-annealing: floor of the rate.
    pub eta_min: f64,
    /// exp-mod20: rate at the start of each cycle (independent of the base rate).
    pub cycle_initial: f64,
    pub cycle_period: usize,
    pub cycle_factor: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub plateau_min_lr: f64,
    pub plateau_eps: f64,
    /// cosine-warm-restarts: epochs until the first restart.
    pub restart_period: usize,
    pub restart_mult: usize,
    pub restart_eta_min: f64,
}

impl Default for SchedulerSpec {
    fn default() -> Self {
        SchedulerSpec {
            kind: "constant".into(),
            step_size: 5,
            gamma: 0.5,
            eta_min: 0.0,
            cycle_initial: 0.001,
            cycle_period: 20,
            cycle_factor: 0.5,
            plateau_factor: 0.05,
            plateau_patience: 2,
            plateau_threshold: 1e-4,
            plateau_min_lr: 0.0,
            plateau_eps: 1e-8,
            restart_period: 12,
            restart_mult: 1,
            restart_eta_min: 5e-5,
        }
    }
}

impl SchedulerSpec {
    pub fn of_kind(kind: &str) -> Self {
        SchedulerSpec {
            kind: kind.to_string(),
            ..SchedulerSpec::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScheduleContext<'a> {
    pub epoch: usize,
    pub base_lr: f64,
    pub total_epochs: usize,
    /// Monitored metric (lower is better) of each completed epoch.
    pub metrics: &'a [f64],
}

pub trait LrSchedule: Send + Sync {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64;
}

struct Constant;
impl LrSchedule for Constant {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        ctx.base_lr
    }
}

struct Step {
    step_size: usize,
    gamma: f64,
}
impl LrSchedule for Step {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        ctx.base_lr * self.gamma.powi((ctx.epoch / self.step_size) as i32)
    }
}

/// Linear decay from the base rate towards 0 at the end of the budget.
struct Linear;
impl LrSchedule for Linear {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        let total = ctx.total_epochs.max(1) as f64;
        ctx.base_lr * (1.0 - ctx.epoch as f64 / total)
    }
}

struct CosineAnnealing {
    eta_min: f64,
}
impl LrSchedule for CosineAnnealing {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        let t = ctx.epoch as f64 / ctx.total_epochs.max(1) as f64;
        self.eta_min + (ctx.base_lr - self.eta_min) * (1.0 + (PI * t).cos()) / 2.0
    }
}

/// `initial * factor^(epoch % period)`.
struct ExpCycle {
    initial: f64,
    period: usize,
    factor: f64,
}
impl LrSchedule for ExpCycle {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        self.initial * self.factor.powi((ctx.epoch % self.period) as i32)
    }
}

/// Reduce-on-plateau in "min" mode with a relative threshold.
struct Plateau {
    factor: f64,
    patience: usize,
    threshold: f64,
    min_lr: f64,
    eps: f64,
}
impl LrSchedule for Plateau {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        let mut lr = ctx.base_lr;
        let mut best = f64::INFINITY;
        let mut bad = 0;
        for &m in ctx.metrics.iter().take(ctx.epoch) {
            if m < best * (1.0 - self.threshold) {
                best = m;
                bad = 0;
            } else {
                bad += 1;
            }
            if bad > self.patience {
                let next = (lr * self.factor).max(self.min_lr);
                if lr - next > self.eps {
                    lr = next;
                }
                bad = 0;
            }
        }
        lr
    }
}

struct WarmRestarts {
    period: usize,
    mult: usize,
    eta_min: f64,
}
impl LrSchedule for WarmRestarts {
    fn lr(&self, ctx: &ScheduleContext<'_>) -> f64 {
        let mut t_cur = ctx.epoch;
        let mut t_i = self.period;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.mult;
        }
        let frac = t_cur as f64 / t_i as f64;
        self.eta_min + (ctx.base_lr - self.eta_min) * (1.0 + (PI * frac).cos()) / 2.0
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("scheduler {name} must be positive, got {v}")))
    }
}

pub type ScheduleRegistry = Registry<dyn LrSchedule, SchedulerSpec>;

/// Registry with every built-in schedule.
pub fn default_schedules() -> ScheduleRegistry {
    let mut r = ScheduleRegistry::new("scheduler");
    r.register("constant", |_| Ok(Box::new(Constant)));
    r.register("step", |s| {
        if s.step_size == 0 {
            return Err(Error::Contract("step scheduler needs step_size >= 1".into()));
        }
        positive("gamma", s.gamma)?;
        Ok(Box::new(Step {
            step_size: s.step_size,
            gamma: s.gamma,
        }))
    });
    r.register("linear", |_| Ok(Box::new(Linear)));
    r.register("cosine-annealing", |s| Ok(Box::new(CosineAnnealing { eta_min: s.eta_min })));
    r.register("exp-mod20", |s| {
        positive("cycle_initial", s.cycle_initial)?;
        positive("cycle_factor", s.cycle_factor)?;
        if s.cycle_period == 0 {
            return Err(Error::Contract("exp-mod20 needs cycle_period >= 1".into()));
        }
        Ok(Box::new(ExpCycle {
            initial: s.cycle_initial,
            period: s.cycle_period,
            factor: s.cycle_factor,
        }))
    });
    r.register("plateau", |s| {
        positive("plateau_factor", s.plateau_factor)?;
        Ok(Box::new(Plateau {
            factor: s.plateau_factor,
            patience: s.plateau_patience,
            threshold: s.plateau_threshold,
            min_lr: s.plateau_min_lr,
            eps: s.plateau_eps,
        }))
    });
    r.register("cosine-warm-restarts", |s| {
        if s.restart_period == 0 || s.restart_mult == 0 {
            return Err(Error::Contract("warm restarts need period and mult >= 1".into()));
        }
        positive("restart_eta_min", s.restart_eta_min)?;
        Ok(Box::new(WarmRestarts {
            period: s.restart_period,
            mult: s.restart_mult,
            eta_min: s.restart_eta_min,
        }))
    });
    r
}

fn shared() -> &'static ScheduleRegistry {
    static REG: OnceLock<ScheduleRegistry> = OnceLock::new();
    REG.get_or_init(default_schedules)
}

pub fn build_schedule(spec: &SchedulerSpec) -> Result<Box<dyn LrSchedule>> {
    shared().build(&spec.kind, spec)
}

/// Learning rate of `spec` at `ctx`.
pub fn scheduler_lr(spec: &SchedulerSpec, ctx: &ScheduleContext<'_>) -> Result<f64> {
    Ok(build_schedule(spec)?.lr(ctx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr(kind: &str, epoch: usize, base: f64, total: usize, metrics: &[f64]) -> f64 {
        scheduler_lr(
            &SchedulerSpec::of_kind(kind),
            &ScheduleContext {
                epoch,
                base_lr: base,
                total_epochs: total,
                metrics,
            },
        )
        .unwrap()
    }

    #[test]
    fn exp_mod20_cycles() {
        assert_eq!(lr("exp-mod20", 0, 0.1, 100, &[]), 0.001);
        assert_eq!(lr("exp-mod20", 19, 0.1, 100, &[]), 0.001 * 0.5f64.powi(19));
        assert_eq!(lr("exp-mod20", 20, 0.1, 100, &[]), 0.001);
    }

    #[test]
    fn constant_ignores_epoch() {
        for e in [0, 7, 99] {
            assert_eq!(lr("constant", e, 0.03, 100, &[]), 0.03);
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(lr("step", 4, 1.0, 20, &[]), 1.0);
        assert_eq!(lr("step", 5, 1.0, 20, &[]), 0.5);
        assert_eq!(lr("step", 12, 1.0, 20, &[]), 0.25);
        assert_eq!(lr("linear", 0, 0.2, 10, &[]), 0.2);
        assert!((lr("linear", 9, 0.2, 10, &[]) - 0.02).abs() < 1e-15);
        assert_eq!(lr("cosine-annealing", 0, 0.1, 10, &[]), 0.1);
        assert!((lr("cosine-annealing", 5, 0.1, 10, &[]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn warm_restarts_reset_every_period() {
        let base = 0.01;
        let at0 = lr("cosine-warm-restarts", 0, base, 50, &[]);
        assert_eq!(at0, base);
        assert_eq!(lr("cosine-warm-restarts", 12, base, 50, &[]), base);
        assert_eq!(lr("cosine-warm-restarts", 24, base, 50, &[]), base);
        let mid = lr("cosine-warm-restarts", 6, base, 50, &[]);
        assert!((mid - (5e-5 + (base - 5e-5) * 0.5)).abs() < 1e-15);
        let mut spec = SchedulerSpec::of_kind("cosine-warm-restarts");
        spec.restart_mult = 2;
        let ctx = |epoch| ScheduleContext {
            epoch,
            base_lr: base,
            total_epochs: 100,
            metrics: &[],
        };
        // periods 12, 24, 48: restarts at 12 and 36
        assert_eq!(scheduler_lr(&spec, &ctx(12)).unwrap(), base);
        assert_eq!(scheduler_lr(&spec, &ctx(36)).unwrap(), base);
        assert!(scheduler_lr(&spec, &ctx(24)).unwrap() < base);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        // improvement, then three epochs without relative improvement of 1e-4
        let metrics = [1.0, 0.9, 0.9, 0.89995, 0.9, 0.5, 0.6, 0.6, 0.6];
        let rates: Vec<f64> = (0..=metrics.len()).map(|e| lr("plateau", e, 0.1, 20, &metrics)).collect();
        assert_eq!(&rates[..5], &[0.1; 5]);
        assert!((rates[5] - 0.005).abs() < 1e-15);
        assert!((rates[8] - 0.005).abs() < 1e-15);
        assert!((rates[9] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let spec = SchedulerSpec::of_kind("triangular");
        assert!(matches!(build_schedule(&spec), Err(Error::Unknown { .. })));
    }

    #[test]
    fn every_kind_emits_positive_rates() {
        let metrics: Vec<f64> = (0..40).map(|i| 1.0 + (i % 3) as f64).collect();
        for kind in SCHEDULER_KINDS {
            for e in 0..40 {
                let v = lr(kind, e, 0.05, 40, &metrics);
                assert!(v > 0.0 && v.is_finite(), "{kind} at {e}: {v}");
            }
        }
    }
}
