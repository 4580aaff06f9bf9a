//! First-order optimizers over flat parameter slots.
//!
//! A training step calls [`Optimizer::begin_step`] once and then
//! [`Optimizer::update`] for every parameter slot, always in the same order.
//! Slot state (momentum buffers, moments) is allocated on first use.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

pub const OPTIMIZER_KINDS: [&str; 3] = ["sgd", "sgd-momentum", "adam"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: String,
    /// sgd-momentum only.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient of decayed slots. `None` picks the
    /// kind's default: 5e-4 for sgd-momentum, 0 otherwise.
    pub weight_decay: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: "sgd".into(),
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: None,
        }
    }
}

impl OptimizerSpec {
    pub fn of_kind(kind: &str) -> Self {
        OptimizerSpec {
            kind: kind.to_string(),
            ..OptimizerSpec::default()
        }
    }

    pub fn effective_weight_decay(&self) -> f64 {
        self.weight_decay
            .unwrap_or(if self.kind == "sgd-momentum" { 5e-4 } else { 0.0 })
    }

    fn validate(&self) -> Result<()> {
        let wd = self.effective_weight_decay();
        let checks = [
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0 && self.eps.is_finite()),
            ("weight_decay", wd >= 0.0 && wd.is_finite()),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::Contract(format!("optimizer {name} out of range in {self:?}"))),
            None => Ok(()),
        }
    }
}

pub trait Optimizer: Send {
    /// Marks the start of one optimization step.
    fn begin_step(&mut self) {}

    /// Updates `params` in place from `grads`. `decay` enables weight decay
    /// for this slot.
    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool);
}

fn slot_buffer(buffers: &mut Vec<Vec<f64>>, slot: usize, len: usize) -> &mut Vec<f64> {
    if buffers.len() <= slot {
        buffers.resize_with(slot + 1, Vec::new);
    }
    let buf = &mut buffers[slot];
    if buf.len() != len {
        *buf = vec![0.0; len];
    }
    buf
}

struct Sgd {
    weight_decay: f64,
}

impl Optimizer for Sgd {
    fn update(&mut self, _slot: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        for (p, &g) in params.iter_mut().zip(grads) {
            *p -= lr * (g + wd * *p);
        }
    }
}

struct Momentum {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
    started: Vec<bool>,
}

impl Optimizer for Momentum {
    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        if self.started.len() <= slot {
            self.started.resize(slot + 1, false);
        }
        let first = !self.started[slot];
        self.started[slot] = true;
        let mu = self.momentum;
        let buf = slot_buffer(&mut self.buffers, slot, params.len());
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
            let d = g + wd * *p;
            *v = if first { d } else { mu * *v + d };
            *p -= lr * *v;
        }
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer for Adam {
    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        let t = self.t.max(1);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        slot_buffer(&mut self.first, slot, params.len());
        slot_buffer(&mut self.second, slot, params.len());
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i] + wd * *p;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

pub type OptimizerRegistry = Registry<dyn Optimizer, OptimizerSpec>;

/// Registry with every built-in optimizer.
pub fn default_optimizers() -> OptimizerRegistry {
    let mut r = OptimizerRegistry::new("optimizer");
    r.register("sgd", |s| {
        s.validate()?;
        Ok(Box::new(Sgd {
            weight_decay: s.effective_weight_decay(),
        }))
    });
    r.register("sgd-momentum", |s| {
        s.validate()?;
        Ok(Box::new(Momentum {
            momentum: s.momentum,
            weight_decay: s.effective_weight_decay(),
            buffers: Vec::new(),
            started: Vec::new(),
        }))
    });
    r.register("adam", |s| {
        s.validate()?;
        Ok(Box::new(Adam {
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.effective_weight_decay(),
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }))
    });
    r
}

fn shared() -> &'static OptimizerRegistry {
    static REG: OnceLock<OptimizerRegistry> = OnceLock::new();
    REG.get_or_init(default_optimizers)
}

pub fn build_optimizer(spec: &OptimizerSpec) -> Result<Box<dyn Optimizer>> {
    shared().build(&spec.kind, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_exact() {
        let mut opt = build_optimizer(&OptimizerSpec::of_kind("sgd")).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, -0.1, 0.0];
        opt.begin_step();
        opt.update(0, &mut p, &g, 0.1, true);
        assert_eq!(p, vec![1.0 - 0.1 * 0.3, -2.0 + 0.1 * 0.1, 0.5]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut spec = OptimizerSpec::of_kind("sgd-momentum");
        spec.weight_decay = Some(0.0);
        let mut opt = build_optimizer(&spec).unwrap();
        let mut p = vec![0.0];
        for _ in 0..2 {
            opt.begin_step();
            opt.update(0, &mut p, &[1.0], 1.0, true);
        }
        // v1 = 1, v2 = 0.9 + 1
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn decay_only_on_flagged_slots() {
        let mut opt = build_optimizer(&OptimizerSpec::of_kind("sgd-momentum")).unwrap();
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        opt.begin_step();
        opt.update(0, &mut a, &[0.0], 1.0, true);
        opt.update(1, &mut b, &[0.0], 1.0, false);
        assert!((a[0] - (1.0 - 5e-4)).abs() < 1e-15);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = build_optimizer(&OptimizerSpec::of_kind("adam")).unwrap();
        let mut p = vec![0.0; 4];
        let g = [0.5, -3.0, 1e-2, -7.0];
        opt.begin_step();
        opt.update(0, &mut p, &g, 0.01, true);
        for (x, gi) in p.iter().zip(g) {
            assert!((x + 0.01 * gi.signum()).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn rejects_bad_hyperparameters_and_kinds() {
        let mut spec = OptimizerSpec::of_kind("sgd-momentum");
        spec.momentum = 1.5;
        assert!(build_optimizer(&spec).is_err());
        assert!(matches!(
            build_optimizer(&OptimizerSpec::of_kind("fromage")),
            Err(Error::Unknown { .. })
        ));
    }
}
