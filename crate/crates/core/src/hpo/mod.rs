//! Hyperparameter search over fine-tuning recipes.
//!
//! Each trial fine-tunes the pruned network with trainable activation scales
//! under one sampled (learning rate, scheduler, optimizer) triple and is scored
//! by `1 - validation accuracy`. A [`Minimizer`] proposes the trials.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::activations::UnaryOperatorId;
use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkSnapshot};
use crate::pruning::PruningMask;
use crate::registry::Registry;
use crate::rng::{self, Rng};
use crate::training::{
    evaluate, fine_tune, FitHistory, OptimizerSpec, SchedulerSpec, TrainConfig, OPTIMIZER_KINDS, SCHEDULER_KINDS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigSpace {
    pub lr_min: f64,
    pub lr_max: f64,
    pub schedulers: Vec<String>,
    pub optimizers: Vec<String>,
    /// Configuration evaluated as the first trial, before any proposal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default: Option<TrialConfig>,
}

impl Default for ConfigSpace {
    fn default() -> Self {
        ConfigSpace {
            lr_min: 1e-4,
            lr_max: 1e-1,
            schedulers: SCHEDULER_KINDS.iter().map(|s| s.to_string()).collect(),
            optimizers: OPTIMIZER_KINDS.iter().map(|s| s.to_string()).collect(),
            default: None,
        }
    }
}

impl ConfigSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Contract(format!(
                "learning-rate range [{}, {}] is invalid",
                self.lr_min, self.lr_max
            )));
        }
        if self.schedulers.is_empty() || self.optimizers.is_empty() {
            return Err(Error::Contract("config space needs a scheduler and an optimizer".into()));
        }
        for s in &self.schedulers {
            crate::training::build_schedule(&SchedulerSpec::of_kind(s))?;
        }
        for o in &self.optimizers {
            crate::training::build_optimizer(&OptimizerSpec::of_kind(o))?;
        }
        if let Some(d) = &self.default {
            if !self.contains(d) {
                return Err(Error::Contract(format!("default configuration {d:?} lies outside the space")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, c: &TrialConfig) -> bool {
        (self.lr_min..=self.lr_max).contains(&c.learning_rate)
            && self.schedulers.contains(&c.scheduler)
            && self.optimizers.contains(&c.optimizer)
    }
}

/// One hyperparameter assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub learning_rate: f64,
    pub scheduler: String,
    pub optimizer: String,
}

impl TrialConfig {
    pub fn train_config(&self, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate: self.learning_rate,
            scheduler: SchedulerSpec::of_kind(&self.scheduler),
            optimizer: OptimizerSpec::of_kind(&self.optimizer),
            seed,
        }
    }
}

/// Log-uniform learning rate, uniform categoricals.
pub fn sample(space: &ConfigSpace, rng: &mut Rng) -> TrialConfig {
    let (lo, hi) = (space.lr_min.log10(), space.lr_max.log10());
    let u = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let lr = 10f64.powf(u).clamp(space.lr_min, space.lr_max);
    TrialConfig {
        learning_rate: lr,
        scheduler: space.schedulers[rng.gen_range(0..space.schedulers.len())].clone(),
        optimizer: space.optimizers[rng.gen_range(0..space.optimizers.len())].clone(),
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub index: usize,
    pub config: TrialConfig,
    /// `1 - val_acc`, or 1 when training diverged.
    pub fitness: f64,
    pub val_acc: f64,
    pub diverged: bool,
    /// Learned `(alpha, beta)` per activation slot.
    pub scales: Vec<(f64, f64)>,
    pub wall_seconds: f64,
    pub snapshot: Option<NetworkSnapshot>,
    pub history: Option<FitHistory>,
}

/// Exported form of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lr: f64,
    pub scheduler: String,
    pub optimizer: String,
    pub fitness: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

impl Trial {
    pub fn record(&self) -> TrialRecord {
        TrialRecord {
            trial: self.index,
            lr: self.config.learning_rate,
            scheduler: self.config.scheduler.clone(),
            optimizer: self.config.optimizer.clone(),
            fitness: self.fitness,
            val_acc: self.val_acc,
            wall_seconds: self.wall_seconds,
        }
    }
}

pub fn trials_to_jsonl(trials: &[Trial]) -> Result<String> {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{}", serde_json::to_string(&t.record())?);
    }
    Ok(out)
}

pub fn read_trials_jsonl(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Scores one configuration.
pub trait TrialEvaluator {
    fn evaluate(&mut self, index: usize, config: &TrialConfig) -> Result<Trial>;
}

/// Closures map a configuration straight to a fitness (mock objectives).
impl<F: FnMut(&TrialConfig) -> f64> TrialEvaluator for F {
    fn evaluate(&mut self, index: usize, config: &TrialConfig) -> Result<Trial> {
        let fitness = self(config);
        Ok(Trial {
            index,
            config: config.clone(),
            fitness,
            val_acc: 1.0 - fitness,
            diverged: false,
            scales: Vec::new(),
            wall_seconds: 0.0,
            snapshot: None,
            history: None,
        })
    }
}

/// Seed of the training run of trial `index`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    rng::stream(seed, "trial", index as u64).next_u64()
}

/// Fine-tunes the pruned snapshot with `operators` installed and trainable
/// scales starting from `(1, 1)`.
#[derive(Debug, Clone)]
pub struct FineTuneEvaluator<'a> {
    pub snapshot: &'a NetworkSnapshot,
    pub mask: &'a PruningMask,
    pub operators: &'a [UnaryOperatorId],
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Score by k-fold cross-validation over the positions of `train`
    /// instead of the train/validation split.
    pub folds: Option<&'a FoldPlan>,
}

impl FineTuneEvaluator<'_> {
    fn run_split(&self, cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<Option<(Model, FitHistory, f64)>> {
        match fine_tune(
            self.snapshot,
            self.mask,
            Some(self.operators),
            train,
            Some(val),
            cfg,
            true,
        ) {
            Ok((model, history)) => {
                let acc = history
                    .last()
                    .and_then(|r| r.val_acc)
                    .map_or_else(|| evaluate(&model, val).map(|e| e.accuracy), Ok)?;
                Ok(Some((model, history, acc)))
            }
            Err(Error::Diverged { epoch, loss }) => {
                log::warn!("trial diverged at epoch {epoch} (loss {loss}); fitness set to 1");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

impl TrialEvaluator for FineTuneEvaluator<'_> {
    fn evaluate(&mut self, index: usize, config: &TrialConfig) -> Result<Trial> {
        let start = Instant::now();
        let cfg = config.train_config(self.epochs, self.batch_size, trial_seed(self.seed, index));
        let outcome = match self.folds {
            None => self.run_split(&cfg, self.train, self.validation)?,
            Some(plan) => {
                let mut first = None;
                let mut accs = Vec::with_capacity(plan.k);
                for (f, fold) in plan.folds.iter().enumerate() {
                    let tr = self.train.subset(&fold.train, format!("fold{f}-train"));
                    let va = self.train.subset(&fold.validation, format!("fold{f}-val"));
                    match self.run_split(&cfg, &tr, &va)? {
                        Some((m, h, acc)) => {
                            accs.push(acc);
                            first.get_or_insert((m, h));
                        }
                        None => {
                            accs.clear();
                            break;
                        }
                    }
                }
                match (first, accs.is_empty()) {
                    (Some((m, h)), false) => {
                        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                        Some((m, h, mean))
                    }
                    _ => None,
                }
            }
        };
        let depth = self.operators.len();
        Ok(match outcome {
            Some((model, history, acc)) => Trial {
                index,
                config: config.clone(),
                fitness: 1.0 - acc,
                val_acc: acc,
                diverged: false,
                scales: model.scales(),
                wall_seconds: start.elapsed().as_secs_f64(),
                snapshot: Some(model.snapshot()),
                history: Some(history),
            },
            None => Trial {
                index,
                config: config.clone(),
                fitness: 1.0,
                val_acc: 0.0,
                diverged: true,
                scales: vec![(1.0, 1.0); depth],
                wall_seconds: start.elapsed().as_secs_f64(),
                snapshot: None,
                history: None,
            },
        })
    }
}

/// Proposes the next configuration given the trials so far.
pub trait Minimizer: Send {
    fn propose(&mut self, space: &ConfigSpace, trials: &[Trial], rng: &mut Rng) -> TrialConfig;
}

/// Independent samples from the space.
#[derive(Debug, Clone, Default)]
pub struct RandomMinimizer;

impl Minimizer for RandomMinimizer {
    fn propose(&mut self, space: &ConfigSpace, _trials: &[Trial], rng: &mut Rng) -> TrialConfig {
        sample(space, rng)
    }
}

pub type MinimizerRegistry = Registry<dyn Minimizer, ConfigSpace>;

pub fn default_minimizers() -> MinimizerRegistry {
    let mut r = MinimizerRegistry::new("minimizer");
    r.register("random", |_| Ok(Box::new(RandomMinimizer)));
    r
}

fn shared() -> &'static MinimizerRegistry {
    static REG: OnceLock<MinimizerRegistry> = OnceLock::new();
    REG.get_or_init(default_minimizers)
}

pub fn build_minimizer(name: &str, space: &ConfigSpace) -> Result<Box<dyn Minimizer>> {
    shared().build(name, space)
}

#[derive(Debug, Clone)]
pub struct HpoOutcome {
    /// Index into `trials` of the lowest fitness (earliest on ties).
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl HpoOutcome {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Runs exactly `budget` trials: the space's default configuration first when
/// it has one, then proposals from `minimizer`.
pub fn hpo_loop(
    space: &ConfigSpace,
    minimizer: &mut dyn Minimizer,
    evaluator: &mut dyn TrialEvaluator,
    budget: usize,
    rng: &mut Rng,
) -> Result<HpoOutcome> {
    space.validate()?;
    if budget == 0 {
        return Err(Error::Contract("HPO budget must be at least 1".into()));
    }
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    let mut best = 0;
    for index in 0..budget {
        let config = match (&space.default, index) {
            (Some(d), 0) => d.clone(),
            _ => minimizer.propose(space, &trials, rng),
        };
        let trial = evaluator.evaluate(index, &config)?;
        log::info!(
            "trial {index}: lr {:.2e} {} {} -> fitness {:.4}",
            config.learning_rate,
            config.scheduler,
            config.optimizer,
            trial.fitness
        );
        if trial.fitness < trials.get(best).map_or(f64::INFINITY, |b| b.fitness) {
            best = index;
        }
        trials.push(trial);
    }
    Ok(HpoOutcome { best, trials })
}

/// Test accuracy of the trial's fine-tuned network.
pub fn final_evaluate(trial: &Trial, test: &Dataset) -> Result<f64> {
    let snapshot = trial
        .snapshot
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("trial {} has no trained snapshot", trial.index)))?;
    let model = Model::from_snapshot(snapshot)?;
    Ok(evaluate(&model, test)?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_in_range_and_cover_categories() {
        let space = ConfigSpace::default();
        let mut r = rng::stream(0, "hpo", 0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let c = sample(&space, &mut r);
            assert!(space.contains(&c), "{c:?}");
            seen.insert(c.scheduler);
        }
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn best_is_earliest_minimum() {
        let space = ConfigSpace::default();
        let mut r = rng::stream(0, "hpo", 0);
        let mut n = 0;
        let mut eval = |_: &TrialConfig| {
            n += 1;
            if n == 2 || n == 4 {
                0.1
            } else {
                0.5
            }
        };
        let out = hpo_loop(&space, &mut RandomMinimizer, &mut eval, 5, &mut r).unwrap();
        assert_eq!(out.trials.len(), 5);
        assert_eq!(out.best, 1);
    }

    #[test]
    fn jsonl_has_documented_fields() {
        let space = ConfigSpace::default();
        let mut r = rng::stream(0, "hpo", 0);
        let out = hpo_loop(&space, &mut RandomMinimizer, &mut |_: &TrialConfig| 0.25, 2, &mut r).unwrap();
        let text = trials_to_jsonl(&out.trials).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["fitness", "lr", "optimizer", "scheduler", "trial", "val_acc", "wall_seconds"]
        );
    }

    #[test]
    fn default_configuration_runs_first() {
        let d = TrialConfig {
            learning_rate: 0.1,
            scheduler: "constant".into(),
            optimizer: "sgd".into(),
        };
        let space = ConfigSpace {
            default: Some(d.clone()),
            ..ConfigSpace::default()
        };
        let out = hpo_loop(&space, &mut RandomMinimizer, &mut |_: &TrialConfig| 0.5, 3, &mut rng::stream(0, "hpo", 0))
            .unwrap();
        assert_eq!(out.trials[0].config, d);
        assert_ne!(out.trials[1].config, d);
        let outside = ConfigSpace {
            default: Some(TrialConfig { learning_rate: 1.0, ..d }),
            ..ConfigSpace::default()
        };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn zero_budget_and_bad_space_are_rejected() {
        let mut r = rng::stream(0, "hpo", 0);
        let space = ConfigSpace::default();
        assert!(hpo_loop(&space, &mut RandomMinimizer, &mut |_: &TrialConfig| 0.0, 0, &mut r).is_err());
        let bad = ConfigSpace {
            schedulers: vec!["bogus".into()],
            ..ConfigSpace::default()
        };
        assert!(hpo_loop(&bad, &mut RandomMinimizer, &mut |_: &TrialConfig| 0.0, 1, &mut r).is_err());
    }
}
