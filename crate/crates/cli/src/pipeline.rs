//! Staged experiment runner: pretrain → prune → Stage 1 → Stage 2, plus the
//! ablation arms. Each stage persists its artifacts and is recorded in the run
//! manifest so later invocations can resume from it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sparseact::activations::UnaryOperatorId;
use sparseact::data::{self, Dataset};
use sparseact::hpo::{self, FineTuneEvaluator};
use sparseact::network::{Model, NetworkSnapshot};
use sparseact::pruning::{self, PruningMask, SparsityReport};
use sparseact::rng;
use sparseact::search::{self, CandidateEvaluator, Chromosome};
use sparseact::training::{self, FitHistory};

use crate::config::{DataSource, ExperimentConfig, InitKind};
use crate::manifest::RunManifest;

/// Stage names in execution order.
pub const STAGES: [&str; 8] = [
    "pretrain",
    "prune",
    "vanilla",
    "stage1",
    "stage2",
    "stage1-only",
    "stage2-only",
    "summary",
];

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// Seed of the named stage, derived from the root seed.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    rng::stream(root, name, 0).next_u64()
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    let d = &config.data;
    let (pool, test) = match d.source {
        DataSource::Mnist => {
            let (train, test) = data::load_mnist(&d.dir)
                .with_context(|| format!("loading MNIST from {} (set {})", d.dir.display(), crate::config::DATA_DIR_ENV))?;
            (train, test)
        }
        DataSource::Synthetic => {
            let s = &d.synthetic;
            let seed = derive_seed(config.seed, "data");
            let train = data::synthetic_blobs(s.train_per_class, s.classes, s.dims, s.separation, seed)?;
            let test = data::synthetic_blobs(s.test_per_class, s.classes, s.dims, s.separation, seed ^ 0x5eed)?;
            (train, test)
        }
    };
    let pool = if d.train_examples > 0 { pool.head(d.train_examples) } else { pool };
    let test = if d.test_examples > 0 { test.head(d.test_examples) } else { test };
    let (train, validation) = pool.split_tail(d.validation_fraction)?;
    if train.is_empty() || validation.is_empty() || test.is_empty() {
        bail!(
            "empty split: train {}, validation {}, test {}",
            train.len(),
            validation.len(),
            test.len()
        );
    }
    Ok(Splits {
        train,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseResult {
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub ratio: f64,
    pub scope: pruning::PruneScope,
    pub sparsity: SparsityReport,
    pub compression_label: String,
    /// Test accuracy of the pruned network before any fine-tuning.
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub operators: Vec<UnaryOperatorId>,
    pub scales: Vec<(f64, f64)>,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub algorithm: String,
    pub operators: Vec<UnaryOperatorId>,
    pub best_fitness: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Result {
    pub best_trial: usize,
    pub learning_rate: f64,
    pub scheduler: String,
    pub optimizer: String,
    pub operators: Vec<UnaryOperatorId>,
    pub scales: Vec<(f64, f64)>,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Headline numbers of a run. Ablation columns are present only when the
/// corresponding arms ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub dense_acc: f64,
    pub pruned_acc: f64,
    pub vanilla_acc: Option<f64>,
    pub stage1_only_acc: Option<f64>,
    pub stage2_only_acc: Option<f64>,
    pub combined_acc: f64,
    pub pruning_ratio: f64,
    pub compression_ratio: f64,
    pub compression_label: String,
    pub nonzero_params: usize,
    pub prunable_params: usize,
    pub operators: Vec<UnaryOperatorId>,
    pub scales: Vec<(f64, f64)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes `<name>_history.json`, `<name>_history.csv` and
/// `<name>_grad_flow.csv`; returns their file names.
fn save_history(dir: &Path, name: &str, history: &FitHistory) -> Result<Vec<String>> {
    let json = format!("{name}_history.json");
    let csv = format!("{name}_history.csv");
    let flow = format!("{name}_grad_flow.csv");
    write_json(&dir.join(&json), history)?;
    fs::write(dir.join(&csv), history.to_csv())?;
    fs::write(dir.join(&flow), history.grad_flow_csv())?;
    Ok(vec![json, csv, flow])
}

fn stage_file(stage: &str) -> String {
    format!("{stage}.json")
}

pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    splits: Option<Splits>,
}

impl Run {
    /// Opens the run directory. With `resume`, completed stages of a manifest
    /// written for the same configuration are reused; otherwise the run
    /// starts over.
    pub fn open(config: ExperimentConfig, resume: bool) -> Result<Run> {
        let dir = config.output_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let hash = config.hash()?;
        let manifest = match (resume, RunManifest::load(&dir)?) {
            (true, Some(m)) => {
                if m.config_hash != hash {
                    bail!(
                        "{} was produced by a different configuration (hash {} vs {hash})",
                        dir.display(),
                        m.config_hash
                    );
                }
                m
            }
            _ => RunManifest::new(hash),
        };
        fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
        let mut run = Run {
            config,
            dir,
            manifest,
            splits: None,
        };
        run.manifest.save(&run.dir)?;
        Ok(run)
    }

    pub fn splits(&mut self) -> Result<Splits> {
        if self.splits.is_none() {
            self.splits = Some(load_splits(&self.config)?);
        }
        Ok(self.splits.clone().expect("loaded above"))
    }

    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.config.seed, name)
    }

    /// Forgets `stage` and every later stage so they run again.
    pub fn invalidate(&mut self, stage: &str) -> Result<()> {
        let pos = STAGES
            .iter()
            .position(|s| *s == stage)
            .with_context(|| format!("unknown stage {stage}"))?;
        for s in &STAGES[pos..] {
            self.manifest.stages.remove(*s);
        }
        self.manifest.save(&self.dir)
    }

    /// Loads the stage's result when it completed earlier, otherwise runs
    /// `compute`, which returns the result and the extra artifacts it wrote.
    fn stage<T, F>(&mut self, name: &str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&mut Run) -> Result<(T, Vec<String>)>,
    {
        let file = stage_file(name);
        if self.manifest.is_complete(&self.dir, name) {
            log::debug!("{name}: reusing {}", self.dir.join(&file).display());
            return read_json(&self.dir.join(&file));
        }
        log::info!("{name}: running");
        let (result, mut artifacts) = compute(self).with_context(|| format!("stage {name} failed"))?;
        write_json(&self.dir.join(&file), &result)?;
        artifacts.push(file);
        let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
        self.manifest.complete(name, &refs);
        self.manifest.save(&self.dir)?;
        Ok(result)
    }

    pub fn pretrain(&mut self) -> Result<DenseResult> {
        self.stage("pretrain", |run| {
            let s = run.splits()?;
            let mut model = Model::build(&run.config.model, run.seed("init"))?;
            let cfg = run.config.pretrain.with_seed(run.seed("pretrain"));
            let (snapshot, history) = training::pretrain(&mut model, &s.train, Some(&s.validation), &cfg)?;
            snapshot.save(&run.dir.join("dense.snap"))?;
            let mut artifacts = vec!["dense.snap".to_string()];
            artifacts.extend(save_history(&run.dir, "pretrain", &history)?);
            let result = DenseResult {
                val_acc: training::evaluate(&model, &s.validation)?.accuracy,
                test_acc: training::evaluate(&model, &s.test)?.accuracy,
            };
            log::info!("pretrain: test accuracy {:.4}", result.test_acc);
            Ok((result, artifacts))
        })
    }

    pub fn prune(&mut self) -> Result<PruneResult> {
        self.pretrain()?;
        self.stage("prune", |run| {
            let s = run.splits()?;
            let dense = NetworkSnapshot::load(&run.dir.join("dense.snap"))?;
            let p = &run.config.pruning;
            let mask = pruning::magnitude_prune(&dense, p.ratio, p.scope)?;
            let mut model = Model::from_snapshot(&dense)?;
            pruning::apply_mask(&mut model, &mask)?;
            model.snapshot().save(&run.dir.join("pruned.snap"))?;
            let sparsity = pruning::sparsity_report(&model, &mask)?;
            let result = PruneResult {
                ratio: p.ratio,
                scope: p.scope,
                compression_label: sparsity.compression_label(),
                sparsity,
                test_acc: training::evaluate(&model, &s.test)?.accuracy,
            };
            log::info!(
                "prune: kept {} of {} weights ({})",
                sparsity.nonzero_params,
                sparsity.total_params,
                result.compression_label
            );
            Ok((result, vec!["pruned.snap".to_string()]))
        })
    }

    /// The pruned snapshot and its frozen mask.
    pub fn pruned(&mut self) -> Result<(NetworkSnapshot, PruningMask)> {
        self.prune()?;
        let snapshot = NetworkSnapshot::load(&self.dir.join("pruned.snap"))?;
        let model = Model::from_snapshot(&snapshot)?;
        let p = &self.config.pruning;
        let mask = PruningMask::from_model(&model, p.ratio, p.scope).context("pruned snapshot carries no masks")?;
        Ok((snapshot, mask))
    }

    /// Fine-tunes with the fixed recipe (no scale training) and scores on
    /// validation and test data.
    fn fixed_arm(&mut self, name: &str, operators: Option<&[UnaryOperatorId]>) -> Result<(ArmResult, Vec<String>)> {
        let s = self.splits()?;
        let (snapshot, mask) = self.pruned()?;
        let cfg = self.config.finetune.with_seed(self.seed("finetune"));
        let (model, history) =
            training::fine_tune(&snapshot, &mask, operators, &s.train, Some(&s.validation), &cfg, false)?;
        let snap_name = format!("{}.snap", name.replace('-', "_"));
        model.snapshot().save(&self.dir.join(&snap_name))?;
        let mut artifacts = vec![snap_name];
        artifacts.extend(save_history(&self.dir, &name.replace('-', "_"), &history)?);
        let result = ArmResult {
            operators: model.operators(),
            scales: model.scales(),
            val_acc: training::evaluate(&model, &s.validation)?.accuracy,
            test_acc: training::evaluate(&model, &s.test)?.accuracy,
        };
        log::info!("{name}: test accuracy {:.4}", result.test_acc);
        Ok((result, artifacts))
    }

    pub fn vanilla(&mut self) -> Result<ArmResult> {
        self.prune()?;
        self.stage("vanilla", |run| run.fixed_arm("vanilla", None))
    }

    fn initial_chromosome(&self, depth: usize) -> Result<Chromosome> {
        Ok(match self.config.stage1.init {
            InitKind::Default => Chromosome::filled(UnaryOperatorId::ReLU6, depth)?,
            InitKind::Random => Chromosome::uniform(depth, &mut rng::stream(self.config.seed, "stage1-init", 0))?,
        })
    }

    /// Runs one search with `algorithm` from the pruned snapshot.
    pub fn search(
        &mut self,
        algorithm: &str,
        search_seed: u64,
        fidelity_epochs: usize,
    ) -> Result<search::SearchOutcome> {
        let s = self.splits()?;
        let (snapshot, mask) = self.pruned()?;
        let c = &self.config.stage1;
        let alg = search::build_algorithm(algorithm, &c.search())?;
        let train = if c.train_examples > 0 {
            s.train.head(c.train_examples)
        } else {
            s.train.clone()
        };
        let mut fidelity = self.config.finetune.with_seed(derive_seed(search_seed, "fidelity"));
        fidelity.epochs = fidelity_epochs;
        let mut objective = CandidateEvaluator {
            snapshot: &snapshot,
            mask: &mask,
            train: &train,
            validation: Some(&s.validation),
            fidelity,
        };
        let init = self.initial_chromosome(Model::from_snapshot(&snapshot)?.depth())?;
        let mut r = rng::stream(search_seed, "search", 0);
        Ok(alg.run(&mut objective, init, &mut r)?)
    }

    pub fn stage1(&mut self) -> Result<Stage1Result> {
        self.prune()?;
        self.stage("stage1", |run| {
            let algorithm = run.config.stage1.algorithm.clone();
            let epochs = run.config.stage1.fidelity_epochs;
            let outcome = run.search(&algorithm, run.seed("stage1"), epochs)?;
            outcome.trace.save(&run.dir.join("stage1_trace.jsonl"))?;
            log::info!("stage1: best {} (fitness {:.4})", outcome.best, outcome.best_fitness);
            let result = Stage1Result {
                algorithm,
                operators: outcome.best.genes().to_vec(),
                best_fitness: outcome.best_fitness,
                evaluations: outcome.trace.records.len(),
            };
            Ok((result, vec!["stage1_trace.jsonl".to_string()]))
        })
    }

    /// Hyperparameter search with trainable scales for fixed `operators`;
    /// `name` prefixes the artifacts.
    fn hpo_arm(&mut self, name: &str, operators: &[UnaryOperatorId]) -> Result<(Stage2Result, Vec<String>)> {
        let s = self.splits()?;
        let (snapshot, mask) = self.pruned()?;
        let mut c = self.config.stage2.clone();
        if c.start_from_recipe && c.space.default.is_none() {
            let r = &self.config.finetune;
            let recipe = hpo::TrialConfig {
                learning_rate: r.learning_rate,
                scheduler: r.scheduler.kind.clone(),
                optimizer: r.optimizer.kind.clone(),
            };
            if c.space.contains(&recipe) {
                c.space.default = Some(recipe);
            } else {
                log::warn!("{name}: fine-tuning recipe lies outside the search space; not seeding it");
            }
        }
        let folds = if c.kfold >= 2 {
            Some(data::kfold(s.train.len(), c.kfold, self.seed("folds"))?)
        } else {
            None
        };
        let mut evaluator = FineTuneEvaluator {
            snapshot: &snapshot,
            mask: &mask,
            operators,
            train: &s.train,
            validation: &s.validation,
            epochs: self.config.finetune.epochs,
            batch_size: self.config.finetune.batch_size,
            seed: self.seed("stage2"),
            folds: folds.as_ref(),
        };
        let mut minimizer = hpo::build_minimizer(&c.minimizer, &c.space)?;
        let mut r = rng::stream(self.config.seed, "stage2", 0);
        let outcome = hpo::hpo_loop(&c.space, minimizer.as_mut(), &mut evaluator, c.budget, &mut r)?;
        let trials_file = format!("{name}_trials.jsonl");
        fs::write(self.dir.join(&trials_file), hpo::trials_to_jsonl(&outcome.trials)?)?;
        let best = outcome.best_trial();
        let mut artifacts = vec![trials_file];
        let test_acc = match &best.snapshot {
            Some(snap) => {
                let snap_file = format!("{name}.snap");
                snap.save(&self.dir.join(&snap_file))?;
                artifacts.push(snap_file);
                if let Some(h) = &best.history {
                    artifacts.extend(save_history(&self.dir, name, h)?);
                }
                hpo::final_evaluate(best, &s.test)?
            }
            None => {
                log::warn!("{name}: every trial diverged");
                0.0
            }
        };
        let result = Stage2Result {
            best_trial: best.index,
            learning_rate: best.config.learning_rate,
            scheduler: best.config.scheduler.clone(),
            optimizer: best.config.optimizer.clone(),
            operators: operators.to_vec(),
            scales: best.scales.clone(),
            val_acc: best.val_acc,
            test_acc,
        };
        log::info!(
            "{name}: best trial {} ({} / {} / lr {:.2e}) test accuracy {:.4}",
            result.best_trial,
            result.scheduler,
            result.optimizer,
            result.learning_rate,
            result.test_acc
        );
        Ok((result, artifacts))
    }

    pub fn stage2(&mut self) -> Result<Stage2Result> {
        let ops = self.stage1()?.operators;
        self.stage("stage2", |run| run.hpo_arm("stage2", &ops))
    }

    pub fn stage1_only(&mut self) -> Result<ArmResult> {
        let ops = self.stage1()?.operators;
        self.stage("stage1-only", |run| run.fixed_arm("stage1-only", Some(&ops)))
    }

    pub fn stage2_only(&mut self) -> Result<Stage2Result> {
        self.prune()?;
        self.stage("stage2-only", |run| {
            let (snapshot, _) = run.pruned()?;
            let ops = Model::from_snapshot(&snapshot)?.operators();
            run.hpo_arm("stage2_only", &ops)
        })
    }

    /// Runs every stage (and the ablation arms when `ablation` is set), then
    /// writes the summary.
    pub fn pipeline(&mut self, ablation: bool) -> Result<Summary> {
        let dense = self.pretrain()?;
        let pruned = self.prune()?;
        let vanilla = if ablation { Some(self.vanilla()?) } else { None };
        self.stage1()?;
        let combined = self.stage2()?;
        let (s1, s2) = if ablation {
            (Some(self.stage1_only()?), Some(self.stage2_only()?))
        } else {
            (None, None)
        };
        let summary = Summary {
            config_hash: self.manifest.config_hash.clone(),
            seed: self.config.seed,
            dense_acc: dense.test_acc,
            pruned_acc: pruned.test_acc,
            vanilla_acc: vanilla.map(|v| v.test_acc),
            stage1_only_acc: s1.map(|v| v.test_acc),
            stage2_only_acc: s2.map(|v| v.test_acc),
            combined_acc: combined.test_acc,
            pruning_ratio: pruned.sparsity.pruning_ratio,
            compression_ratio: pruned.sparsity.compression_ratio,
            compression_label: pruned.compression_label.clone(),
            nonzero_params: pruned.sparsity.nonzero_params,
            prunable_params: pruned.sparsity.total_params,
            operators: combined.operators.clone(),
            scales: combined.scales.clone(),
        };
        write_json(&self.dir.join(SUMMARY_FILE), &summary)?;
        let m = &mut self.manifest.metrics;
        m.insert("dense_acc".into(), summary.dense_acc);
        m.insert("combined_acc".into(), summary.combined_acc);
        m.insert("compression_ratio".into(), summary.compression_ratio);
        for (k, v) in [
            ("vanilla_acc", summary.vanilla_acc),
            ("stage1_only_acc", summary.stage1_only_acc),
            ("stage2_only_acc", summary.stage2_only_acc),
        ] {
            if let Some(v) = v {
                m.insert(k.into(), v);
            }
        }
        self.manifest.complete("summary", &[SUMMARY_FILE]);
        self.manifest.save(&self.dir)?;
        Ok(summary)
    }
}
