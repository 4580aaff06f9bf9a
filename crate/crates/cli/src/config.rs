//! Experiment configuration: one TOML file, `--set` overrides, environment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sparseact::hpo::ConfigSpace;
use sparseact::network::Architecture;
use sparseact::pruning::PruneScope;
use sparseact::search::SearchConfig;
use sparseact::training::{OptimizerSpec, SchedulerSpec, TrainConfig};

/// Overrides `data.dir` when set.
pub const DATA_DIR_ENV: &str = "SPARSEACT_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run the vanilla, Stage-1-only and Stage-2-only arms as well.
    pub ablation: bool,
    pub model: Architecture,
    pub data: DataConfig,
    pub pretrain: Recipe,
    pub pruning: PruningConfig,
    /// Fixed recipe for the vanilla and Stage-1-only fine-tuning arms. Its
    /// epoch count and batch size also apply to every Stage-2 trial.
    pub finetune: Recipe,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            ablation: false,
            model: Architecture::Lenet5,
            data: DataConfig::default(),
            pretrain: Recipe {
                epochs: 100,
                ..Recipe::default()
            },
            pruning: PruningConfig::default(),
            finetune: Recipe::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// IDX files under `dir`.
    Mnist,
    /// Gaussian blobs generated from the root seed.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    /// Leading training examples to use; 0 keeps all.
    pub train_examples: usize,
    /// Tail fraction of the training pool held out for validation.
    pub validation_fraction: f64,
    /// Leading test examples to use; 0 keeps all.
    pub test_examples: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist,
            dir: PathBuf::from("data/mnist"),
            train_examples: 0,
            validation_fraction: 0.1,
            test_examples: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_per_class: 100,
            test_per_class: 50,
            classes: 3,
            dims: 8,
            separation: 3.0,
        }
    }
}

/// A training recipe without its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: SchedulerSpec,
    pub optimizer: OptimizerSpec,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.1,
            scheduler: SchedulerSpec::default(),
            optimizer: OptimizerSpec::default(),
        }
    }
}

impl Recipe {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            scheduler: self.scheduler.clone(),
            optimizer: self.optimizer.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub ratio: f64,
    pub scope: PruneScope,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            ratio: 0.99,
            scope: PruneScope::PerLayer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Every slot starts at ReLU6, the catalog stand-in for ReLU.
    Default,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub algorithm: String,
    pub iterations: usize,
    pub history_length: usize,
    pub fidelity_epochs: usize,
    /// Leading training examples used for candidate scoring; 0 keeps all.
    pub train_examples: usize,
    pub init: InitKind,
    pub sa_cooling: f64,
    pub sa_probes: usize,
    pub sa_initial_temperature: Option<f64>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        let s = SearchConfig::default();
        Stage1Config {
            algorithm: "lahc".into(),
            iterations: s.iterations,
            history_length: s.history_length,
            fidelity_epochs: 3,
            train_examples: 0,
            init: InitKind::Default,
            sa_cooling: s.sa_cooling,
            sa_probes: s.sa_probes,
            sa_initial_temperature: s.sa_initial_temperature,
        }
    }
}

impl Stage1Config {
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            iterations: self.iterations,
            history_length: self.history_length,
            sa_cooling: self.sa_cooling,
            sa_probes: self.sa_probes,
            sa_initial_temperature: self.sa_initial_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub budget: usize,
    /// Folds for cross-validated trial scoring; 0 uses the validation split.
    pub kfold: usize,
    pub minimizer: String,
    /// Evaluate the fine-tuning recipe as the first trial (unless the space
    /// names its own default).
    pub start_from_recipe: bool,
    pub space: ConfigSpace,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            budget: 10,
            kfold: 0,
            minimizer: "random".into(),
            start_from_recipe: true,
            space: ConfigSpace::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.pruning.ratio) {
            bail!("pruning.ratio {} outside [0, 1)", self.pruning.ratio);
        }
        if self.stage1.iterations == 0 || self.stage1.history_length == 0 || self.stage1.fidelity_epochs == 0 {
            bail!("stage1 iterations, history_length and fidelity_epochs must be >= 1");
        }
        if self.stage2.budget == 0 {
            bail!("stage2.budget must be >= 1");
        }
        if self.stage2.kfold == 1 {
            bail!("stage2.kfold must be 0 (off) or >= 2");
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) || self.data.validation_fraction == 0.0 {
            bail!("data.validation_fraction must be in (0, 1)");
        }
        sparseact::search::build_algorithm(&self.stage1.algorithm, &self.stage1.search())?;
        sparseact::hpo::build_minimizer(&self.stage2.minimizer, &self.stage2.space)?;
        self.stage2.space.validate()?;
        self.pretrain.with_seed(0).validate().context("pretrain recipe")?;
        self.finetune.with_seed(0).validate().context("finetune recipe")?;
        if let Architecture::Mlp { sizes } = &self.model {
            if sizes.len() < 3 {
                bail!("model.sizes needs an input, at least one hidden layer and an output");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// SHA-256 of the configuration with `output_dir` and `data.dir` cleared,
    /// so the same experiment hashes identically wherever its files live.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.data.dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Parses `key.path=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override key `{key}` has an empty segment");
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override path segment `{p}` is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Effective configuration: file (or defaults), then `overrides`, then the
/// data-directory environment variable.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        set_path(&mut table, &key, value)?;
    }
    let mut config: ExperimentConfig =
        toml::Table::try_into(table).context("config does not match the documented schema")?;
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        config.data.dir = PathBuf::from(dir);
    }
    config.validate()?;
    Ok(config)
}
