//! Discrete search over per-layer activation operators.
//!
//! A [`Chromosome`] assigns one catalog operator to each activation slot.
//! Search algorithms minimize an [`Objective`] over chromosomes and record
//! every evaluation in a [`SearchTrace`].

mod algorithms;

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::activations::{catalog, UnaryOperatorId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::NetworkSnapshot;
use crate::pruning::PruningMask;
use crate::registry::Registry;
use crate::rng::Rng;
use crate::training::{fine_tune, TrainConfig};

pub use algorithms::{HillClimbing, Lahc, LahcState, RandomSearch, SimulatedAnnealing};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chromosome(Vec<UnaryOperatorId>);

impl Chromosome {
    pub fn new(genes: Vec<UnaryOperatorId>) -> Result<Self> {
        if genes.is_empty() {
            return Err(Error::Contract("chromosome must have at least one gene".into()));
        }
        if let Some(bad) = genes.iter().find(|g| g.catalog_index().is_none()) {
            return Err(Error::Contract(format!("operator {bad} is not in the search catalog")));
        }
        Ok(Chromosome(genes))
    }

    /// `len` copies of `op`.
    pub fn filled(op: UnaryOperatorId, len: usize) -> Result<Self> {
        Chromosome::new(vec![op; len])
    }

    /// Genes drawn independently and uniformly from the catalog.
    pub fn uniform(len: usize, rng: &mut Rng) -> Result<Self> {
        let cat = catalog();
        Chromosome::new((0..len).map(|_| cat[rng.gen_range(0..cat.len())]).collect())
    }

    pub fn genes(&self) -> &[UnaryOperatorId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Chromosome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|g| g.as_str()).collect();
        write!(f, "[{}]", names.join(", "))
    }
}

/// Swaps two distinct positions (when there are at least two), then redraws
/// one position uniformly from the catalog.
pub fn mutate(parent: &Chromosome, rng: &mut Rng) -> Chromosome {
    let mut genes = parent.0.clone();
    let n = genes.len();
    if n >= 2 {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        genes.swap(i, j);
    }
    let cat = catalog();
    let pos = rng.gen_range(0..n);
    genes[pos] = cat[rng.gen_range(0..cat.len())];
    Chromosome(genes)
}

/// Result of scoring one chromosome. Lower fitness is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub fitness: f64,
    pub val_acc: Option<f64>,
}

pub trait Objective {
    fn score(&mut self, chromosome: &Chromosome) -> Result<Score>;
}

impl<F: FnMut(&Chromosome) -> f64> Objective for F {
    fn score(&mut self, chromosome: &Chromosome) -> Result<Score> {
        Ok(Score {
            fitness: self(chromosome),
            val_acc: None,
        })
    }
}

/// Scores `chromosome`, mapping non-finite fitness to `+inf`.
pub(crate) fn score_checked(objective: &mut dyn Objective, chromosome: &Chromosome) -> Result<Score> {
    let mut s = objective.score(chromosome)?;
    if !s.fitness.is_finite() {
        log::warn!("candidate {chromosome} scored {}; treated as +inf", s.fitness);
        s.fitness = f64::INFINITY;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 0 for the initial point, then 1..=iterations.
    pub iter: usize,
    pub genes: Chromosome,
    #[serde(with = "inf_as_null")]
    pub fitness: f64,
    pub accepted: bool,
    /// Best fitness seen up to and including this record.
    #[serde(with = "inf_as_null")]
    pub best: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

/// Every objective evaluation of one search run, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub(crate) fn push(&mut self, iter: usize, genes: &Chromosome, score: Score, accepted: bool, best: f64) {
        self.records.push(TraceRecord {
            iter,
            genes: genes.clone(),
            fitness: score.fitness,
            accepted,
            best,
            val_acc: score.val_acc,
        });
    }

    /// Records produced by search iterations (the initial point excluded).
    pub fn iterations(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.iter > 0)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: TraceRecord =
                serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(SearchTrace { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SearchTrace::from_jsonl(&text, path)
    }
}

/// Infinite fitness (rejected or diverged candidates) is stored as `null`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Chromosome,
    pub best_fitness: f64,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Evaluations after the initial point.
    pub iterations: usize,
    pub history_length: usize,
    /// Geometric cooling factor per iteration.
    pub sa_cooling: f64,
    /// Iterations whose fitness changes estimate the initial temperature.
    pub sa_probes: usize,
    /// Fixed initial temperature, bypassing the estimate.
    pub sa_initial_temperature: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 20,
            history_length: 3,
            sa_cooling: 0.95,
            sa_probes: 3,
            sa_initial_temperature: None,
        }
    }
}

pub trait SearchAlgorithm: Send + Sync {
    fn name(&self) -> &'static str;

    /// Minimizes `objective` starting from `init`. Randomness comes from `rng` only.
    fn run(&self, objective: &mut dyn Objective, init: Chromosome, rng: &mut Rng) -> Result<SearchOutcome>;
}

pub type SearchRegistry = Registry<dyn SearchAlgorithm, SearchConfig>;

/// Registry with "lahc", "hill-climbing", "sa" and "rs".
pub fn default_algorithms() -> SearchRegistry {
    let mut r = SearchRegistry::new("search algorithm");
    r.register("lahc", |c| Ok(Box::new(Lahc::new(c.iterations, c.history_length)?)));
    r.register("hill-climbing", |c| Ok(Box::new(HillClimbing::new(c.iterations)?)));
    r.register("sa", |c| {
        Ok(Box::new(SimulatedAnnealing::new(
            c.iterations,
            c.sa_cooling,
            c.sa_probes,
            c.sa_initial_temperature,
        )?))
    });
    r.register("rs", |c| Ok(Box::new(RandomSearch::new(c.iterations)?)));
    r
}

fn shared() -> &'static SearchRegistry {
    static REG: OnceLock<SearchRegistry> = OnceLock::new();
    REG.get_or_init(default_algorithms)
}

pub fn build_algorithm(name: &str, config: &SearchConfig) -> Result<Box<dyn SearchAlgorithm>> {
    shared().build(name, config)
}

pub fn algorithm_names() -> Vec<&'static str> {
    shared().names()
}

/// Low-fidelity scoring of chromosomes on a fixed pruned snapshot: install the
/// operators with unit scales, fine-tune with the mask enforced, and report
/// the final-epoch training loss.
#[derive(Debug, Clone)]
pub struct CandidateEvaluator<'a> {
    pub snapshot: &'a NetworkSnapshot,
    pub mask: &'a PruningMask,
    pub train: &'a Dataset,
    pub validation: Option<&'a Dataset>,
    pub fidelity: TrainConfig,
}

impl Objective for CandidateEvaluator<'_> {
    fn score(&mut self, chromosome: &Chromosome) -> Result<Score> {
        evaluate_candidate(
            chromosome,
            self.snapshot,
            self.mask,
            self.train,
            self.validation,
            &self.fidelity,
        )
    }
}

/// Final-epoch training loss of `chromosome` after `fidelity` fine-tuning
/// from the pruned snapshot; `+inf` when training diverges.
pub fn evaluate_candidate(
    chromosome: &Chromosome,
    snapshot: &NetworkSnapshot,
    mask: &PruningMask,
    train: &Dataset,
    validation: Option<&Dataset>,
    fidelity: &TrainConfig,
) -> Result<Score> {
    match fine_tune(snapshot, mask, Some(chromosome.genes()), train, validation, fidelity, false) {
        Ok((_, history)) => {
            let last = history.last().expect("at least one epoch");
            Ok(Score {
                fitness: last.train_loss,
                val_acc: last.val_acc,
            })
        }
        Err(Error::Diverged { epoch, loss }) => {
            log::warn!("candidate {chromosome} diverged at epoch {epoch} (loss {loss})");
            Ok(Score {
                fitness: f64::INFINITY,
                val_acc: None,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mutation_keeps_length_and_catalog() {
        let mut r = rng::stream(0, "test", 0);
        let mut c = Chromosome::filled(UnaryOperatorId::ReLU6, 4).unwrap();
        for _ in 0..500 {
            let next = mutate(&c, &mut r);
            assert_eq!(next.len(), 4);
            assert!(next.genes().iter().all(|g| g.catalog_index().is_some()));
            c = next;
        }
    }

    #[test]
    fn single_gene_is_resampled() {
        let mut r = rng::stream(1, "test", 0);
        let parent = Chromosome::filled(UnaryOperatorId::Tanh, 1).unwrap();
        let seen: std::collections::HashSet<_> = (0..400).map(|_| mutate(&parent, &mut r).genes()[0]).collect();
        assert_eq!(seen.len(), 13);
        assert_eq!(parent.genes(), &[UnaryOperatorId::Tanh]);
    }

    #[test]
    fn chromosome_rejects_relu_and_empty() {
        assert!(Chromosome::new(vec![]).is_err());
        assert!(Chromosome::new(vec![UnaryOperatorId::ReLU]).is_err());
    }

    #[test]
    fn trace_jsonl_round_trip_with_infinity() {
        let c = Chromosome::filled(UnaryOperatorId::Gelu, 2).unwrap();
        let mut t = SearchTrace::default();
        t.push(0, &c, Score { fitness: 1.5, val_acc: Some(0.5) }, true, 1.5);
        t.push(1, &c, Score { fitness: f64::INFINITY, val_acc: None }, false, 1.5);
        let text = t.to_jsonl().unwrap();
        assert!(text.lines().next().unwrap().contains("\"genes\":[\"GELU\",\"GELU\"]"));
        let back = SearchTrace::from_jsonl(&text, Path::new("t.jsonl")).unwrap();
        assert_eq!(back.records[0], t.records[0]);
        assert_eq!(back.records[1].fitness, f64::INFINITY);
    }

    #[test]
    fn registry_has_every_algorithm() {
        assert_eq!(algorithm_names(), vec!["lahc", "hill-climbing", "sa", "rs"]);
        assert!(build_algorithm("bo", &SearchConfig::default()).is_err());
    }
}
