//! Side-by-side runs of several search algorithms on the same pruned network.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};

use sparseact::search::SearchTrace;

use crate::pipeline::{derive_seed, Run};

pub const COMPARE_DIR: &str = "compare";
pub const MERGED_FILE: &str = "merged.csv";

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub algorithm: String,
    pub seed: u64,
    pub best_fitness: f64,
    pub trace_path: PathBuf,
}

/// Runs every algorithm once per seed at `fidelity_epochs`, writes one trace
/// per run and a merged best-so-far table. Pretraining and pruning come from
/// the run (and are reused when already complete).
pub fn compare_search(
    run: &mut Run,
    algorithms: &[String],
    seeds: &[u64],
    fidelity_epochs: usize,
) -> Result<Vec<CompareResult>> {
    run.prune()?;
    let dir = run.dir.join(COMPARE_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut results = Vec::new();
    let mut traces: Vec<(String, u64, SearchTrace)> = Vec::new();
    for algorithm in algorithms {
        for &seed in seeds {
            log::info!("compare: {algorithm} seed {seed}");
            let outcome = run
                .search(algorithm, derive_seed(seed, "stage1"), fidelity_epochs)
                .with_context(|| format!("search {algorithm} seed {seed}"))?;
            let path = dir.join(format!("{algorithm}_seed{seed}.jsonl"));
            outcome.trace.save(&path)?;
            log::info!("compare: {algorithm} seed {seed} best {:.4}", outcome.best_fitness);
            results.push(CompareResult {
                algorithm: algorithm.clone(),
                seed,
                best_fitness: outcome.best_fitness,
                trace_path: path,
            });
            traces.push((algorithm.clone(), seed, outcome.trace));
        }
    }
    fs::write(dir.join(MERGED_FILE), merged_csv(&traces))?;
    Ok(results)
}

/// `iteration,algorithm,seed,best` rows for iterations 1 and later.
pub fn merged_csv(traces: &[(String, u64, SearchTrace)]) -> String {
    let mut out = String::from("iteration,algorithm,seed,best\n");
    for (algorithm, seed, trace) in traces {
        for r in trace.iterations() {
            let _ = writeln!(out, "{},{algorithm},{seed},{}", r.iter, r.best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparseact::activations::UnaryOperatorId;
    use sparseact::search::{Chromosome, TraceRecord};

    #[test]
    fn merged_skips_initial_point() {
        let genes = Chromosome::filled(UnaryOperatorId::Tanh, 2).unwrap();
        let mut trace = SearchTrace::default();
        for (iter, best) in [(0, 3.0), (1, 2.0), (2, 1.5)] {
            trace.records.push(TraceRecord {
                iter,
                genes: genes.clone(),
                fitness: best,
                accepted: true,
                best,
                val_acc: None,
            });
        }
        let csv = merged_csv(&[("lahc".into(), 7, trace)]);
        assert_eq!(csv, "iteration,algorithm,seed,best\n1,lahc,7,2\n2,lahc,7,1.5\n");
    }
}
