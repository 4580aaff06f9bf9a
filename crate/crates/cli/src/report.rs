//! Collects a finished (or partial) run directory into report tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sparseact::network::{Model, NetworkSnapshot};
use sparseact::pruning::{self, PruningMask, SparsityReport};
use sparseact::training::FitHistory;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::pipeline::{read_json, Summary, CONFIG_FILE, SUMMARY_FILE};

pub const REPORT_DIR: &str = "report";
/// Stages whose fit histories go into the learning-curve tables.
pub const HISTORY_STAGES: [&str; 5] = ["pretrain", "vanilla", "stage1_only", "stage2_only", "stage2"];
/// Fine-tuned network of the full method.
pub const FINAL_SNAPSHOT: &str = "stage2.snap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub completed_stages: Vec<String>,
    pub missing_artifacts: Vec<String>,
    pub summary: Option<Summary>,
    /// Sparsity measured on the final network itself.
    pub final_sparsity: Option<SparsityReport>,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

/// Sparsity of a saved network, measured from its installed masks.
pub fn snapshot_sparsity(path: &Path, ratio: f64, scope: pruning::PruneScope) -> Result<SparsityReport> {
    let snapshot = NetworkSnapshot::load(path)?;
    let model = Model::from_snapshot(&snapshot)?;
    let mask = PruningMask::from_model(&model, ratio, scope)
        .with_context(|| format!("{} carries no pruning masks", path.display()))?;
    Ok(pruning::sparsity_report(&model, &mask)?)
}

/// `stage,epoch,train_loss,train_acc,val_loss,val_acc,lr` over all histories.
pub fn learning_curves_csv(histories: &[(String, FitHistory)]) -> String {
    let mut out = String::from("stage,epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (stage, h) in histories {
        for r in &h.records {
            let _ = writeln!(
                out,
                "{stage},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc),
                r.lr
            );
        }
    }
    out
}

/// `stage,epoch,<layer columns>,global`. Layer columns are the union of all
/// histories' layer names; a stage without that layer leaves it empty.
pub fn gradient_flow_csv(histories: &[(String, FitHistory)]) -> String {
    let mut layers: Vec<String> = Vec::new();
    for (_, h) in histories {
        for l in &h.layers {
            if !layers.contains(l) {
                layers.push(l.clone());
            }
        }
    }
    let mut out = format!("stage,epoch,{}global\n", layers.iter().map(|l| format!("{l},")).collect::<String>());
    for (stage, h) in histories {
        for r in &h.records {
            let _ = write!(out, "{stage},{},", r.epoch);
            for l in &layers {
                if let Some(v) = h.layers.iter().position(|x| x == l).and_then(|i| r.layer_grad_flow.get(i)) {
                    let _ = write!(out, "{v}");
                }
                out.push(',');
            }
            let _ = writeln!(out, "{}", r.grad_flow);
        }
    }
    out
}

/// Writes `report/summary.json`, `report/learning_curves.csv` and
/// `report/gradient_flow.csv` for the run in `dir`.
pub fn write_report(dir: &Path) -> Result<Report> {
    let Some(manifest) = RunManifest::load(dir)? else {
        bail!("{} has no run manifest; run the pipeline first", dir.display());
    };
    let missing = manifest.missing_artifacts(dir);
    for m in &missing {
        log::warn!("missing artifact: {m}");
    }
    let summary_path = dir.join(SUMMARY_FILE);
    let summary: Option<Summary> = if summary_path.exists() {
        Some(read_json(&summary_path)?)
    } else {
        None
    };
    let final_path = dir.join(FINAL_SNAPSHOT);
    let final_sparsity = if final_path.exists() {
        let text = fs::read_to_string(dir.join(CONFIG_FILE)).context("reading run configuration")?;
        let config = ExperimentConfig::from_toml(&text)?;
        Some(snapshot_sparsity(&final_path, config.pruning.ratio, config.pruning.scope)?)
    } else {
        None
    };
    let mut histories = Vec::new();
    for stage in HISTORY_STAGES {
        let path = dir.join(format!("{stage}_history.json"));
        if path.exists() {
            histories.push((stage.to_string(), read_json::<FitHistory>(&path)?));
        }
    }
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("learning_curves.csv"), learning_curves_csv(&histories))?;
    fs::write(out.join("gradient_flow.csv"), gradient_flow_csv(&histories))?;
    let report = Report {
        run_dir: dir.to_path_buf(),
        config_hash: manifest.config_hash.clone(),
        completed_stages: manifest.stages.keys().cloned().collect(),
        missing_artifacts: missing,
        summary,
        final_sparsity,
        metrics: manifest.metrics.clone(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
