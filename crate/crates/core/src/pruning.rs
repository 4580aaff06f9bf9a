//! Unstructured magnitude pruning and sparsity accounting.
//!
//! Only weight tensors are pruned; biases are always kept. The number of
//! removed weights is `floor(ratio * N)`, taken over all weights (global scope)
//! or over each tensor separately (per-layer scope). Among equal magnitudes the
//! later enumeration index is removed first.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, NetworkSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    Global,
    #[default]
    PerLayer,
}

/// Frozen keep-masks (`true` = kept) for every prunable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningMask {
    ratio: f64,
    scope: PruneScope,
    tensors: Vec<(String, Arc<[bool]>)>,
}

impl PruningMask {
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn scope(&self) -> PruneScope {
        self.scope
    }

    pub fn tensors(&self) -> &[(String, Arc<[bool]>)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| &**m)
    }

    /// Number of kept weights (the keep-count bound of the pruning stage).
    pub fn keep_count(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.iter().filter(|&&k| k).count()).sum()
    }

    pub fn zero_count(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.iter().filter(|&&k| !k).count()).sum()
    }

    /// Masks already installed on `model`, if every weight carries one.
    pub fn from_model(model: &Model, ratio: f64, scope: PruneScope) -> Option<PruningMask> {
        let tensors = model
            .layers()
            .iter()
            .map(|l| l.mask.as_ref().map(|m| (format!("{}.weight", l.name), Arc::clone(m))))
            .collect::<Option<Vec<_>>>()?;
        Some(PruningMask { ratio, scope, tensors })
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Contract(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Keep-mask removing the `count` smallest-magnitude entries of the
/// concatenation of `tensors`.
fn prune_smallest(tensors: &[&[f64]], count: usize) -> Vec<Vec<bool>> {
    let mut order: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(t, w)| (0..w.len()).map(move |i| (t, i)))
        .collect();
    // Ascending magnitude; among ties the later enumeration index first.
    order.sort_by(|a, b| {
        let (ma, mb) = (tensors[a.0][a.1].abs(), tensors[b.0][b.1].abs());
        ma.total_cmp(&mb).then_with(|| b.cmp(a))
    });
    let mut masks: Vec<Vec<bool>> = tensors.iter().map(|w| vec![true; w.len()]).collect();
    for &(t, i) in order.iter().take(count) {
        masks[t][i] = false;
    }
    masks
}

/// Magnitude masks for raw weight tensors.
pub fn magnitude_masks(tensors: &[&[f64]], ratio: f64, scope: PruneScope) -> Result<Vec<Vec<bool>>> {
    check_ratio(ratio)?;
    Ok(match scope {
        PruneScope::Global => {
            let n: usize = tensors.iter().map(|w| w.len()).sum();
            prune_smallest(tensors, (ratio * n as f64).floor() as usize)
        }
        PruneScope::PerLayer => tensors
            .iter()
            .map(|w| {
                let count = (ratio * w.len() as f64).floor() as usize;
                prune_smallest(&[w], count).pop().expect("one tensor in, one mask out")
            })
            .collect(),
    })
}

/// Masks the smallest-magnitude weights of `snapshot`.
pub fn magnitude_prune(snapshot: &NetworkSnapshot, ratio: f64, scope: PruneScope) -> Result<PruningMask> {
    check_ratio(ratio)?;
    let weights: Vec<_> = snapshot
        .tensors
        .iter()
        .filter(|t| t.name.ends_with(".weight"))
        .collect();
    if weights.is_empty() {
        return Err(Error::Contract("snapshot has no prunable weight tensors".into()));
    }
    let data: Vec<&[f64]> = weights.iter().map(|t| t.data.as_slice()).collect();
    let masks = magnitude_masks(&data, ratio, scope)?;
    Ok(PruningMask {
        ratio,
        scope,
        tensors: weights
            .iter()
            .zip(masks)
            .map(|(t, m)| (t.name.clone(), Arc::from(m)))
            .collect(),
    })
}

/// Zeroes masked weights and installs the masks on `model`.
pub fn apply_mask(model: &mut Model, mask: &PruningMask) -> Result<()> {
    for (name, bits) in &mask.tensors {
        let layer = model
            .layers_mut()
            .iter_mut()
            .find(|l| format!("{}.weight", l.name) == *name)
            .ok_or_else(|| Error::Contract(format!("mask names unknown tensor {name}")))?;
        if layer.weight.numel() != bits.len() {
            return Err(Error::Dimension(format!(
                "mask {name} has {} entries, tensor has {}",
                bits.len(),
                layer.weight.numel()
            )));
        }
        for (w, &keep) in layer.weight.data_mut().iter_mut().zip(bits.iter()) {
            if !keep {
                *w = 0.0;
            }
        }
        layer.mask = Some(Arc::clone(bits));
    }
    Ok(())
}

/// Zeroes masked entries of every layer carrying a mask.
pub fn reapply_installed_masks(model: &mut Model) {
    for layer in model.layers_mut() {
        if let Some(mask) = layer.mask.clone() {
            for (w, &keep) in layer.weight.data_mut().iter_mut().zip(mask.iter()) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Prunable (weight) parameters.
    pub total_params: usize,
    /// Nonzero prunable parameters.
    pub nonzero_params: usize,
    /// All parameters including biases.
    pub all_params: usize,
    pub pruning_ratio: f64,
    /// `total_params / nonzero_params`.
    pub compression_ratio: f64,
}

impl SparsityReport {
    /// Compression ratio rendered as `"N×"`.
    pub fn compression_label(&self) -> String {
        format!("{:.0}×", self.compression_ratio)
    }
}

pub fn sparsity_report(model: &Model, mask: &PruningMask) -> Result<SparsityReport> {
    let mut total = 0;
    let mut nonzero = 0;
    for (name, _) in &mask.tensors {
        let layer = model
            .layers()
            .iter()
            .find(|l| format!("{}.weight", l.name) == *name)
            .ok_or_else(|| Error::Contract(format!("mask names unknown tensor {name}")))?;
        total += layer.weight.numel();
        nonzero += layer.weight.data().iter().filter(|&&w| w != 0.0).count();
    }
    let compression_ratio = if nonzero == 0 {
        f64::INFINITY
    } else {
        total as f64 / nonzero as f64
    };
    Ok(SparsityReport {
        total_params: total,
        nonzero_params: nonzero,
        all_params: model.num_params(),
        pruning_ratio: 1.0 - nonzero as f64 / total as f64,
        compression_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_largest_magnitudes() {
        let m = magnitude_masks(&[&[0.5, -0.1, 0.3, -0.7]], 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(m, vec![vec![true, false, false, true]]);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let m = magnitude_masks(&[&[0.0, 1.0], &[2.0]], 0.0, PruneScope::Global).unwrap();
        assert!(m.iter().flatten().all(|&k| k));
    }

    #[test]
    fn ratio_must_be_in_unit_interval() {
        assert!(magnitude_masks(&[&[1.0]], 1.0, PruneScope::Global).is_err());
        assert!(magnitude_masks(&[&[1.0]], -0.1, PruneScope::Global).is_err());
    }

    #[test]
    fn ties_remove_later_indices_first() {
        let m = magnitude_masks(&[&[1.0, 1.0, 1.0, 1.0]], 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(m[0], vec![true, true, false, false]);
        let m = magnitude_masks(&[&[1.0, 1.0], &[1.0, 2.0]], 0.5, PruneScope::Global).unwrap();
        assert_eq!(m, vec![vec![true, false], vec![false, true]]);
    }

    #[test]
    fn global_scope_can_empty_a_layer() {
        let m = magnitude_masks(&[&[0.1, 0.2], &[5.0, 6.0]], 0.5, PruneScope::Global).unwrap();
        assert_eq!(m, vec![vec![false, false], vec![true, true]]);
    }

    #[test]
    fn lenet_compression_labels() {
        let snap = Model::build_lenet5(0).snapshot();
        for (ratio, label) in [(0.9, "10×"), (0.95, "20×"), (0.99, "100×")] {
            let mask = magnitude_prune(&snap, ratio, PruneScope::PerLayer).unwrap();
            let mut model = Model::from_snapshot(&snap).unwrap();
            apply_mask(&mut model, &mask).unwrap();
            let report = sparsity_report(&model, &mask).unwrap();
            assert_eq!(report.compression_label(), label, "ratio {ratio}: {report:?}");
            assert_eq!(report.nonzero_params, mask.keep_count());
        }
    }

    #[test]
    fn apply_is_idempotent_and_counts_match() {
        let snap = Model::build_mlp(&[6, 5, 3], 2).unwrap().snapshot();
        let mask = magnitude_prune(&snap, 0.6, PruneScope::Global).unwrap();
        let mut once = Model::from_snapshot(&snap).unwrap();
        apply_mask(&mut once, &mask).unwrap();
        let mut twice = once.clone();
        apply_mask(&mut twice, &mask).unwrap();
        assert_eq!(once.snapshot(), twice.snapshot());
        let report = sparsity_report(&once, &mask).unwrap();
        assert_eq!(report.nonzero_params, mask.keep_count());
        assert_eq!(mask.zero_count(), (0.6f64 * 45.0).floor() as usize);

        let all = magnitude_prune(&snap, 0.0, PruneScope::PerLayer).unwrap();
        let mut untouched = Model::from_snapshot(&snap).unwrap();
        apply_mask(&mut untouched, &all).unwrap();
        assert_eq!(untouched.snapshot().tensors, snap.tensors);
    }

    #[test]
    fn biases_are_never_masked() {
        let snap = Model::build_mlp(&[3, 3, 2], 0).unwrap().snapshot();
        let mask = magnitude_prune(&snap, 0.9, PruneScope::Global).unwrap();
        assert!(mask.tensors().iter().all(|(n, _)| n.ends_with(".weight")));
    }
}
