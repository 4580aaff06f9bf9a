//! Magnitude pruning invariants, and mask persistence through fine-tuning.

use proptest::prelude::*;

use sparseact::data::synthetic_blobs;
use sparseact::network::Model;
use sparseact::pruning::{apply_mask, magnitude_masks, magnitude_prune, sparsity_report, PruneScope};
use sparseact::training::{fine_tune, OptimizerSpec, TrainConfig};

const RATIOS: [f64; 5] = [0.0, 0.5, 0.9, 0.95, 0.99];

fn tensors() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..300), 1..4)
}

fn zeros(mask: &[bool]) -> usize {
    mask.iter().filter(|&&k| !k).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_count_is_floor_of_ratio(ts in tensors(), ri in 0usize..5) {
        let ratio = RATIOS[ri];
        let refs: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
        let per_layer = magnitude_masks(&refs, ratio, PruneScope::PerLayer).unwrap();
        for (t, m) in ts.iter().zip(&per_layer) {
            prop_assert_eq!(m.len(), t.len());
            prop_assert_eq!(zeros(m), (ratio * t.len() as f64).floor() as usize);
        }
        let global = magnitude_masks(&refs, ratio, PruneScope::Global).unwrap();
        let n: usize = ts.iter().map(Vec::len).sum();
        let z: usize = global.iter().map(|m| zeros(m)).sum();
        prop_assert_eq!(z, (ratio * n as f64).floor() as usize);
    }

    #[test]
    fn masks_are_scale_invariant(ts in tensors(), ri in 0usize..5, global in any::<bool>()) {
        let ratio = RATIOS[ri];
        let scope = if global { PruneScope::Global } else { PruneScope::PerLayer };
        let scaled: Vec<Vec<f64>> = ts.iter().map(|t| t.iter().map(|v| 3.0 * v).collect()).collect();
        let a: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(
            magnitude_masks(&a, ratio, scope).unwrap(),
            magnitude_masks(&b, ratio, scope).unwrap()
        );
    }

    #[test]
    fn kept_weights_dominate_pruned_ones(t in prop::collection::vec(-10.0f64..10.0, 1..300), ri in 0usize..5) {
        let mask = &magnitude_masks(&[&t], RATIOS[ri], PruneScope::PerLayer).unwrap()[0];
        let kept_min = t.iter().zip(mask).filter(|(_, &k)| k).map(|(v, _)| v.abs()).fold(f64::INFINITY, f64::min);
        let pruned_max = t.iter().zip(mask).filter(|(_, &k)| !k).map(|(v, _)| v.abs()).fold(0.0, f64::max);
        prop_assert!(pruned_max <= kept_min);
    }
}

#[test]
fn lenet_compression_matches_ratio() {
    let model = Model::build_lenet5(0);
    for (ratio, label) in [(0.9, "10×"), (0.95, "20×"), (0.99, "100×")] {
        let mask = magnitude_prune(&model.snapshot(), ratio, PruneScope::PerLayer).unwrap();
        let mut m = model.clone();
        apply_mask(&mut m, &mask).unwrap();
        let report = sparsity_report(&m, &mask).unwrap();
        assert_eq!(report.compression_label(), label);
        assert_eq!(report.nonzero_params, mask.keep_count());
    }
}

#[test]
fn masked_weights_stay_zero_through_100_momentum_steps() {
    let data = synthetic_blobs(50, 4, 6, 2.0, 3).unwrap();
    let model = Model::build_mlp(&[6, 24, 24, 4], 3).unwrap();
    let snapshot = model.snapshot();
    let mask = magnitude_prune(&snapshot, 0.9, PruneScope::PerLayer).unwrap();
    // 200 examples in batches of 20 for 10 epochs: 100 optimizer steps.
    let config = TrainConfig {
        epochs: 10,
        batch_size: 20,
        learning_rate: 0.05,
        optimizer: OptimizerSpec::of_kind("sgd-momentum"),
        ..TrainConfig::default()
    };
    assert!(config.optimizer.effective_weight_decay() > 0.0);
    let (tuned, history) = fine_tune(&snapshot, &mask, None, &data, None, &config, true).unwrap();
    assert_eq!(history.records.len(), 10);
    let mut moved = false;
    for layer in tuned.layers() {
        let m = mask.get(&format!("{}.weight", layer.name)).expect("every weight is masked");
        let before = &snapshot_weight(&snapshot, &layer.name);
        for ((&w, &keep), &w0) in layer.weight.data().iter().zip(m).zip(before.iter()) {
            if keep {
                moved |= w != w0;
            } else {
                assert_eq!(w.to_bits(), 0.0f64.to_bits(), "{} has a nonzero pruned weight", layer.name);
            }
        }
    }
    assert!(moved, "fine-tuning never changed a kept weight");
}

fn snapshot_weight(snapshot: &sparseact::network::NetworkSnapshot, layer: &str) -> Vec<f64> {
    let model = Model::from_snapshot(snapshot).unwrap();
    model
        .layers()
        .iter()
        .find(|l| l.name == layer)
        .map(|l| l.weight.data().to_vec())
        .unwrap()
}
