use rand::seq::SliceRandom;

use super::{build_optimizer, build_schedule, EpochRecord, FitHistory, Optimizer, ScheduleContext, TrainConfig};
use crate::activations::UnaryOperatorId;
use crate::data::Dataset;
use crate::engine::Graph;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkSnapshot};
use crate::pruning::{apply_mask, reapply_installed_masks, PruningMask};
use crate::rng;

/// Examples per forward pass when only evaluating.
const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean softmax cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientFlow {
    /// Squared gradient norm over every trainable parameter.
    pub global: f64,
    /// Squared gradient norm of each activated layer's weight and bias.
    pub per_layer: Vec<f64>,
}

fn check_inputs(model: &Model, data: &Dataset) -> Result<()> {
    let expected: usize = match model.architecture() {
        crate::network::Architecture::Lenet5 => 28 * 28,
        crate::network::Architecture::Mlp { sizes } => sizes[0],
    };
    let got: usize = data.example_shape().iter().product();
    if got != expected {
        return Err(Error::Dimension(format!(
            "dataset examples have {got} features, model expects {expected}"
        )));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy of `logits` against `labels`.
fn score(logits: &[f64], labels: &[usize]) -> (f64, usize) {
    let classes = logits.len() / labels.len().max(1);
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        if argmax(row) == label {
            correct += 1;
        }
    }
    (loss, correct)
}

/// Loss and accuracy of `model` on all of `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    check_inputs(model, data)?;
    let mut loss = 0.0;
    let mut correct = 0;
    let positions: Vec<usize> = (0..data.len()).collect();
    for chunk in positions.chunks(EVAL_BATCH) {
        let (x, y) = data.gather(chunk);
        let logits = model.predict(&x, chunk.len())?;
        let (l, c) = score(&logits, &y);
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Squared gradient norm of the mean cross-entropy on one batch. Masked
/// weights contribute nothing; scales count when they are trainable.
pub fn gradient_flow(model: &Model, inputs: &[f64], labels: &[usize]) -> Result<GradientFlow> {
    if labels.is_empty() {
        return Err(Error::Contract("gradient flow needs a nonempty batch".into()));
    }
    let mut g = Graph::with_constants(*model.constants());
    let pass = model.forward(&mut g, inputs, labels.len(), true)?;
    let loss = g.softmax_cross_entropy(pass.logits, labels)?;
    g.backward(loss)?;
    let sq = |id| g.grad(id).map_or(0.0, |gr: &[f64]| gr.iter().map(|v| v * v).sum::<f64>());
    let mut global = 0.0;
    let mut per_layer = Vec::with_capacity(model.depth());
    for (layer, &(w, b)) in model.layers().iter().zip(&pass.params) {
        let s = sq(w) + sq(b);
        global += s;
        if layer.activation.is_some() {
            per_layer.push(s);
        }
    }
    for &(a, b) in &pass.scales {
        global += sq(a) + sq(b);
    }
    Ok(GradientFlow { global, per_layer })
}

/// Applies one optimizer step from the gradients recorded on `g`.
fn apply_step(
    model: &mut Model,
    g: &Graph,
    pass: &crate::network::ForwardPass,
    opt: &mut dyn Optimizer,
    lr: f64,
    train_scales: bool,
) {
    opt.begin_step();
    let mut slot = 0;
    for (layer, &(w, b)) in model.layers_mut().iter_mut().zip(&pass.params) {
        for (tensor, id) in [(&mut layer.weight, w), (&mut layer.bias, b)] {
            match g.grad(id) {
                Some(grad) => opt.update(slot, tensor.data_mut(), grad, lr, true),
                None => {
                    let zeros = vec![0.0; tensor.numel()];
                    opt.update(slot, tensor.data_mut(), &zeros, lr, true);
                }
            }
            slot += 1;
        }
    }
    if train_scales {
        for (act, &(a, b)) in model.activations_mut().iter_mut().zip(&pass.scales) {
            for (value, id) in [(&mut act.alpha, a), (&mut act.beta, b)] {
                let grad = g.grad(id).map_or(0.0, |gr| gr[0]);
                let mut p = [*value];
                opt.update(slot, &mut p, &[grad], lr, false);
                *value = p[0];
                slot += 1;
            }
        }
    }
    reapply_installed_masks(model);
}

/// Trains `model` in place on `train` under `config`, recording one
/// [`EpochRecord`] per epoch. Masks installed on the model are enforced after
/// every step; with `train_scales` every activation's `(alpha, beta)` is
/// optimized too (without weight decay).
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    train_scales: bool,
) -> Result<FitHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    check_inputs(model, train)?;
    model.set_scales_trainable(train_scales);
    reapply_installed_masks(model);
    let schedule = build_schedule(&config.scheduler)?;
    let mut opt = build_optimizer(&config.optimizer)?;
    let probe: Vec<usize> = (0..train.len().min(config.batch_size)).collect();
    let (probe_x, probe_y) = train.gather(&probe);
    let mut history = FitHistory {
        layers: model
            .layers()
            .iter()
            .filter(|l| l.activation.is_some())
            .map(|l| l.name.clone())
            .collect(),
        records: Vec::with_capacity(config.epochs),
    };
    let mut monitored = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = schedule.lr(&ScheduleContext {
            epoch,
            base_lr: config.learning_rate,
            total_epochs: config.epochs,
            metrics: &monitored,
        });
        let mut shuffle = rng::stream(config.seed, "shuffle", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train.gather(batch);
            let mut g = Graph::with_constants(*model.constants());
            let pass = model.forward(&mut g, &x, batch.len(), true)?;
            let loss_id = g.softmax_cross_entropy(pass.logits, &y)?;
            let loss = g.value(loss_id)[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let (_, c) = score(g.value(pass.logits), &y);
            correct += c;
            loss_sum += loss * batch.len() as f64;
            g.backward(loss_id)?;
            apply_step(model, &g, &pass, opt.as_mut(), lr, train_scales);
        }
        let n = train.len() as f64;
        let train_loss = loss_sum / n;
        if model.activations().iter().any(|a| !a.alpha.is_finite() || !a.beta.is_finite()) {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let val = validation.map(|v| evaluate(model, v)).transpose()?;
        monitored.push(val.map_or(train_loss, |v| v.loss));
        let flow = gradient_flow(model, &probe_x, &probe_y)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc: correct as f64 / n,
            val_loss: val.map(|v| v.loss),
            val_acc: val.map(|v| v.accuracy),
            lr,
            grad_flow: flow.global,
            layer_grad_flow: flow.per_layer,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} acc {:.4} val {:?} lr {lr:.3e}",
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        history.records.push(record);
    }
    Ok(history)
}

/// Trains an unmasked model from its current parameters.
pub fn pretrain(
    model: &mut Model,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(NetworkSnapshot, FitHistory)> {
    if model.layers().iter().any(|l| l.mask.is_some()) {
        return Err(Error::Contract("pretraining expects an unmasked model".into()));
    }
    let history = fit(model, train, validation, config, false)?;
    Ok((model.snapshot(), history))
}

/// Restores `snapshot`, applies `mask`, optionally installs `operators` with
/// unit scales, and retrains with the mask held fixed.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    snapshot: &NetworkSnapshot,
    mask: &PruningMask,
    operators: Option<&[UnaryOperatorId]>,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    train_scales: bool,
) -> Result<(Model, FitHistory)> {
    let mut model = Model::from_snapshot(snapshot)?;
    apply_mask(&mut model, mask)?;
    if let Some(ops) = operators {
        model.set_activations(ops, None)?;
    }
    let history = fit(&mut model, train, validation, config, train_scales)?;
    Ok((model, history))
}
