//! Model definitions (LeNet-5 and MLPs), activation slots and snapshots.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::activations::{OperatorConstants, ParametricActivation, UnaryOperatorId};
use crate::engine::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    Lenet5,
    Mlp { sizes: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { stride: usize, padding: usize },
    Dense,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    /// Index into the model's activation slots, if followed by an activation.
    pub activation: Option<usize>,
    /// Max-pool window applied after the activation.
    pub pool: Option<usize>,
    /// Flatten the input to `[batch, features]` before this layer.
    pub flatten_input: bool,
    /// Frozen pruning mask of `weight` (true = kept).
    pub mask: Option<Arc<[bool]>>,
}

struct LayerSpec {
    name: String,
    kind: LayerKind,
    weight_shape: Vec<usize>,
    pool: Option<usize>,
    flatten_input: bool,
    activated: bool,
}

/// A feed-forward classifier with one activation slot per hidden layer.
#[derive(Debug, Clone)]
pub struct Model {
    architecture: Architecture,
    layers: Vec<Layer>,
    slots: Vec<ParametricActivation>,
    constants: OperatorConstants,
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: TensorId,
    /// `(weight, bias)` per layer.
    pub params: Vec<(TensorId, TensorId)>,
    /// `(alpha, beta)` per activation slot.
    pub scales: Vec<(TensorId, TensorId)>,
    /// Pre-activation output of each layer that feeds an activation slot.
    pub hidden: Vec<TensorId>,
}

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

impl Model {
    fn assemble(architecture: Architecture, specs: Vec<LayerSpec>, seed: u64) -> Model {
        let mut layers = Vec::with_capacity(specs.len());
        let mut slots = 0;
        for (i, spec) in specs.into_iter().enumerate() {
            let mut r = rng::stream(seed, "init", i as u64);
            let w = &spec.weight_shape;
            let (fan_in, out) = match spec.kind {
                LayerKind::Conv2d { .. } => (w[1] * w[2] * w[3], w[0]),
                LayerKind::Dense => (w[0], w[1]),
            };
            let activation = spec.activated.then(|| {
                slots += 1;
                slots - 1
            });
            layers.push(Layer {
                name: spec.name,
                kind: spec.kind,
                weight: kaiming_uniform(spec.weight_shape, fan_in, &mut r),
                bias: Tensor::zeros(vec![out]),
                activation,
                pool: spec.pool,
                flatten_input: spec.flatten_input,
                mask: None,
            });
        }
        Model {
            architecture,
            layers,
            slots: vec![ParametricActivation::fixed(UnaryOperatorId::ReLU); slots],
            constants: OperatorConstants::default(),
        }
    }

    pub fn build(architecture: &Architecture, seed: u64) -> Result<Model> {
        match architecture {
            Architecture::Lenet5 => Ok(Model::build_lenet5(seed)),
            Architecture::Mlp { sizes } => Model::build_mlp(sizes, seed),
        }
    }

    /// conv(1->6, 5x5, pad 2) -> act -> pool2 -> conv(6->16, 5x5) -> act ->
    /// pool2 -> dense(400->120) -> act -> dense(120->84) -> act -> dense(84->10).
    pub fn build_lenet5(seed: u64) -> Model {
        let spec = |name: &str, kind, weight_shape: &[usize], pool, flatten_input, activated| LayerSpec {
            name: name.to_string(),
            kind,
            weight_shape: weight_shape.to_vec(),
            pool,
            flatten_input,
            activated,
        };
        let conv = |padding| LayerKind::Conv2d { stride: 1, padding };
        let specs = vec![
            spec("conv1", conv(2), &[6, 1, 5, 5], Some(2), false, true),
            spec("conv2", conv(0), &[16, 6, 5, 5], Some(2), false, true),
            spec("fc1", LayerKind::Dense, &[400, 120], None, true, true),
            spec("fc2", LayerKind::Dense, &[120, 84], None, false, true),
            spec("fc3", LayerKind::Dense, &[84, 10], None, false, false),
        ];
        Model::assemble(Architecture::Lenet5, specs, seed)
    }

    /// Dense stack over `sizes`, activation slots between consecutive layers.
    pub fn build_mlp(sizes: &[usize], seed: u64) -> Result<Model> {
        if sizes.len() < 2 {
            return Err(Error::Contract(format!("an MLP needs at least 2 layer sizes, got {}", sizes.len())));
        }
        if sizes.contains(&0) {
            return Err(Error::Contract("MLP layer sizes must be positive".into()));
        }
        let n = sizes.len() - 1;
        let specs = (0..n)
            .map(|i| LayerSpec {
                name: format!("fc{}", i + 1),
                kind: LayerKind::Dense,
                weight_shape: vec![sizes[i], sizes[i + 1]],
                pool: None,
                flatten_input: i == 0,
                activated: i + 1 < n,
            })
            .collect();
        Ok(Model::assemble(Architecture::Mlp { sizes: sizes.to_vec() }, specs, seed))
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    /// Number of activation slots.
    pub fn depth(&self) -> usize {
        self.slots.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[ParametricActivation] {
        &self.slots
    }

    pub fn activations_mut(&mut self) -> &mut [ParametricActivation] {
        &mut self.slots
    }

    pub fn constants(&self) -> &OperatorConstants {
        &self.constants
    }

    pub fn set_constants(&mut self, constants: OperatorConstants) {
        self.constants = constants;
    }

    /// Total weight and bias count (activation scales excluded).
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// `(name, tensor)` for every parameter, weights before biases, layer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), &l.weight),
                    (format!("{}.bias", l.name), &l.bias),
                ]
            })
            .collect()
    }

    /// Installs operators `ops` with scales from `scales` or `(1, 1)`. Scales
    /// become frozen; see [`Model::set_scales_trainable`].
    pub fn set_activations(&mut self, ops: &[UnaryOperatorId], scales: Option<&[(f64, f64)]>) -> Result<()> {
        if ops.len() != self.depth() {
            return Err(Error::Contract(format!(
                "chromosome length {} does not match {} activation slots",
                ops.len(),
                self.depth()
            )));
        }
        if let Some(s) = scales {
            if s.len() != self.depth() {
                return Err(Error::Contract(format!(
                    "{} scale pairs for {} activation slots",
                    s.len(),
                    self.depth()
                )));
            }
        }
        let mut slots = Vec::with_capacity(ops.len());
        for (i, &op) in ops.iter().enumerate() {
            let (a, b) = scales.map_or((1.0, 1.0), |s| s[i]);
            slots.push(ParametricActivation::new(op, a, b, false)?);
        }
        self.slots = slots;
        Ok(())
    }

    pub fn set_scales_trainable(&mut self, trainable: bool) {
        self.slots.iter_mut().for_each(|s| s.trainable = trainable);
    }

    pub fn scales(&self) -> Vec<(f64, f64)> {
        self.slots.iter().map(|s| (s.alpha, s.beta)).collect()
    }

    pub fn operators(&self) -> Vec<UnaryOperatorId> {
        self.slots.iter().map(|s| s.op).collect()
    }

    fn input_shape(&self, batch: usize) -> Vec<usize> {
        match &self.architecture {
            Architecture::Lenet5 => vec![batch, 1, 28, 28],
            Architecture::Mlp { sizes } => vec![batch, sizes[0]],
        }
    }

    /// Records a forward pass of `inputs` (`batch` examples, flattened) on `g`.
    /// When `trainable` is set, weights and biases require gradients (masked
    /// entries excluded) and trainable scales do too.
    pub fn forward(&self, g: &mut Graph, inputs: &[f64], batch: usize, trainable: bool) -> Result<ForwardPass> {
        let x = Tensor::new(self.input_shape(batch), inputs.to_vec())?;
        let mut h = g.leaf(x);
        let mut params = Vec::with_capacity(self.layers.len());
        let mut scales = Vec::with_capacity(self.slots.len());
        let mut hidden = Vec::with_capacity(self.slots.len());
        for layer in &self.layers {
            let mut w = layer.weight.clone();
            let mut b = layer.bias.clone();
            if trainable {
                w = w.with_grad();
                b = b.with_grad();
                if let Some(m) = &layer.mask {
                    w = w.with_grad_mask(Arc::clone(m))?;
                }
            }
            let (w, b) = (g.leaf(w), g.leaf(b));
            params.push((w, b));
            if layer.flatten_input {
                h = g.flatten(h)?;
            }
            h = match layer.kind {
                LayerKind::Conv2d { stride, padding } => g.conv2d(h, w, b, stride, padding)?,
                LayerKind::Dense => g.dense(h, w, b)?,
            };
            if let Some(slot) = layer.activation {
                hidden.push(h);
                let mut act = self.slots[slot];
                act.trainable = trainable && act.trainable;
                let (out, a, bt) = g.parametric_activation(h, &act)?;
                scales.push((a, bt));
                h = out;
            }
            if let Some(size) = layer.pool {
                h = g.max_pool2d(h, size)?;
            }
        }
        Ok(ForwardPass {
            logits: h,
            params,
            scales,
            hidden,
        })
    }

    /// Logits for a batch, without gradient bookkeeping.
    pub fn predict(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut g = Graph::with_constants(self.constants);
        let pass = self.forward(&mut g, inputs, batch, false)?;
        Ok(g.take(pass.logits).into_data())
    }

    pub fn snapshot(&self) -> NetworkSnapshot {
        NetworkSnapshot {
            architecture: self.architecture.clone(),
            constants: self.constants,
            activations: self.slots.clone(),
            tensors: self
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            masks: self
                .layers
                .iter()
                .filter_map(|l| {
                    l.mask.as_ref().map(|m| NamedMask {
                        name: format!("{}.weight", l.name),
                        bits: m.to_vec(),
                    })
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: &NetworkSnapshot) -> Result<Model> {
        let mut model = Model::build(&snapshot.architecture, 0)?;
        model.constants = snapshot.constants;
        if snapshot.activations.len() != model.depth() {
            return Err(Error::Contract(format!(
                "snapshot has {} activation specs for {} slots",
                snapshot.activations.len(),
                model.depth()
            )));
        }
        model.slots = snapshot.activations.clone();
        let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let found: Vec<&str> = snapshot.tensors.iter().map(|t| t.name.as_str()).collect();
        if expected != found {
            return Err(Error::Contract(format!(
                "snapshot tensors {found:?} do not match model parameters {expected:?}"
            )));
        }
        for (layer, pair) in model.layers.iter_mut().zip(snapshot.tensors.chunks_exact(2)) {
            for (target, nt) in [(&mut layer.weight, &pair[0]), (&mut layer.bias, &pair[1])] {
                if target.shape() != nt.shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "{} has shape {:?}, model expects {:?}",
                        nt.name,
                        nt.shape,
                        target.shape()
                    )));
                }
                *target = Tensor::new(nt.shape.clone(), nt.data.clone())?;
            }
        }
        for m in &snapshot.masks {
            let layer = model
                .layers
                .iter_mut()
                .find(|l| format!("{}.weight", l.name) == m.name)
                .ok_or_else(|| Error::Contract(format!("mask for unknown tensor {}", m.name)))?;
            if m.bits.len() != layer.weight.numel() {
                return Err(Error::Dimension(format!(
                    "mask {} has {} bits for {} weights",
                    m.name,
                    m.bits.len(),
                    layer.weight.numel()
                )));
            }
            layer.mask = Some(Arc::from(m.bits.clone()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedMask {
    pub name: String,
    pub bits: Vec<bool>,
}

/// Immutable copy of a model's parameters, activation specs and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSnapshot {
    pub architecture: Architecture,
    pub constants: OperatorConstants,
    pub activations: Vec<ParametricActivation>,
    pub tensors: Vec<NamedTensor>,
    pub masks: Vec<NamedMask>,
}

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SPACTSNP";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    architecture: Architecture,
    constants: OperatorConstants,
    activations: Vec<ParametricActivation>,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    name: String,
    len: usize,
}

impl NetworkSnapshot {
    /// Binary container:
    ///
    /// ```text
    /// magic "SPACTSNP" | version u32 LE | header length u64 LE | header JSON
    /// | f64 LE payload of each tensor, header order
    /// | LSB-first bitset of each mask, ceil(len / 8) bytes, header order
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = SnapshotHeader {
            architecture: self.architecture.clone(),
            constants: self.constants,
            activations: self.activations.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            masks: self
                .masks
                .iter()
                .map(|m| MaskEntry {
                    name: m.name.clone(),
                    len: m.bits.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in &self.masks {
            let mut bytes = vec![0u8; m.bits.len().div_ceil(8)];
            for (i, &b) in m.bits.iter().enumerate() {
                if b {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0, path };
        if cursor.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::format(path, "not a network snapshot (bad magic)"));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(Error::format(path, format!("unsupported snapshot version {version}")));
        }
        let hlen = u64::from_le_bytes(cursor.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: SnapshotHeader = serde_json::from_slice(cursor.take(hlen)?)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = cursor.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        let mut masks = Vec::with_capacity(header.masks.len());
        for entry in header.masks {
            let raw = cursor.take(entry.len.div_ceil(8))?;
            let bits = (0..entry.len).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
            masks.push(NamedMask { name: entry.name, bits });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - cursor.pos)));
        }
        Ok(NetworkSnapshot {
            architecture: header.architecture,
            constants: header.constants,
            activations: header.activations,
            tensors,
            masks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        NetworkSnapshot::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated snapshot at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
