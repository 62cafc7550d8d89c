//! Shared-weight multi-branch supernet over a search-space subset.
//!
//! Candidate operations are dense blocks `affine -> normalize -> act ->
//! affine`, either full width (`hidden = in * T`) or a low-rank bottleneck
//! (`hidden = in * T / 8`). A layer averages its selected branches, with the
//! identity included on normal layers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, NnError, NormMode, NormStats, Sgd, Tape, Tensor, VarId};
use crate::oracle::{Evaluation, Evaluator};
use crate::resource::{architecture_cost, CostTable};
use crate::seed::{derive_seed, rng_from_seed, Rng};
use crate::space::{
    sample_uniform_architecture, Architecture, GateVector, LayerDecl, LayerRole, OperationDecl, OperationDescriptor,
    SearchSpacePool, SubsetState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::stem_width")]
    pub stem_width: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    /// Width multiplier applied by every reduction layer.
    #[serde(default = "defaults::reduction_factor")]
    pub reduction_factor: usize,
    #[serde(default = "defaults::norm_momentum")]
    pub norm_momentum: f64,
}

mod defaults {
    pub fn input_dim() -> usize {
        16
    }
    pub fn stem_width() -> usize {
        8
    }
    pub fn classes() -> usize {
        4
    }
    pub fn reduction_factor() -> usize {
        2
    }
    pub fn norm_momentum() -> f64 {
        0.1
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_dim: defaults::input_dim(),
            stem_width: defaults::stem_width(),
            classes: defaults::classes(),
            reduction_factor: defaults::reduction_factor(),
            norm_momentum: defaults::norm_momentum(),
        }
    }
}

impl NetworkSpec {
    /// `(in, out)` width of every layer.
    pub fn layer_widths(&self, roles: &[LayerRole]) -> Vec<(usize, usize)> {
        let mut w = self.stem_width;
        roles
            .iter()
            .map(|role| {
                let out = match role {
                    LayerRole::Normal => w,
                    LayerRole::Reduction => w * self.reduction_factor.max(1),
                };
                let pair = (w, out);
                w = out;
                pair
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Dense,
    LowRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchShape {
    pub kind: BranchKind,
    pub activation: Activation,
    pub expansion: usize,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl BranchShape {
    pub fn from_descriptor(op: &OperationDescriptor, input: usize, output: usize) -> Result<Self> {
        let (kind, activation) = match op.kind.as_str() {
            "dense_relu" => (BranchKind::Dense, Activation::Relu),
            "dense_tanh" => (BranchKind::Dense, Activation::Tanh),
            "lowrank_relu" => (BranchKind::LowRank, Activation::Relu),
            "lowrank_tanh" => (BranchKind::LowRank, Activation::Tanh),
            other => return Err(Error::UnsupportedOperation(other.to_string())),
        };
        let expansion = op.params.get("expansion").copied().unwrap_or(1.0);
        if !(expansion >= 1.0 && expansion.fract() == 0.0) {
            return Err(Error::UnsupportedOperation(format!("{} with expansion {expansion}", op.kind)));
        }
        let expansion = expansion as usize;
        let hidden = match kind {
            BranchKind::Dense => input * expansion,
            BranchKind::LowRank => (input * expansion / 8).max(1),
        };
        Ok(Self { kind, activation, expansion, input, hidden, output })
    }

    /// Multiply-accumulates per sample.
    pub fn macs(&self) -> f64 {
        (self.input * self.hidden + self.hidden * self.output) as f64
    }
}

/// The twelve toy operation kinds: {dense, low-rank} x T in {1, 2, 4} x {relu, tanh}.
pub fn toy_operation_family() -> Vec<OperationDecl> {
    let mut ops = Vec::new();
    for kind in ["dense", "lowrank"] {
        for t in [1.0, 2.0, 4.0] {
            for act in ["relu", "tanh"] {
                ops.push(OperationDecl {
                    kind: format!("{kind}_{act}"),
                    params: BTreeMap::from([("expansion".to_string(), t)]),
                    trainable: true,
                });
            }
        }
    }
    ops
}

/// Layer declarations drawing `ops_per_layer` operations from the toy family;
/// beyond twelve, kinds repeat with a `variant` parameter.
pub fn toy_layer_decls(roles: &[LayerRole], ops_per_layer: usize) -> Vec<LayerDecl> {
    let family = toy_operation_family();
    roles
        .iter()
        .map(|&role| LayerDecl {
            role,
            ops: (0..ops_per_layer)
                .map(|i| {
                    let mut op = family[i % family.len()].clone();
                    if i >= family.len() {
                        op.params.insert("variant".into(), (i / family.len()) as f64);
                    }
                    op
                })
                .collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    /// Thousands of multiply-accumulates per sample.
    Flops,
    /// Synthetic latency in microseconds: sublinear in work plus a fixed
    /// per-kernel launch charge.
    Latency,
}

fn modelled_cost(macs: f64, kernels: f64, model: CostModel) -> f64 {
    match model {
        CostModel::Flops => macs / 1000.0,
        CostModel::Latency => 0.02 * macs.powf(0.85) + 1.5 * kernels,
    }
}

/// Cost table of every operation in the pool; the overhead covers stem and head.
pub fn cost_table(pool: &SearchSpacePool, spec: &NetworkSpec, model: CostModel) -> Result<CostTable> {
    let widths = spec.layer_widths(&pool.roles());
    let final_width = widths.last().map_or(spec.stem_width, |w| w.1);
    let overhead_macs = (spec.input_dim * spec.stem_width + final_width * spec.classes) as f64;
    let unit = match model {
        CostModel::Flops => "kMAC",
        CostModel::Latency => "us",
    };
    let mut table = CostTable::new(unit, modelled_cost(overhead_macs, 2.0, model));
    for (layer, &(i, o)) in pool.layers.iter().zip(&widths) {
        for op in &layer.pool {
            let shape = BranchShape::from_descriptor(op, i, o)?;
            table.insert(op.layer_index, op.slot_index, modelled_cost(shape.macs(), 2.0, model))?;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "dataset_defaults::n_train")]
    pub n_train: usize,
    #[serde(default = "dataset_defaults::n_val")]
    pub n_val: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "dataset_defaults::clusters_per_class")]
    pub clusters_per_class: usize,
    /// Standard deviation of samples around their cluster centre.
    #[serde(default = "dataset_defaults::noise")]
    pub noise: f64,
}

mod dataset_defaults {
    pub fn n_train() -> usize {
        8000
    }
    pub fn n_val() -> usize {
        2000
    }
    pub fn clusters_per_class() -> usize {
        24
    }
    pub fn noise() -> f64 {
        0.45
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: dataset_defaults::n_train(),
            n_val: dataset_defaults::n_val(),
            classes: defaults::classes(),
            input_dim: defaults::input_dim(),
            clusters_per_class: dataset_defaults::clusters_per_class(),
            noise: dataset_defaults::noise(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Seeded Gaussian-mixture classification data with a disjoint train/val split.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub val_x: Tensor,
    pub val_y: Vec<usize>,
    pub classes: usize,
}

impl ToyDataset {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.n_train == 0 || cfg.n_val == 0 || cfg.input_dim == 0 || cfg.clusters_per_class == 0 {
            return Err(Error::Config("dataset needs >= 2 classes and nonempty splits".into()));
        }
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[crate::seed::Purpose::Dataset as u64]));
        let d = cfg.input_dim;
        let centres = Tensor::randn(&[cfg.classes * cfg.clusters_per_class, d], 1.0, &mut rng);
        let total = cfg.n_train + cfg.n_val;
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng);
        let mut xs = Vec::with_capacity(total * d);
        let mut ys = Vec::with_capacity(total);
        for i in 0..total {
            let class = i % cfg.classes;
            let cluster = (i / cfg.classes) % cfg.clusters_per_class;
            let c = &centres.data()[(class * cfg.clusters_per_class + cluster) * d..][..d];
            let noise = Tensor::randn(&[d], cfg.noise, &mut rng);
            xs.extend(c.iter().zip(noise.data()).map(|(a, b)| a + b));
            ys.push(class);
        }
        let all = Tensor::new(vec![total, d], xs)?;
        let train_idx = &order[..cfg.n_train];
        let val_idx = &order[cfg.n_train..];
        Ok(Self {
            train_x: all.gather_rows(train_idx),
            train_y: train_idx.iter().map(|&i| ys[i]).collect(),
            val_x: all.gather_rows(val_idx),
            val_y: val_idx.iter().map(|&i| ys[i]).collect(),
            classes: cfg.classes,
        })
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_y.len()
    }

    pub fn train_batch(&self, size: usize, rng: &mut Rng) -> Batch {
        let idx = rand::seq::index::sample(rng, self.train_len(), size.min(self.train_len())).into_vec();
        Batch { x: self.train_x.gather_rows(&idx), labels: idx.iter().map(|&i| self.train_y[i]).collect() }
    }

    pub fn val_batch(&self, size: usize, rng: &mut Rng) -> Batch {
        let idx = rand::seq::index::sample(rng, self.val_len(), size.min(self.val_len())).into_vec();
        Batch { x: self.val_x.gather_rows(&idx), labels: idx.iter().map(|&i| self.val_y[i]).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Stem(u8),
    Head(u8),
    Branch { layer: usize, slot: usize, tensor: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub shape: BranchShape,
    /// `[w1, b1, gamma, beta, w2, b2]`
    pub tensors: [Tensor; 6],
}

pub type NormBank = BTreeMap<(usize, usize), NormStats>;

#[derive(Clone, Debug, PartialEq)]
pub struct SharedWeights {
    pub spec: NetworkSpec,
    pub roles: Vec<LayerRole>,
    pub widths: Vec<(usize, usize)>,
    stem: [Tensor; 2],
    head: [Tensor; 2],
    branches: BTreeMap<(usize, usize), BranchParams>,
    pub norm: NormBank,
}

/// Record of one forward pass on a tape.
#[derive(Debug)]
pub struct ForwardTrace {
    pub layer_inputs: Vec<VarId>,
    pub layer_outputs: Vec<VarId>,
    pub logits: VarId,
    pub params: Vec<(ParamKey, VarId)>,
}

fn he(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng)
}

impl SharedWeights {
    /// Fresh parameters for the given operations. Each block's init depends
    /// only on `(seed, layer, slot)`.
    pub fn initialize(
        pool: &SearchSpacePool,
        ops: impl IntoIterator<Item = (usize, usize)>,
        spec: &NetworkSpec,
        seed: u64,
    ) -> Result<Self> {
        let roles = pool.roles();
        let widths = spec.layer_widths(&roles);
        let mut rng = rng_from_seed(derive_seed(seed, &[u64::MAX]));
        let stem = [he(spec.input_dim, spec.stem_width, &mut rng), Tensor::zeros(&[spec.stem_width])];
        let last = widths.last().map_or(spec.stem_width, |w| w.1);
        let head = [he(last, spec.classes, &mut rng), Tensor::zeros(&[spec.classes])];
        let mut branches = BTreeMap::new();
        let mut norm = BTreeMap::new();
        for (layer, slot) in ops {
            let op = pool
                .descriptor(layer, slot)
                .ok_or_else(|| Error::Config(format!("no operation at layer {layer} slot {slot}")))?;
            let (i, o) = widths[layer];
            let shape = BranchShape::from_descriptor(op, i, o)?;
            let mut rng = rng_from_seed(derive_seed(seed, &[layer as u64, slot as u64]));
            let tensors = [
                he(i, shape.hidden, &mut rng),
                Tensor::zeros(&[shape.hidden]),
                Tensor::filled(&[shape.hidden], 1.0),
                Tensor::zeros(&[shape.hidden]),
                he(shape.hidden, o, &mut rng),
                Tensor::zeros(&[o]),
            ];
            branches.insert((layer, slot), BranchParams { shape, tensors });
            norm.insert((layer, slot), NormStats::new(shape.hidden, spec.norm_momentum));
        }
        Ok(Self { spec: spec.clone(), roles, widths, stem, head, branches, norm })
    }

    pub fn for_subset(pool: &SearchSpacePool, subset: &SubsetState, spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Self::initialize(pool, subset.active_ops().collect::<Vec<_>>(), spec, seed)
    }

    pub fn branch(&self, layer: usize, slot: usize) -> Option<&BranchParams> {
        self.branches.get(&(layer, slot))
    }

    pub fn branch_keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.branches.keys().copied()
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::Stem(i) => &self.stem[i as usize],
            ParamKey::Head(i) => &self.head[i as usize],
            ParamKey::Branch { layer, slot, tensor } => &self.branches[&(layer, slot)].tensors[tensor as usize],
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::Stem(i) => &mut self.stem[i as usize],
            ParamKey::Head(i) => &mut self.head[i as usize],
            ParamKey::Branch { layer, slot, tensor } => {
                &mut self.branches.get_mut(&(layer, slot)).expect("branch exists").tensors[tensor as usize]
            }
        }
    }

    /// Every parameter tensor with a stable name, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.w".to_string(), &self.stem[0]),
            ("stem.b".to_string(), &self.stem[1]),
            ("head.w".to_string(), &self.head[0]),
            ("head.b".to_string(), &self.head[1]),
        ];
        const NAMES: [&str; 6] = ["w1", "b1", "gamma", "beta", "w2", "b2"];
        for ((l, s), b) in &self.branches {
            for (name, t) in NAMES.iter().zip(&b.tensors) {
                out.push((format!("layer{l}.slot{s}.{name}"), t));
            }
        }
        out
    }

    pub fn checkpoint_hash(&self) -> String {
        nn::checkpoint_hash(&self.named_tensors())
    }

    fn leaf(&self, tape: &mut Tape, key: ParamKey, track: bool, params: &mut Vec<(ParamKey, VarId)>) -> VarId {
        let v = tape.leaf(self.param(key).clone(), track);
        if track {
            params.push((key, v));
        }
        v
    }

    fn branch_forward(
        &self,
        tape: &mut Tape,
        x: VarId,
        layer: usize,
        slot: usize,
        stats: &mut NormStats,
        track: bool,
        params: &mut Vec<(ParamKey, VarId)>,
    ) -> Result<VarId> {
        let b = self
            .branches
            .get(&(layer, slot))
            .ok_or_else(|| Error::Config(format!("no weights for layer {layer} slot {slot}")))?;
        let key = |tensor| ParamKey::Branch { layer, slot, tensor };
        let p: Vec<VarId> = (0..6).map(|t| self.leaf(tape, key(t), track, params)).collect();
        let h = tape.affine(x, p[0], p[1])?;
        let h = tape.normalize(h, p[2], p[3], stats)?;
        let h = match b.shape.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Tanh => tape.tanh(h)?,
        };
        Ok(tape.affine(h, p[4], p[5])?)
    }

    /// Multi-branch layer output: the average of the selected branches, the
    /// identity branch counted on normal layers.
    pub fn forward_layer(
        &self,
        tape: &mut Tape,
        x: VarId,
        gates: &GateVector,
        norm: &mut NormBank,
        track: bool,
        params: &mut Vec<(ParamKey, VarId)>,
    ) -> Result<VarId> {
        let layer = gates.layer_index;
        let n = gates.branch_count();
        if n == 0 {
            return Err(Error::Config(format!("layer {layer} selects no branch")));
        }
        if gates.identity && gates.selected.is_empty() {
            return Ok(x);
        }
        let mut outs = Vec::with_capacity(n);
        if gates.identity {
            outs.push(x);
        }
        for &slot in &gates.selected {
            let stats = norm
                .get_mut(&(layer, slot))
                .ok_or_else(|| Error::Config(format!("no normalization state for layer {layer} slot {slot}")))?;
            outs.push(self.branch_forward(tape, x, layer, slot, stats, track, params)?);
        }
        let total = tape.sum(&outs)?;
        Ok(tape.scale(total, 1.0 / n as f64)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        arch: &Architecture,
        norm: &mut NormBank,
        track: bool,
    ) -> Result<ForwardTrace> {
        if arch.layers.len() != self.roles.len() {
            return Err(Error::Config(format!("architecture has {} layers, network {}", arch.layers.len(), self.roles.len())));
        }
        let mut params = Vec::new();
        let input = tape.leaf(x.clone(), false);
        let sw = self.leaf(tape, ParamKey::Stem(0), track, &mut params);
        let sb = self.leaf(tape, ParamKey::Stem(1), track, &mut params);
        let mut h = tape.affine(input, sw, sb)?;
        h = tape.relu(h)?;
        let mut layer_inputs = Vec::with_capacity(arch.layers.len());
        let mut layer_outputs = Vec::with_capacity(arch.layers.len());
        for gates in &arch.layers {
            layer_inputs.push(h);
            h = self.forward_layer(tape, h, gates, norm, track, &mut params)?;
            layer_outputs.push(h);
        }
        let hw = self.leaf(tape, ParamKey::Head(0), track, &mut params);
        let hb = self.leaf(tape, ParamKey::Head(1), track, &mut params);
        let logits = tape.affine(h, hw, hb)?;
        Ok(ForwardTrace { layer_inputs, layer_outputs, logits, params })
    }

    /// One SGD step on a fixed architecture. Only the parameters on the
    /// selected path (stem, head, selected branches) change.
    pub fn train_architecture_step(&mut self, arch: &Architecture, batch: &Batch, sgd: &mut Sgd<ParamKey>) -> Result<f64> {
        let mut norm = std::mem::take(&mut self.norm);
        for g in &arch.layers {
            for &s in &g.selected {
                if let Some(st) = norm.get_mut(&(g.layer_index, s)) {
                    st.set_mode(NormMode::Train);
                }
            }
        }
        let mut tape = Tape::new();
        let result = self.forward(&mut tape, &batch.x, arch, &mut norm, true);
        self.norm = norm;
        let trace = result?;
        let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(loss)?;
        for (key, var) in trace.params {
            let g = grads.get(var).ok_or(NnError::NonFinite("missing gradient"))?.clone();
            sgd.step(&key, self.param_mut(key), &g)?;
        }
        Ok(value)
    }

    /// Samples a uniform architecture from the subset and trains it for one step.
    pub fn train_step(&mut self, subset: &SubsetState, batch: &Batch, rng: &mut Rng, sgd: &mut Sgd<ParamKey>) -> Result<f64> {
        let arch = sample_uniform_architecture(subset, rng);
        self.train_architecture_step(&arch, batch, sgd)
    }

    /// Private copy of the normalization state of the branches `arch` uses.
    fn private_norm(&self, arch: &Architecture) -> NormBank {
        arch.selected_ops()
            .filter_map(|k| self.norm.get(&k).map(|s| (k, s.clone())))
            .collect()
    }

    /// Top-1 accuracy on the validation split after recalibrating the selected
    /// branches' statistics on training batches. The weights are not touched.
    pub fn evaluate(&self, arch: &Architecture, data: &ToyDataset, recal: &RecalibrationConfig) -> Result<f64> {
        let mut norm = self.private_norm(arch);
        if recal.batches > 0 {
            norm.values_mut().for_each(|s| s.set_mode(NormMode::Recalibrate));
            let mut rng = rng_from_seed(recal.seed);
            for _ in 0..recal.batches {
                let batch = data.train_batch(recal.batch_size, &mut rng);
                let mut tape = Tape::new();
                self.forward(&mut tape, &batch.x, arch, &mut norm, false)?;
            }
            norm.values_mut().for_each(NormStats::finish_recalibration);
        } else {
            norm.values_mut().for_each(|s| s.set_mode(NormMode::Eval));
        }
        let mut correct = 0usize;
        let chunk = 512;
        for start in (0..data.val_len()).step_by(chunk) {
            let end = (start + chunk).min(data.val_len());
            let x = data.val_x.slice_rows(start, end);
            let mut tape = Tape::new();
            let trace = self.forward(&mut tape, &x, arch, &mut norm, false)?;
            let logits = tape.value(trace.logits);
            let c = logits.cols();
            for (row, &y) in logits.data().chunks(c).zip(&data.val_y[start..end]) {
                let pred = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
                correct += usize::from(pred == y);
            }
        }
        Ok(correct as f64 / data.val_len() as f64)
    }

    /// Per-layer inner products used by the simulated indicator gradient:
    /// `arch_a` is forwarded, `dL/do_a` is taken at every layer output, and
    /// `o_b(X)` is recomputed on the same layer input without gradient.
    pub fn layer_signals(&self, arch_a: &Architecture, arch_b: &Architecture, batch: &Batch) -> Result<(f64, Vec<LayerSignal>)> {
        let mut norm = self.norm.clone();
        norm.values_mut().for_each(|s| s.set_mode(NormMode::Train));
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, &batch.x, arch_a, &mut norm, true)?;
        let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        let mut signals = Vec::with_capacity(arch_a.layers.len());
        let mut unused = Vec::new();
        for (l, (gb, (&input, &output))) in
            arch_b.layers.iter().zip(trace.layer_inputs.iter().zip(&trace.layer_outputs)).enumerate()
        {
            let grad = grads.get(output).ok_or(NnError::NonFinite("missing layer gradient"))?;
            let s_a = grad.dot(tape.value(output));
            let s_b = if *gb == arch_a.layers[l] {
                s_a
            } else {
                let mut side = Tape::new();
                let x = side.leaf(tape.value(input).clone(), false);
                let o_b = self.forward_layer(&mut side, x, gb, &mut norm, false, &mut unused)?;
                grad.dot(side.value(o_b))
            };
            signals.push(LayerSignal { s_a, s_b });
        }
        Ok((tape.value(loss).item(), signals))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSignal {
    /// `<dL/do_a, o_a(X)>`
    pub s_a: f64,
    /// `<dL/do_a, o_b(X)>`
    pub s_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecalibrationConfig {
    #[serde(default = "recal_defaults::batches")]
    pub batches: usize,
    #[serde(default = "recal_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

mod recal_defaults {
    pub fn batches() -> usize {
        16
    }
    pub fn batch_size() -> usize {
        128
    }
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        Self { batches: recal_defaults::batches(), batch_size: recal_defaults::batch_size(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "training_defaults::steps")]
    pub steps: usize,
    #[serde(default = "training_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "training_defaults::lr")]
    pub lr: f64,
    #[serde(default = "training_defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "training_defaults::nesterov")]
    pub nesterov: bool,
    #[serde(default = "training_defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "training_defaults::warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "training_defaults::indicator_lr")]
    pub indicator_lr: f64,
    #[serde(default = "training_defaults::indicator_batch_size")]
    pub indicator_batch_size: usize,
}

mod training_defaults {
    pub fn steps() -> usize {
        1000
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn nesterov() -> bool {
        true
    }
    pub fn weight_decay() -> f64 {
        4e-5
    }
    pub fn warmup_steps() -> usize {
        20
    }
    pub fn indicator_lr() -> f64 {
        0.1
    }
    pub fn indicator_batch_size() -> usize {
        128
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: training_defaults::steps(),
            batch_size: training_defaults::batch_size(),
            lr: training_defaults::lr(),
            momentum: training_defaults::momentum(),
            nesterov: training_defaults::nesterov(),
            weight_decay: training_defaults::weight_decay(),
            warmup_steps: training_defaults::warmup_steps(),
            indicator_lr: training_defaults::indicator_lr(),
            indicator_batch_size: training_defaults::indicator_batch_size(),
        }
    }
}

impl TrainingConfig {
    pub fn sgd(&self) -> Result<Sgd<ParamKey>> {
        Ok(Sgd::new(self.lr, self.momentum, self.nesterov, self.weight_decay)?)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        nn::cosine_lr(step, self.steps, self.warmup_steps, self.lr)
    }
}

/// Trains `arch` alone from scratch and returns its validation accuracy.
pub fn train_standalone(
    pool: &SearchSpacePool,
    arch: &Architecture,
    spec: &NetworkSpec,
    data: &ToyDataset,
    training: &TrainingConfig,
    recal: &RecalibrationConfig,
    seed: u64,
) -> Result<f64> {
    let ops: BTreeSet<(usize, usize)> = arch.selected_ops().collect();
    let mut weights = SharedWeights::initialize(pool, ops, spec, seed)?;
    let mut sgd = training.sgd()?;
    let mut rng = rng_from_seed(derive_seed(seed, &[crate::seed::Purpose::Batches as u64]));
    for step in 0..training.steps {
        sgd.set_lr(training.lr_at(step))?;
        let batch = data.train_batch(training.batch_size, &mut rng);
        weights.train_architecture_step(arch, &batch, &mut sgd)?;
    }
    weights.evaluate(arch, data, recal)
}

/// Evaluator backed by trained shared weights.
pub struct SupernetEvaluator<'a> {
    pub weights: &'a SharedWeights,
    pub data: &'a ToyDataset,
    pub costs: &'a CostTable,
    pub recal: RecalibrationConfig,
}

impl Evaluator for SupernetEvaluator<'_> {
    fn evaluate(&self, arch: &Architecture) -> Result<Evaluation> {
        let accuracy = self.weights.evaluate(arch, self.data, &self.recal)?;
        let cost = architecture_cost(arch, self.costs)?;
        Ok(Evaluation { accuracy, cost })
    }
}
