//! One-hidden-layer classifier behind the feature gates.
//!
//! The network is `softmax(relu((x * z) W1 + b1) W2 + b2)` where `z` is the
//! gate vector. Forward and backward passes are written out by hand so the
//! gate logits receive exact gradients alongside the weights.
//!
//! Matrices are stored row-major in flat vectors: `W1` is `d x H` (entry
//! `i * H + j`), `W2` is `H x C`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adc::{self, AdcConfig};
use crate::analog::{self, AnalogConfig};
use crate::error::{Error, Result};
use crate::gating::{anneal_gamma, sigmoid, GammaSchedule, GateLayer, GateSample};
use crate::rng;
use crate::signal::{self, FeatureId, Window};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Arch {
    pub fn num_weights(&self) -> usize {
        self.inputs * self.hidden + self.hidden * self.classes
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + self.hidden + self.classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    fn zeros(arch: Arch) -> Self {
        Params {
            w1: vec![0.0; arch.inputs * arch.hidden],
            b1: vec![0.0; arch.hidden],
            w2: vec![0.0; arch.hidden * arch.classes],
            b2: vec![0.0; arch.classes],
        }
    }

    /// `W1` followed by `W2`, the ranking domain for magnitude pruning.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.w2).copied().collect()
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Binary keep-mask over the weights (biases are never masked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub w1: Vec<bool>,
    pub w2: Vec<bool>,
}

impl Mask {
    pub fn ones(arch: Arch) -> Self {
        Mask {
            w1: vec![true; arch.inputs * arch.hidden],
            w2: vec![true; arch.hidden * arch.classes],
        }
    }

    /// Splits a flat `W1 ++ W2` mask.
    pub fn from_flat(arch: Arch, flat: &[bool]) -> Result<Self> {
        if flat.len() != arch.num_weights() {
            return Err(Error::Usage(format!(
                "mask has {} entries, the network has {} weights",
                flat.len(),
                arch.num_weights()
            )));
        }
        let (a, b) = flat.split_at(arch.inputs * arch.hidden);
        Ok(Mask {
            w1: a.to_vec(),
            w2: b.to_vec(),
        })
    }

    pub fn flat(&self) -> Vec<bool> {
        self.w1.iter().chain(&self.w2).copied().collect()
    }

    pub fn kept(&self) -> usize {
        self.w1.iter().chain(&self.w2).filter(|&&k| k).count()
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sparsity(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            1.0 - self.kept() as f64 / self.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    arch: Arch,
    params: Params,
    init_snapshot: Params,
    mask: Mask,
    /// Bumped on every parameter change so stale caches are detected.
    #[serde(skip)]
    version: u64,
}

pub const DEFAULT_HIDDEN: usize = 100;

pub fn init_model(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Result<MlpModel> {
    if inputs == 0 || hidden == 0 || classes == 0 {
        return Err(Error::Config(format!(
            "network dimensions must be positive, got {inputs}x{hidden}x{classes}"
        )));
    }
    let arch = Arch {
        inputs,
        hidden,
        classes,
    };
    let mut r = rng::seeded(seed);
    let he = (6.0 / inputs as f64).sqrt();
    let glorot = (6.0 / (hidden + classes) as f64).sqrt();
    let mut params = Params::zeros(arch);
    for w in &mut params.w1 {
        *w = r.gen_range(-he..he);
    }
    for w in &mut params.w2 {
        *w = r.gen_range(-glorot..glorot);
    }
    Ok(MlpModel {
        arch,
        init_snapshot: params.clone(),
        params,
        mask: Mask::ones(arch),
        version: 0,
    })
}

impl MlpModel {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn init_snapshot(&self) -> &Params {
        &self.init_snapshot
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the parameters. Masked weights are re-zeroed when
    /// the guard is dropped.
    pub fn params_mut(&mut self) -> ParamsGuard<'_> {
        self.version += 1;
        ParamsGuard { model: self }
    }

    pub fn set_params(&mut self, params: Params) -> Result<()> {
        let fresh = Params::zeros(self.arch);
        if params.w1.len() != fresh.w1.len()
            || params.b1.len() != fresh.b1.len()
            || params.w2.len() != fresh.w2.len()
            || params.b2.len() != fresh.b2.len()
        {
            return Err(Error::Usage("parameter shapes do not match the architecture".into()));
        }
        self.params = params;
        self.version += 1;
        self.apply_mask();
        Ok(())
    }

    /// Installs a mask and rewinds every weight to `init_snapshot * mask`.
    pub fn rewind(&mut self, mask: Mask) -> Result<()> {
        if mask.w1.len() != self.params.w1.len() || mask.w2.len() != self.params.w2.len() {
            return Err(Error::Usage("mask shape does not match the network".into()));
        }
        self.mask = mask;
        self.params = self.init_snapshot.clone();
        self.version += 1;
        self.apply_mask();
        Ok(())
    }

    fn apply_mask(&mut self) {
        for (w, &k) in self.params.w1.iter_mut().zip(&self.mask.w1) {
            if !k {
                *w = 0.0;
            }
        }
        for (w, &k) in self.params.w2.iter_mut().zip(&self.mask.w2) {
            if !k {
                *w = 0.0;
            }
        }
    }

    /// Network outputs for an already-gated batch.
    pub fn forward(&self, gated: &[Vec<f64>]) -> Result<ForwardCache> {
        let Arch {
            inputs: d,
            hidden: h,
            classes: c,
        } = self.arch;
        let p = &self.params;
        let b = gated.len();
        let mut x = Vec::with_capacity(b * d);
        for row in gated {
            if row.len() != d {
                return Err(Error::Usage(format!(
                    "input row has {} features, the network expects {d}",
                    row.len()
                )));
            }
            x.extend_from_slice(row);
        }
        let mut pre = vec![0.0; b * h];
        let mut hidden = vec![0.0; b * h];
        let mut logits = vec![0.0; b * c];
        let mut probs = Vec::with_capacity(b);
        for n in 0..b {
            let xr = &x[n * d..(n + 1) * d];
            let pr = &mut pre[n * h..(n + 1) * h];
            pr.copy_from_slice(&p.b1);
            for (i, &xi) in xr.iter().enumerate() {
                if xi != 0.0 {
                    for (acc, &w) in pr.iter_mut().zip(&p.w1[i * h..(i + 1) * h]) {
                        *acc += xi * w;
                    }
                }
            }
            let hr = &mut hidden[n * h..(n + 1) * h];
            for (o, &v) in hr.iter_mut().zip(pr.iter()) {
                *o = v.max(0.0);
            }
            let lr = &mut logits[n * c..(n + 1) * c];
            lr.copy_from_slice(&p.b2);
            for (j, &hj) in hr.iter().enumerate() {
                if hj != 0.0 {
                    for (acc, &w) in lr.iter_mut().zip(&p.w2[j * c..(j + 1) * c]) {
                        *acc += hj * w;
                    }
                }
            }
            probs.push(softmax(lr));
        }
        Ok(ForwardCache {
            version: self.version,
            batch: b,
            x,
            pre,
            hidden,
            logits,
            probs,
        })
    }
}

/// Write guard returned by [`MlpModel::params_mut`].
pub struct ParamsGuard<'a> {
    model: &'a mut MlpModel,
}

impl std::ops::Deref for ParamsGuard<'_> {
    type Target = Params;
    fn deref(&self) -> &Params {
        &self.model.params
    }
}

impl std::ops::DerefMut for ParamsGuard<'_> {
    fn deref_mut(&mut self) -> &mut Params {
        &mut self.model.params
    }
}

impl Drop for ParamsGuard<'_> {
    fn drop(&mut self) {
        self.model.apply_mask();
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Activations of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Mean cross-entropy computed from the logits (log-sum-exp form).
    pub fn cross_entropy(&self, labels: &[usize]) -> f64 {
        if self.batch == 0 {
            return 0.0;
        }
        let c = self.logits.len() / self.batch;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &y)| -log_softmax_at(&self.logits[n * c..(n + 1) * c], y))
            .sum();
        total / self.batch as f64
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }
}

/// Mean cross-entropy of `probs` plus `lambda * cost_loss(layer)`.
pub fn total_loss(probs: &[Vec<f64>], labels: &[usize], layer: &GateLayer) -> f64 {
    let ce = if probs.is_empty() {
        0.0
    } else {
        probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / probs.len() as f64
    };
    ce + layer.lambda * layer.cost_loss()
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Which gate values multiply the inputs of a batch.
#[derive(Debug, Clone, Copy)]
pub enum Gates<'a> {
    /// A Concrete draw; logits receive gradient through the sample.
    Sampled(&'a GateSample),
    /// `layer.deterministic_gates()`: `sigmoid(log_alpha)` or the frozen mask.
    Deterministic,
}

impl Gates<'_> {
    pub fn values(&self, layer: &GateLayer) -> Vec<f64> {
        match self {
            Gates::Sampled(s) => s.z.clone(),
            Gates::Deterministic => layer.deterministic_gates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub log_alpha: Vec<f64>,
}

pub fn gate_inputs(x: &[Vec<f64>], z: &[f64]) -> Result<Vec<Vec<f64>>> {
    x.iter().map(|row| crate::gating::apply_gates(row, z)).collect()
}

/// Backpropagates the mean cross-entropy plus `lambda * L_cost`.
///
/// `x` holds the ungated inputs of the batch that produced `cache`. Gate
/// gradients are zero while `epoch < layer.warmup_epochs` and once the layer
/// is frozen.
pub fn backward(
    model: &MlpModel,
    layer: &GateLayer,
    cache: &ForwardCache,
    x: &[Vec<f64>],
    gates: Gates<'_>,
    labels: &[usize],
    epoch: usize,
) -> Result<Gradients> {
    if cache.version != model.version {
        return Err(Error::Usage("forward cache is stale: parameters changed since the forward pass".into()));
    }
    let Arch {
        inputs: d,
        hidden: h,
        classes: c,
    } = model.arch;
    let b = cache.batch;
    if labels.len() != b || x.len() != b {
        return Err(Error::Usage(format!(
            "batch of {b} rows with {} labels and {} raw inputs",
            labels.len(),
            x.len()
        )));
    }
    if layer.len() != d {
        return Err(Error::Usage(format!("{} gates for {d} network inputs", layer.len())));
    }
    let p = &model.params;
    let mut g = Gradients {
        w1: vec![0.0; d * h],
        b1: vec![0.0; h],
        w2: vec![0.0; h * c],
        b2: vec![0.0; c],
        log_alpha: vec![0.0; d],
    };
    let mut dz = vec![0.0; d];
    let inv_b = 1.0 / b.max(1) as f64;
    let mut dlogit = vec![0.0; c];
    let mut dpre = vec![0.0; h];
    for n in 0..b {
        let y = labels[n];
        if y >= c {
            return Err(Error::Usage(format!("label {y} out of range for {c} classes")));
        }
        for (k, v) in dlogit.iter_mut().enumerate() {
            *v = (cache.probs[n][k] - if k == y { 1.0 } else { 0.0 }) * inv_b;
        }
        let hr = &cache.hidden[n * h..(n + 1) * h];
        let pr = &cache.pre[n * h..(n + 1) * h];
        for k in 0..c {
            g.b2[k] += dlogit[k];
        }
        for j in 0..h {
            let mut acc = 0.0;
            let wrow = &p.w2[j * c..(j + 1) * c];
            let grow = &mut g.w2[j * c..(j + 1) * c];
            for k in 0..c {
                grow[k] += hr[j] * dlogit[k];
                acc += wrow[k] * dlogit[k];
            }
            dpre[j] = if pr[j] > 0.0 { acc } else { 0.0 };
            g.b1[j] += dpre[j];
        }
        let xr = &cache.x[n * d..(n + 1) * d];
        for i in 0..d {
            let wrow = &p.w1[i * h..(i + 1) * h];
            let grow = &mut g.w1[i * h..(i + 1) * h];
            let mut dx = 0.0;
            for j in 0..h {
                grow[j] += xr[i] * dpre[j];
                dx += wrow[j] * dpre[j];
            }
            dz[i] += dx * x[n][i];
        }
    }
    for (gw, &k) in g.w1.iter_mut().zip(&model.mask.w1) {
        if !k {
            *gw = 0.0;
        }
    }
    for (gw, &k) in g.w2.iter_mut().zip(&model.mask.w2) {
        if !k {
            *gw = 0.0;
        }
    }
    if !layer.is_frozen() && epoch >= layer.warmup_epochs {
        let through = match gates {
            Gates::Sampled(s) => layer.gate_backward(&dz, s, epoch)?,
            Gates::Deterministic => dz
                .iter()
                .zip(&layer.log_alpha)
                .map(|(&g, &la)| {
                    let s = sigmoid(la);
                    g * s * (1.0 - s)
                })
                .collect(),
        };
        let cost = layer.cost_grad();
        for i in 0..d {
            g.log_alpha[i] = through[i] + layer.lambda * cost[i];
        }
    }
    Ok(g)
}

/// Forward pass, total loss and gradients for one batch.
pub fn loss_and_gradients(
    model: &MlpModel,
    layer: &GateLayer,
    x: &[Vec<f64>],
    labels: &[usize],
    gates: Gates<'_>,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    let cache = model.forward(&gate_inputs(x, &gates.values(layer))?)?;
    let loss = cache.cross_entropy(labels) + layer.lambda * layer.cost_loss();
    let grads = backward(model, layer, &cache, x, gates, labels, epoch)?;
    Ok((loss, grads))
}

/// Total loss of a batch without gradients.
pub fn batch_loss(model: &MlpModel, layer: &GateLayer, x: &[Vec<f64>], labels: &[usize], gates: Gates<'_>) -> Result<f64> {
    let cache = model.forward(&gate_inputs(x, &gates.values(layer))?)?;
    Ok(cache.cross_entropy(labels) + layer.lambda * layer.cost_loss())
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    cfg: AdamConfig,
    slots: [Moments; 4],
    gates: Moments,
}

impl AdamState {
    pub fn new(arch: Arch, num_gates: usize, cfg: AdamConfig) -> Self {
        AdamState {
            t: 0,
            cfg,
            slots: [
                Moments::new(arch.inputs * arch.hidden),
                Moments::new(arch.hidden),
                Moments::new(arch.hidden * arch.classes),
                Moments::new(arch.classes),
            ],
            gates: Moments::new(num_gates),
        }
    }
}

fn adam_update(params: &mut [f64], grads: &[f64], mom: &mut Moments, t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}

/// One bias-corrected Adam step on the weights and, unless the layer is
/// frozen, the gate logits. Masked weights are zero afterwards.
pub fn adam_step(
    model: &mut MlpModel,
    layer: &mut GateLayer,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    gate_lr: f64,
) {
    state.t += 1;
    let t = state.t;
    let cfg = state.cfg;
    {
        let mut p = model.params_mut();
        let tensors = p.tensors_mut();
        let gs = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];
        for ((param, g), mom) in tensors.into_iter().zip(gs).zip(state.slots.iter_mut()) {
            adam_update(param, g, mom, t, lr, &cfg);
        }
    }
    if !layer.is_frozen() {
        adam_update(&mut layer.log_alpha, &grads.log_alpha, &mut state.gates, t, gate_lr, &cfg);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Default step size of the gate logits. With the weight rate of 1e-3 the
/// logits barely leave their initial value within 50 epochs.
pub const DEFAULT_GATE_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate of the gate logits; `None` uses `lr`.
    pub gate_lr: Option<f64>,
    pub epochs: usize,
    pub retrain_epochs: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            gate_lr: Some(DEFAULT_GATE_LR),
            epochs: 50,
            retrain_epochs: 10,
            adam: AdamConfig::default(),
            patience: 10,
            batch_size: 32,
            hidden: DEFAULT_HIDDEN,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.gate_lr.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, batch_size and hidden must be positive".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("invalid Adam coefficients".into()));
        }
        Ok(())
    }

    pub fn gate_lr(&self) -> f64 {
        self.gate_lr.unwrap_or(self.lr)
    }
}

/// Input rows with their class labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Examples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gamma: f64,
    pub train_loss: f64,
    /// `None` without a validation set.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub expected_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _model: &MlpModel, _layer: &GateLayer) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

pub fn train(
    model: &mut MlpModel,
    layer: &mut GateLayer,
    train_set: &Examples,
    val_set: &Examples,
    cfg: &TrainConfig,
    schedule: &GammaSchedule,
    epochs: usize,
) -> Result<TrainHistory> {
    train_observed(model, layer, train_set, val_set, cfg, schedule, epochs, &mut ())
}

/// Minibatch training with Adam and early stopping on validation loss.
///
/// Each epoch anneals `gamma`, shuffles the rows with the run seed, draws one
/// gate sample per minibatch (unless the layer is frozen) and steps Adam.
/// Validation uses deterministic gates. With a validation set the parameters
/// and logits of the best epoch are restored at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    model: &mut MlpModel,
    layer: &mut GateLayer,
    train_set: &Examples,
    val_set: &Examples,
    cfg: &TrainConfig,
    schedule: &GammaSchedule,
    epochs: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if train_set.x.len() != train_set.y.len() || val_set.x.len() != val_set.y.len() {
        return Err(Error::Usage("examples have mismatched x/y lengths".into()));
    }
    let mut r = rng::seeded(cfg.seed);
    let mut state = AdamState::new(model.arch, layer.len(), cfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Params, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut bx: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut by: Vec<usize> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..epochs {
        let gamma = anneal_gamma(schedule, epoch);
        if !layer.is_frozen() {
            layer.gamma = gamma;
        }
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(train_set.x[i].clone());
                by.push(train_set.y[i]);
            }
            let sample;
            let gates = if layer.is_frozen() {
                Gates::Deterministic
            } else {
                sample = layer.sample_gates(&mut r)?;
                Gates::Sampled(&sample)
            };
            let (loss, grads) = loss_and_gradients(model, layer, &bx, &by, gates, epoch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss} in epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            adam_step(model, layer, &grads, &mut state, cfg.lr, cfg.gate_lr());
            observer.on_step(model, layer);
        }

        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let z = layer.deterministic_gates();
            let cache = model.forward(&gate_inputs(&val_set.x, &z)?)?;
            let loss = cache.cross_entropy(&val_set.y) + layer.lambda * layer.cost_loss();
            let correct = cache
                .predictions()
                .iter()
                .zip(&val_set.y)
                .filter(|(p, y)| p == y)
                .count();
            (Some(loss), Some(correct as f64 / val_set.len() as f64))
        };
        let record = EpochRecord {
            epoch,
            gamma: layer.gamma,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_accuracy,
            expected_cost: layer.cost_loss(),
        };
        observer.on_epoch(&record);
        history.epochs.push(record);

        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, model.params.clone(), layer.log_alpha.clone()));
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    if let Some((_, params, logits)) = best {
        model.set_params(params)?;
        if !layer.is_frozen() {
            layer.log_alpha = logits;
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Symmetric per-tensor integer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub q: Vec<i32>,
    pub scale: f64,
    pub bits: u32,
}

impl QuantTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.q.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

pub fn quantize_tensor(w: &[f64], bits: u32) -> Result<QuantTensor> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!("weight bits must lie in 2..=16, got {bits}")));
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let m = w.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    // An all-zero tensor gets scale 1 so every code is 0.
    let scale = if m > 0.0 { m / qmax } else { 1.0 };
    let q = w
        .iter()
        .map(|&x| (x / scale).round().clamp(-qmax, qmax) as i32)
        .collect();
    Ok(QuantTensor { q, scale, bits })
}

/// `round(x * (2^bits - 1)) / (2^bits - 1)` on `x` clamped to `[0, 1]`.
pub fn quantize_input(x01: f64, bits: u32) -> f64 {
    let levels = ((1u64 << bits) - 1) as f64;
    (x01.clamp(0.0, 1.0) * levels).round() / levels
}

pub const WEIGHT_BITS: u32 = 8;
pub const INPUT_BITS: u32 = 4;

/// Post-training quantized network. Biases stay in floating point; the
/// bespoke adders absorb them as constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub arch: Arch,
    pub w1: QuantTensor,
    pub b1: Vec<f64>,
    pub w2: QuantTensor,
    pub b2: Vec<f64>,
    pub mask: Mask,
    pub input_bits: u32,
}

pub fn quantize_weights(model: &MlpModel, bits: u32) -> Result<QuantizedModel> {
    Ok(QuantizedModel {
        arch: model.arch,
        w1: quantize_tensor(&model.params.w1, bits)?,
        b1: model.params.b1.clone(),
        w2: quantize_tensor(&model.params.w2, bits)?,
        b2: model.params.b2.clone(),
        mask: model.mask.clone(),
        input_bits: INPUT_BITS,
    })
}

impl QuantizedModel {
    /// Float model with the dequantized weights, used for inference.
    pub fn dequantized(&self) -> MlpModel {
        let params = Params {
            w1: self.w1.dequantize(),
            b1: self.b1.clone(),
            w2: self.w2.dequantize(),
            b2: self.b2.clone(),
        };
        MlpModel {
            arch: self.arch,
            init_snapshot: params.clone(),
            params,
            mask: self.mask.clone(),
            version: 0,
        }
    }

    /// Weights that survive both the mask and rounding.
    pub fn nonzero_weights(&self) -> usize {
        self.w1.q.iter().chain(&self.w2.q).filter(|&&q| q != 0).count()
    }
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

pub trait Classifier {
    fn num_inputs(&self) -> usize;
    /// Class scores for one already-gated input row.
    fn logits(&self, x: &[f64]) -> Vec<f64>;

    /// Highest-scoring class, lowest index on ties.
    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

impl Classifier for MlpModel {
    fn num_inputs(&self) -> usize {
        self.arch.inputs
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let Arch {
            hidden: h,
            classes: c,
            ..
        } = self.arch;
        let p = &self.params;
        let mut hid = p.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (acc, &w) in hid.iter_mut().zip(&p.w1[i * h..(i + 1) * h]) {
                *acc += xi * w;
            }
        }
        let mut out = p.b2.clone();
        for (j, &hj) in hid.iter().enumerate() {
            let hj = hj.max(0.0);
            for (acc, &w) in out.iter_mut().zip(&p.w2[j * c..(j + 1) * c]) {
                *acc += hj * w;
            }
        }
        out
    }
}

impl Classifier for QuantizedModel {
    fn num_inputs(&self) -> usize {
        self.arch.inputs
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let Arch {
            hidden: h,
            classes: c,
            ..
        } = self.arch;
        let mut hid = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (acc, &q) in hid.iter_mut().zip(&self.w1.q[i * h..(i + 1) * h]) {
                *acc += xi * (q as f64 * self.w1.scale);
            }
        }
        let mut out = self.b2.clone();
        for (j, &hj) in hid.iter().enumerate() {
            let hj = hj.max(0.0);
            for (acc, &q) in out.iter_mut().zip(&self.w2.q[j * c..(j + 1) * c]) {
                *acc += hj * (q as f64 * self.w2.scale);
            }
        }
        out
    }
}

/// How window features reach the classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum FeaturePath {
    /// Software statistics through the ideal input quantizer.
    Ideal { input_bits: u32 },
    /// Behavioral extractor bank, then the SAR converter.
    Analog { analog: AnalogConfig, adc: AdcConfig },
}

/// Ideal-path classifier inputs for one normalized window: every candidate
/// feature, scaled to `[0, 1]` and quantized.
pub fn ideal_inputs(window: &Window, candidates: &[FeatureId], input_bits: u32) -> Vec<f64> {
    let n = window.len();
    candidates
        .iter()
        .map(|id| {
            let v = signal::statistic(&window.samples[id.channel], id.kind);
            quantize_input(signal::model_input(id.kind, v, n), input_bits)
        })
        .collect()
}

/// Analog-path classifier inputs: only gated-in features are extracted and
/// converted, the rest are 0.
pub fn analog_inputs(
    window: &Window,
    candidates: &[FeatureId],
    keep: &[bool],
    analog_cfg: &AnalogConfig,
    adc_cfg: &AdcConfig,
) -> Result<Vec<f64>> {
    let selection: Vec<FeatureId> = candidates
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&id, _)| id)
        .collect();
    let mut out = vec![0.0; candidates.len()];
    if selection.is_empty() {
        return Ok(out);
    }
    let bank = analog::run_extractor_bank(window, &selection, analog_cfg)?;
    let conv = adc::convert_bank(&bank, adc_cfg);
    let values = conv.inputs(adc_cfg);
    for (e, v) in bank.entries.iter().zip(values) {
        if let Some(pos) = candidates.iter().position(|&c| c == e.id) {
            out[pos] = v;
        }
    }
    Ok(out)
}

pub fn path_inputs(window: &Window, candidates: &[FeatureId], keep: &[bool], path: &FeaturePath) -> Result<Vec<f64>> {
    match path {
        FeaturePath::Ideal { input_bits } => Ok(ideal_inputs(window, candidates, *input_bits)),
        FeaturePath::Analog { analog, adc } => analog_inputs(window, candidates, keep, analog, adc),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Accuracy of a classifier on gated example rows.
pub fn evaluate_examples<M: Classifier + ?Sized>(model: &M, gates: &[f64], data: &Examples) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    for row in &data.x {
        let g = crate::gating::apply_gates(row, gates)?;
        predictions.push(model.predict(&g));
    }
    let correct = predictions.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        accuracy: if data.is_empty() {
            0.0
        } else {
            correct as f64 / data.len() as f64
        },
        predictions,
    })
}

/// Classifies normalized windows through the chosen feature path.
pub fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    layer: &GateLayer,
    windows: &[Window],
    candidates: &[FeatureId],
    path: &FeaturePath,
) -> Result<Evaluation> {
    let keep = layer
        .frozen_mask
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluation needs a frozen gate layer".into()))?;
    if candidates.len() != model.num_inputs() || keep.len() != candidates.len() {
        return Err(Error::Usage(format!(
            "{} candidates, {} gates, network expects {}",
            candidates.len(),
            keep.len(),
            model.num_inputs()
        )));
    }
    let mut data = Examples::default();
    for w in windows {
        data.x.push(path_inputs(w, candidates, keep, path)?);
        data.y.push(w.label);
    }
    evaluate_examples(model, &layer.deterministic_gates(), &data)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "mixsig-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container for a trained design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub candidates: Vec<FeatureId>,
    pub model: MlpModel,
    pub gates: GateLayer,
    pub quantized: Option<QuantizedModel>,
}

impl Checkpoint {
    pub fn new(candidates: Vec<FeatureId>, model: MlpModel, gates: GateLayer, quantized: Option<QuantizedModel>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            candidates,
            model,
            gates,
            quantized,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn free_layer(d: usize, lambda: f64) -> GateLayer {
        let mut l = GateLayer::new(vec![1.0; d], 1.0, lambda, 0).unwrap();
        l.log_alpha = (0..d).map(|i| 0.3 * i as f64 - 0.5).collect();
        l
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let a = init_model(4, 100, 2, 3).unwrap();
        let b = init_model(4, 100, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.arch().num_params(), 702);
        assert_eq!(a.params(), a.init_snapshot());
        assert!(a.params().b1.iter().all(|&x| x == 0.0));
        let lim = (6.0f64 / 4.0).sqrt();
        assert!(a.params().w1.iter().all(|w| w.abs() <= lim));
        assert_ne!(a, init_model(4, 100, 2, 4).unwrap());
        assert!(init_model(0, 3, 2, 0).is_err());
    }

    #[test]
    fn forward_examples() {
        let mut m = init_model(2, 4, 3, 0).unwrap();
        m.set_params(Params::zeros(m.arch())).unwrap();
        let c = m.forward(&[vec![0.3, 0.9]]).unwrap();
        for p in &c.probs[0] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut m = init_model(2, 4, 3, 1).unwrap();
        m.params_mut().b2.copy_from_slice(&[0.1, 0.2, 0.3]);
        let c = m.forward(&[vec![0.0, 0.0]]).unwrap();
        let expect = softmax(&[0.1, 0.2, 0.3]);
        assert_eq!(c.probs[0], expect);
        assert!(matches!(m.forward(&[vec![1.0]]), Err(Error::Usage(_))));
    }

    #[test]
    fn loss_examples() {
        let l0 = free_layer(2, 0.0);
        let uniform = vec![vec![0.25; 4]; 3];
        assert!((total_loss(&uniform, &[0, 1, 3], &l0) - 4f64.ln()).abs() < 1e-12);
        let certain = vec![vec![1.0, 0.0]];
        assert_eq!(total_loss(&certain, &[0], &l0), 0.0);
        let l1 = GateLayer { lambda: 0.7, ..l0.clone() };
        let diff = total_loss(&uniform, &[0, 1, 3], &l1) - total_loss(&uniform, &[0, 1, 3], &l0);
        assert!((diff - 0.7 * l0.cost_loss()).abs() < 1e-12);
    }

    /// Central differences over every parameter and logit.
    fn fd_check(model: &MlpModel, layer: &GateLayer, x: &[Vec<f64>], y: &[usize], u: &[f64]) {
        let sample = layer.sample_gates_with(u.to_vec()).unwrap();
        let (_, g) = loss_and_gradients(model, layer, x, y, Gates::Sampled(&sample), 0).unwrap();
        let h = 1e-6;
        let loss = |m: &MlpModel, l: &GateLayer| {
            let s = l.sample_gates_with(u.to_vec()).unwrap();
            batch_loss(m, l, x, y, Gates::Sampled(&s)).unwrap()
        };
        let check = |fd: f64, an: f64, what: &str| {
            let scale = fd.abs().max(an.abs()).max(1e-7);
            assert!((fd - an).abs() / scale <= 1e-4, "{what}: fd {fd} analytic {an}");
        };
        for t in 0..4 {
            let n = [&g.w1, &g.b1, &g.w2, &g.b2][t].len();
            for k in 0..n {
                let mut p = model.clone();
                let mut q = model.clone();
                p.params_mut().tensors_mut()[t][k] += h;
                q.params_mut().tensors_mut()[t][k] -= h;
                let fd = (loss(&p, layer) - loss(&q, layer)) / (2.0 * h);
                check(fd, [&g.w1, &g.b1, &g.w2, &g.b2][t][k], &format!("tensor {t}[{k}]"));
            }
        }
        for i in 0..layer.len() {
            let mut p = layer.clone();
            let mut q = layer.clone();
            p.log_alpha[i] += h;
            q.log_alpha[i] -= h;
            let fd = (loss(model, &p) - loss(model, &q)) / (2.0 * h);
            check(fd, g.log_alpha[i], &format!("log_alpha[{i}]"));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = init_model(6, 8, 3, 11).unwrap();
        let mut layer = free_layer(6, 0.3);
        layer.costs = vec![0.5, 1.0, 0.2, 2.0, 0.0, 1.5];
        let mut r = rng::seeded(5);
        let x: Vec<Vec<f64>> = (0..7).map(|_| (0..6).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let y = vec![0, 1, 2, 1, 0, 2, 2];
        let u: Vec<f64> = (0..6).map(|_| r.gen_range(0.1..0.9)).collect();
        fd_check(&model, &layer, &x, &y, &u);
    }

    #[test]
    fn masked_and_warmup_gradients() {
        let mut model = init_model(3, 5, 2, 2).unwrap();
        let mut flat = vec![true; model.arch().num_weights()];
        flat[0] = false;
        flat[17] = false;
        model.rewind(Mask::from_flat(model.arch(), &flat).unwrap()).unwrap();
        let mut layer = free_layer(3, 0.1);
        let x = vec![vec![0.2, 0.5, 0.9], vec![0.8, 0.1, 0.4]];
        let y = vec![1, 0];
        let s = layer.sample_gates_with(vec![0.3, 0.6, 0.5]).unwrap();
        let (_, g) = loss_and_gradients(&model, &layer, &x, &y, Gates::Sampled(&s), 0).unwrap();
        assert_eq!(g.w1[0], 0.0);
        assert_eq!(g.w2[17 - 15], 0.0);
        layer.warmup_epochs = 2;
        let (_, gw) = loss_and_gradients(&model, &layer, &x, &y, Gates::Sampled(&s), 1).unwrap();
        assert!(gw.log_alpha.iter().all(|&v| v == 0.0));
        assert_eq!((&gw.w1, &gw.b1, &gw.w2, &gw.b2), (&g.w1, &g.b1, &g.w2, &g.b2));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = init_model(2, 3, 2, 0).unwrap();
        let l = free_layer(2, 0.0);
        let x = vec![vec![0.1, 0.2]];
        let c = m.forward(&x).unwrap();
        m.params_mut().b1[0] = 1.0;
        let e = backward(&m, &l, &c, &x, Gates::Deterministic, &[0], 0);
        assert!(matches!(e, Err(Error::Usage(_))));
    }

    #[test]
    fn adam_examples() {
        let mut m = init_model(3, 4, 2, 0).unwrap();
        let mut l = free_layer(3, 0.0);
        let before = m.clone();
        let zero = Gradients {
            w1: vec![0.0; 12],
            b1: vec![0.0; 4],
            w2: vec![0.0; 8],
            b2: vec![0.0; 2],
            log_alpha: vec![0.0; 3],
        };
        let mut st = AdamState::new(m.arch(), 3, AdamConfig::default());
        adam_step(&mut m, &mut l, &zero, &mut st, 1e-3, 1e-3);
        assert_eq!(m.params(), before.params());

        // At t = 1 the bias-corrected update is lr * g / (|g| + eps).
        let mut g = zero.clone();
        g.w1[0] = 0.37;
        g.w1[1] = -2.0;
        g.b2[1] = 1e-3;
        let mut st = AdamState::new(m.arch(), 3, AdamConfig::default());
        let p0 = m.params().clone();
        adam_step(&mut m, &mut l, &g, &mut st, 1e-3, 1e-3);
        for (k, gv) in [(0, 0.37), (1, -2.0)] {
            let expect = 1e-3 * gv / (f64::abs(gv) + 1e-8);
            assert!((p0.w1[k] - m.params().w1[k] - expect).abs() < 1e-15);
        }
        let expect = 1e-3 * 1e-3 / (1e-3 + 1e-8);
        assert!((p0.b2[1] - m.params().b2[1] - expect).abs() < 1e-15);
    }

    fn separable(n: usize, seed: u64) -> Examples {
        let mut r = rng::seeded(seed);
        let mut ex = Examples::default();
        while ex.len() < n {
            let x: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..1.0)).collect();
            let s = x[0] + x[1] - 1.0;
            if s.abs() < 0.1 {
                continue;
            }
            ex.y.push(usize::from(s > 0.0));
            ex.x.push(x);
        }
        ex
    }

    #[test]
    fn learns_a_separable_task() {
        let data = separable(400, 1);
        let mut m = init_model(4, 16, 2, 0).unwrap();
        let mut l = GateLayer::new(vec![0.0; 4], 1.0, 0.0, 0).unwrap();
        let cfg = TrainConfig { lr: 1e-2, patience: 0, ..TrainConfig::default() };
        let sched = GammaSchedule { gamma_start: 0.5, gamma_end: 0.5, total_epochs: 50 };
        let h = train(&mut m, &mut l, &data, &Examples::default(), &cfg, &sched, 50).unwrap();
        assert_eq!(h.epochs.len(), 50);
        l.prune_gates(0.0).unwrap();
        let acc = evaluate_examples(&m, &l.deterministic_gates(), &data).unwrap().accuracy;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn early_stopping_bounds_history() {
        let data = separable(200, 2);
        let val = separable(60, 3);
        let mut m = init_model(4, 8, 2, 0).unwrap();
        let mut l = GateLayer::new(vec![0.0; 4], 1.0, 0.0, 0).unwrap();
        let cfg = TrainConfig { patience: 2, epochs: 30, ..TrainConfig::default() };
        let h = train(&mut m, &mut l, &data, &val, &cfg, &GammaSchedule::default(), 30).unwrap();
        assert!(h.epochs.len() <= 30);
        assert!(h.best_epoch < h.epochs.len());
        let empty = Examples::default();
        assert!(matches!(
            train(&mut m, &mut l, &empty, &val, &cfg, &GammaSchedule::default(), 3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(100, 4);
        let run = || {
            let mut m = init_model(4, 8, 2, 9).unwrap();
            let mut l = GateLayer::new(vec![0.2; 4], 1.0, 0.01, 1).unwrap();
            let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
            train(&mut m, &mut l, &data, &separable(30, 5), &cfg, &GammaSchedule::default(), 8).unwrap();
            (m, l)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn quantization_examples() {
        let w = vec![0.5, -0.25, 0.125, -0.5, 0.0];
        let q = quantize_tensor(&w, 8).unwrap();
        assert_eq!(q.q[0], 127);
        assert_eq!(q.q[3], -127);
        let z = quantize_tensor(&[0.0, 0.0], 8).unwrap();
        assert_eq!((z.q.clone(), z.scale), (vec![0, 0], 1.0));
        assert!((quantize_input(0.5, 4) - 8.0 / 15.0).abs() < 1e-15);
        assert_eq!(quantize_input(1.2, 4), 1.0);
        assert_eq!(quantize_input(-0.1, 4), 0.0);
    }

    #[test]
    fn zero_gates_reduce_to_bias_classifier() {
        let mut m = init_model(3, 4, 2, 0).unwrap();
        m.params_mut().b2.copy_from_slice(&[0.0, 0.4]);
        let data = Examples {
            x: vec![vec![0.9, 0.1, 0.3], vec![0.0, 0.7, 0.2]],
            y: vec![1, 1],
        };
        let e = evaluate_examples(&m, &[0.0; 3], &data).unwrap();
        let bias_class = m.predict(&[0.0; 3]);
        assert!(e.predictions.iter().all(|&p| p == bias_class));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(2, 3, 2, 0).unwrap();
        let l = free_layer(2, 0.1);
        let ids = signal::candidate_features(1, &[signal::FeatureKind::Min, signal::FeatureKind::Max]);
        let ck = Checkpoint::new(ids, m.clone(), l, Some(quantize_weights(&m, 8).unwrap()));
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        fs::write(&p, "{\"format\":\"other\"}").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in any::<u64>(), xs in prop::collection::vec(-5.0f64..5.0, 5)) {
            let m = init_model(5, 7, 4, seed).unwrap();
            let c = m.forward(&[xs]).unwrap();
            let s: f64 = c.probs[0].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(c.probs[0].iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn reconstruction_within_half_scale(w in prop::collection::vec(-3.0f64..3.0, 1..50)) {
            let q = quantize_tensor(&w, 8).unwrap();
            prop_assert!(q.q.iter().all(|v| v.abs() <= 127));
            for (a, b) in w.iter().zip(q.dequantize()) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 + 1e-15);
            }
        }

        #[test]
        fn masked_weights_stay_zero(seed in 0u64..50, cut in prop::collection::vec(any::<bool>(), 24)) {
            let mut m = init_model(3, 6, 1 + 1, seed).unwrap();
            let flat: Vec<bool> = cut.iter().chain(std::iter::repeat(&true)).take(m.arch().num_weights()).copied().collect();
            m.rewind(Mask::from_flat(m.arch(), &flat).unwrap()).unwrap();
            let mut l = free_layer(3, 0.0);
            let mut st = AdamState::new(m.arch(), 3, AdamConfig::default());
            let x = vec![vec![0.3, 0.6, 0.9], vec![0.5, 0.1, 0.2]];
            for _ in 0..5 {
                let (_, g) = loss_and_gradients(&m, &l, &x, &[0, 1], Gates::Deterministic, 0).unwrap();
                adam_step(&mut m, &mut l, &g, &mut st, 1e-2, 1e-2);
                for (w, k) in m.params().flat_weights().iter().zip(&flat) {
                    prop_assert!(*k || *w == 0.0);
                }
            }
        }
    }
}
