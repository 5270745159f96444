//! Language-model plus eviction-loss training.
//!
//! The eviction loss is `alpha * |mean(AG) - beta|`, where `mean(AG)` is
//! the average straight-through gate value over every gated layer, head and
//! token of the batch. Its forward value is the hard retention ratio; its
//! gradient flows through the sigmoid.

mod init;
mod optim;

pub use init::init_weights;
pub use optim::AdamW;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Window;
use crate::error::{Error, Result};
use crate::gate::{EvictionFlags, GateStats};
use crate::model::{BoundParams, GateMode, Model};
use crate::params::{Param, ParamId, ParamRole};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    /// Target retention, in `[0, tau]`.
    pub beta: f64,
    pub lm_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.4,
            lm_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, tau: f64) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta <= tau) {
            return Err(Error::config("beta", format!("must lie in [0, tau = {tau}]")));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::config("lm_weight", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// `alpha * |mean_retention - beta|` on plain numbers.
    pub fn eviction_value(&self, mean_retention: f64) -> f64 {
        self.alpha * (mean_retention - self.beta).abs()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Gate parameters only.
    AgOnly,
    /// Gates plus `W_Q`, `W_K`, `W_V`, `W_O` of every attention layer.
    #[default]
    AgPlusAttentionProjections,
    /// Every parameter.
    All,
}

impl TrainableSet {
    pub fn includes(self, p: &Param) -> bool {
        match self {
            TrainableSet::AgOnly => p.role == ParamRole::Gate,
            TrainableSet::AgPlusAttentionProjections => {
                matches!(p.role, ParamRole::Gate | ParamRole::AttentionProjection)
            }
            TrainableSet::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable_set: TrainableSet,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Run the gates during training; `false` trains a plain causal model.
    pub gated: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 4,
            seq_len: 64,
            weight_decay: 0.01,
            seed: 0,
            trainable_set: TrainableSet::default(),
            max_steps: None,
            gated: true,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (field, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps", "must be positive"));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lm_loss: f64,
    pub evict_loss: f64,
    pub mean_retention: f64,
    pub per_layer_eviction: Vec<f64>,
}

/// Mean straight-through gate value over all `gates`, or `None` when there
/// are no gated layers.
pub fn mean_gate(g: &mut Graph, gates: &[Var]) -> Option<Var> {
    let total: usize = gates.iter().map(|&v| g.value(v).numel()).sum();
    let mut acc: Option<Var> = None;
    for &v in gates {
        let s = g.sum(v);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s).expect("scalars"),
        });
    }
    acc.map(|a| g.scale(a, 1.0 / total as f64))
}

/// `alpha * |mean_gate - beta|`; zero when nothing is gated.
pub fn eviction_loss(g: &mut Graph, gates: &[Var], cfg: &LossConfig) -> Var {
    match mean_gate(g, gates) {
        None => g.constant(crate::tensor::Tensor::scalar(0.0)),
        Some(m) => {
            let d = g.add_scalar(m, -cfg.beta);
            let a = g.abs(d);
            g.scale(a, cfg.alpha)
        }
    }
}

/// `lm_weight * lm + evict`.
pub fn total_loss(g: &mut Graph, lm: Var, evict: Var, cfg: &LossConfig) -> Result<Var> {
    let lm = g.scale(lm, cfg.lm_weight);
    g.add(lm, evict)
}

/// Graph nodes and statistics of one batch objective.
#[derive(Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub lm: Var,
    pub evict: Var,
    pub flags: Vec<EvictionFlags>,
}

/// Records the objective of `batch` on `g`. `frozen` switches every
/// sequence to relaxed gating around the given flags.
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    bound: &BoundParams,
    batch: &[Window],
    cfg: &LossConfig,
    gated: bool,
    frozen: Option<&[EvictionFlags]>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut lm_terms = Vec::with_capacity(batch.len());
    let mut gate_vars = Vec::new();
    let mut flags = Vec::with_capacity(batch.len());
    for (i, w) in batch.iter().enumerate() {
        let mode = match frozen {
            Some(f) => GateMode::Relaxed(&f[i]),
            None if gated => GateMode::Gated,
            None => GateMode::Open,
        };
        let pass = model.forward(g, bound, &w.input, mode)?;
        let targets: Vec<usize> = w.target.iter().map(|&t| t as usize).collect();
        lm_terms.push(g.cross_entropy(pass.logits, &targets)?);
        gate_vars.extend(pass.gates.iter().flatten().map(|go| go.value));
        flags.push(pass.flags);
    }
    let mut lm = lm_terms[0];
    for &t in &lm_terms[1..] {
        lm = g.add(lm, t)?;
    }
    let lm = g.scale(lm, 1.0 / batch.len() as f64);
    let evict = eviction_loss(g, &gate_vars, cfg);
    let total = total_loss(g, lm, evict, cfg)?;
    Ok(BatchLoss {
        total,
        lm,
        evict,
        flags,
    })
}

/// Gradients of every parameter bound as trainable.
pub fn collect_grads(model: &Model, g: &mut Graph, bound: &BoundParams) -> Vec<(ParamId, Vec<f64>)> {
    model
        .params
        .iter()
        .filter_map(|(id, _)| g.take_grad(bound.var(id)).map(|gr| (id, gr)))
        .collect()
}

/// Optimizer steps `train` will take over `n_windows` windows.
pub fn planned_steps(spec: &TrainSpec, n_windows: usize) -> usize {
    let per_epoch = n_windows.div_ceil(spec.batch_size);
    let total = per_epoch * spec.epochs;
    spec.max_steps.map_or(total, |m| m.min(total))
}

/// Runs the training loop in place. `on_step` sees each history row as it
/// is produced.
pub fn train(
    model: &mut Model,
    windows: &[Window],
    spec: &TrainSpec,
    loss_cfg: &LossConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    spec.validate()?;
    loss_cfg.validate(model.config.tau)?;
    if windows.is_empty() {
        return Err(Error::contract("training corpus has no windows"));
    }
    let steps = planned_steps(spec, windows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamW::new(&model.params, spec.learning_rate, spec.weight_decay);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(steps);
    let (n_layers, n_heads) = (model.config.n_layers, model.config.n_heads);
    'epochs: for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            if history.len() >= steps {
                break 'epochs;
            }
            let step = history.len();
            let batch: Vec<Window> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let mut g = Graph::new();
            let set = spec.trainable_set;
            let bound = model.bind(&mut g, |p| set.includes(p));
            let loss = batch_loss(model, &mut g, &bound, &batch, loss_cfg, spec.gated, None)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite { step, value: total });
            }
            g.backward(loss.total)?;
            let grads = collect_grads(model, &mut g, &bound);
            opt.step(&mut model.params, &grads);
            let stats = GateStats::from_flags(&loss.flags, n_layers, n_heads);
            let row = StepMetrics {
                step,
                lm_loss: g.value(loss.lm).item(),
                evict_loss: g.value(loss.evict).item(),
                mean_retention: stats.mean_retention,
                per_layer_eviction: stats.per_layer_eviction,
            };
            on_step(&row);
            history.push(row);
        }
    }
    Ok(history)
}
