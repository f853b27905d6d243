//! Router-only optimization on a frozen backbone, dense pretraining of the
//! toy backbone, and the learning-rate × λ grid search.

mod corpus;
mod grid;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ForwardOutput, ModelState};
use crate::router::{MaskMode, Routing};
use crate::tensor::{Tape, Tensor};

pub use corpus::{
    dataset_from_text, ingest_corpus, synthetic_corpus, tokenize, windows, BatchSampler, CorpusOptions, Dataset,
    Window, DEFAULT_MAX_WINDOWS,
};
pub use grid::{grid_search, select_cell, GridCell, GridOutcome};
pub use optim::Adam;

pub const DEFAULT_LR_GRID: [f32; 5] = [1e-5, 2e-5, 5e-5, 1e-4, 2e-4];
pub const DEFAULT_LAMBDA_GRID: [f32; 4] = [0.0, 0.1, 0.01, 0.001];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    /// Scale of the capacity hinge.
    pub lambda: f32,
    /// Target capacity `s`, a fraction of kept decisions.
    pub target_capacity: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub lr_grid: Vec<f32>,
    pub lambda_grid: Vec<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            lambda: 0.1,
            target_capacity: 0.5,
            steps: 2000,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_capacity) {
            return Err(Error::Config(format!(
                "target capacity {} outside [0, 1]",
                self.target_capacity
            )));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.lambda < 0.0 || self.learning_rate < 0.0 {
            return Err(Error::Config("lambda and learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Capacity of one routed layer within a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacity {
    pub layer: usize,
    pub capacity: f64,
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub total: f64,
    pub task_loss: f64,
    pub mod_loss: f64,
    pub capacity: f64,
    pub per_layer_capacity: Vec<LayerCapacity>,
}

/// Every live mask of a forward pass: depth decisions, then expert decisions.
pub fn collect_masks(out: &ForwardOutput) -> Vec<Tensor> {
    out.decisions
        .iter()
        .map(|d| d.mask.clone())
        .chain(out.expert_decisions.iter().map(|d| d.mask.clone()))
        .collect()
}

/// Measured (hard) capacity overall and per layer.
pub fn measured_capacity(out: &ForwardOutput) -> (f64, Vec<LayerCapacity>) {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let keeps = out
        .decisions
        .iter()
        .map(|d| (d.layer, &d.keep))
        .chain(out.expert_decisions.iter().map(|d| (d.layer, &d.keep)));
    for (layer, keep) in keeps {
        let e = per.entry(layer).or_default();
        e.0 += keep.iter().filter(|&&k| k).count();
        e.1 += keep.len();
    }
    let (kept, total) = per.values().fold((0, 0), |a, v| (a.0 + v.0, a.1 + v.1));
    let frac = |k: usize, n: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    (
        frac(kept, total),
        per.into_iter()
            .map(|(layer, (k, n))| LayerCapacity {
                layer,
                capacity: frac(k, n),
            })
            .collect(),
    )
}

/// Capacity hinge `ReLU(c − s)` with `c` the fraction of kept decisions over
/// all masks jointly. Masks from a hard training forward carry the
/// straight-through surrogate, so the gradient reaches the scores.
pub fn mod_loss(tape: &Tape, masks: &[Tensor], s: f32) -> Result<Tensor> {
    let total: usize = masks.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(Error::Config("capacity loss needs at least one routed layer".into()));
    }
    let mut kept = tape.sum_all(&masks[0]);
    for m in &masks[1..] {
        kept = tape.add(&kept, &tape.sum_all(m))?;
    }
    let c = tape.scale(&kept, 1.0 / total as f32);
    Ok(tape.relu(&tape.add_scalar(&c, -s)))
}

pub(crate) fn batch_of<'a>(data: &'a [Window], idx: &[usize]) -> (Vec<&'a [usize]>, Vec<Option<usize>>) {
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| data[i].inputs.as_slice()).collect();
    let targets = idx.iter().flat_map(|&i| data[i].targets.iter().copied()).collect();
    (seqs, targets)
}

/// Trained routers and the per-step history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub routing: Routing,
    pub history: Vec<LossBreakdown>,
}

/// Trains only the router tensors of `routing` on `L_task + λ·ReLU(c − s)`.
///
/// The backbone is borrowed immutably and must be frozen; its checksum is
/// compared before and after as a hard check. Each step is appended to `log`
/// as one JSON line when given.
pub fn train_routers(
    state: &ModelState,
    routing: &Routing,
    data: &[Window],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !state.is_frozen() {
        return Err(Error::State("router training needs a frozen backbone".into()));
    }
    if routing.param_count() == 0 {
        return Err(Error::Config("no routers to train".into()));
    }
    let before = state.checksum();
    let mut routing = routing.clone();
    routing.set_trainable(true);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.steps);
    let opts = ForwardOptions::train(MaskMode::Hard);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed)?;

    for step in 0..cfg.steps {
        let (seqs, targets) = batch_of(data, &sampler.next_batch(cfg.batch_size));
        let tape = Tape::new();
        let out = state.forward(&tape, &seqs, &routing, &opts, None)?;
        let task = tape.cross_entropy(&out.logits, &targets)?;
        let hinge = mod_loss(&tape, &collect_masks(&out), cfg.target_capacity)?;
        let total = tape.add(&task, &tape.scale(&hinge, cfg.lambda))?;
        let (capacity, per_layer_capacity) = measured_capacity(&out);
        let record = LossBreakdown {
            step,
            total: task.item() as f64 + cfg.lambda as f64 * hinge.item() as f64,
            task_loss: task.item() as f64,
            mod_loss: hinge.item() as f64,
            capacity,
            per_layer_capacity,
        };
        if total.requires_grad() {
            tape.backward(&total)?;
        }
        opt.tick();
        for (name, w) in routing.parameters() {
            let g = w.take_grad().unwrap_or_else(|| vec![0.0; w.numel()]);
            let next = opt.update(&name, &w, &g)?;
            routing.set_parameter(&name, next)?;
        }
        if let Some(out) = log.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        history.push(record);
    }
    assert_eq!(
        before,
        state.checksum(),
        "backbone parameters changed during router training"
    );
    routing.set_trainable(false);
    Ok(TrainOutcome { routing, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub warmup: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            learning_rate: 2e-3,
            warmup: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Dense next-token pretraining of every backbone parameter. Leaves the
/// state frozen and returns the per-step loss.
pub fn pretrain(
    state: &mut ModelState,
    data: &[Window],
    cfg: &PretrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f32>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    state.set_trainable(true);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (seqs, targets) = batch_of(data, &sampler.next_batch(cfg.batch_size));
        let tape = Tape::new();
        let out = state.forward(&tape, &seqs, &Routing::dense(), &ForwardOptions::default(), None)?;
        let loss = tape.cross_entropy(&out.logits, &targets)?;
        tape.backward(&loss)?;
        opt.lr = cfg.learning_rate * ((step + 1) as f32 / cfg.warmup.max(1) as f32).min(1.0);
        opt.tick();
        for (name, w) in state.trainable() {
            let g = w.take_grad().unwrap_or_else(|| vec![0.0; w.numel()]);
            let next = opt.update(&name, &w, &g)?;
            state.set(&name, next)?;
        }
        if let Some(out) = log.as_deref_mut() {
            writeln!(out, "{{\"step\":{step},\"loss\":{}}}", loss.item()).map_err(|e| Error::io("pretrain log", e))?;
        }
        losses.push(loss.item());
    }
    state.freeze();
    Ok(losses)
}
