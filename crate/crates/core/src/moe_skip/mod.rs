//! Per-expert skip routers inside top-k MoE layers, expert load accounting,
//! and the static Expert-Drop baseline.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{moe_sublayer, ModelConfig, ModelState, MoeOutcome};
use crate::router::{Mode, Routing, ScoreOverride, DEFAULT_THRESHOLD};
use crate::tensor::{Tape, Tensor};

/// One d→1 skip gate per expert of a layer, sharing a threshold.
#[derive(Clone, Debug)]
pub struct ExpertSkipRouter {
    pub layer: usize,
    pub threshold: f32,
    pub weights: Vec<Tensor>,
}

impl ExpertSkipRouter {
    pub fn zero_init(layer: usize, n_experts: usize, d_model: usize) -> Self {
        ExpertSkipRouter {
            layer,
            threshold: DEFAULT_THRESHOLD,
            weights: (0..n_experts).map(|_| Tensor::zeros(&[d_model, 1])).collect(),
        }
    }

    pub fn name(&self, expert: usize) -> String {
        format!("router.{}.expert.{expert}.W", self.layer)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }
}

/// Zero-initialized skip routers on every MoE layer.
pub fn attach_expert_routers(config: &ModelConfig) -> Result<Routing> {
    let moe = config
        .moe
        .as_ref()
        .ok_or_else(|| Error::Config("model has no MoE layers".into()))?;
    let mut routing = Routing::dense();
    for l in 0..config.n_layers {
        routing
            .experts
            .insert(l, ExpertSkipRouter::zero_init(l, moe.n_experts, config.d_model));
    }
    Ok(routing)
}

/// Skip decisions of one expert over the rows the gate assigned to it.
#[derive(Clone, Debug)]
pub struct ExpertDecision {
    pub layer: usize,
    pub expert: usize,
    pub scores: Tensor,
    pub mask: Tensor,
    pub keep: Vec<bool>,
    /// Row of the forward batch each decision belongs to.
    pub rows: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLoad {
    pub layer: usize,
    pub expert: usize,
    /// Tokens selected by the top-k gate.
    pub assigned: u64,
    /// Assigned tokens that also passed the skip router.
    pub executed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertLoadReport {
    pub loads: Vec<ExpertLoad>,
}

impl ExpertLoadReport {
    /// Adds counts, matching entries by (layer, expert).
    pub fn merge(&mut self, other: &ExpertLoadReport) {
        for o in &other.loads {
            match self
                .loads
                .iter_mut()
                .find(|l| l.layer == o.layer && l.expert == o.expert)
            {
                Some(l) => {
                    l.assigned += o.assigned;
                    l.executed += o.executed;
                }
                None => self.loads.push(*o),
            }
        }
        self.loads.sort_by_key(|l| (l.layer, l.expert));
    }

    pub fn mean_assigned(&self) -> f64 {
        if self.loads.is_empty() {
            return 0.0;
        }
        self.loads.iter().map(|l| l.assigned as f64).sum::<f64>() / self.loads.len() as f64
    }

    /// (assigned, executed) per entry, divided by the mean assigned count.
    pub fn normalized(&self) -> Vec<(f64, f64)> {
        let m = self.mean_assigned();
        self.loads
            .iter()
            .map(|l| {
                if m == 0.0 {
                    (0.0, 0.0)
                } else {
                    (l.assigned as f64 / m, l.executed as f64 / m)
                }
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for l in &self.loads {
            serde_json::to_writer(&mut out, l)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let loads = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(ExpertLoadReport { loads })
    }
}

/// MoE residual sublayer `x + Σ_{i∈K} G_i·Ê_i(x)` with per-expert skipping.
///
/// Training mode evaluates every assigned expert and masks its contribution
/// (straight-through on each score); inference mode runs experts only on
/// the rows whose score clears the threshold.
pub fn moe_forward_skip(
    tape: &Tape,
    state: &ModelState,
    layer: usize,
    x: &Tensor,
    routers: Option<&ExpertSkipRouter>,
    mode: Mode,
) -> Result<(Tensor, ExpertLoadReport)> {
    let out = run(tape, state, layer, x, routers, mode, &[])?;
    Ok((out.out, ExpertLoadReport { loads: out.loads }))
}

/// Dense top-k MoE sublayer, no skip routers.
pub fn moe_layer_dense(tape: &Tape, state: &ModelState, layer: usize, x: &Tensor) -> Result<Tensor> {
    Ok(run(tape, state, layer, x, None, Mode::Infer, &[])?.out)
}

/// As [`moe_forward_skip`] with forced scores for chosen experts.
pub fn moe_forward_skip_with(
    tape: &Tape,
    state: &ModelState,
    layer: usize,
    x: &Tensor,
    routers: Option<&ExpertSkipRouter>,
    mode: Mode,
    overrides: &[(usize, ScoreOverride)],
) -> Result<(Tensor, ExpertLoadReport)> {
    let out = run(tape, state, layer, x, routers, mode, overrides)?;
    Ok((out.out, ExpertLoadReport { loads: out.loads }))
}

fn run(
    tape: &Tape,
    state: &ModelState,
    layer: usize,
    x: &Tensor,
    routers: Option<&ExpertSkipRouter>,
    mode: Mode,
    overrides: &[(usize, ScoreOverride)],
) -> Result<MoeOutcome> {
    if state.config.moe.is_none() {
        return Err(Error::Config("model has no MoE layers".into()));
    }
    if layer >= state.config.n_layers {
        return Err(Error::Index {
            op: "moe_forward_skip",
            index: layer,
            size: state.config.n_layers,
        });
    }
    let mut flops = crate::model::FlopReport::new(state.config.n_layers);
    moe_sublayer(
        tape,
        state,
        layer,
        x,
        routers,
        &BTreeSet::new(),
        mode,
        &|e| overrides.iter().find(|(i, _)| *i == e).map(|(_, o)| o.clone()),
        &mut flops,
    )
}

/// Mean gate probability of every expert over a calibration batch, as
/// `(layer, expert, importance)`, read from the dense forward.
pub fn expert_importance<S: AsRef<[usize]>>(state: &ModelState, calibration: &[S]) -> Result<Vec<(usize, usize, f64)>> {
    let moe = state
        .config
        .moe
        .as_ref()
        .ok_or_else(|| Error::Config("model has no MoE layers".into()))?;
    if calibration.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    let tape = Tape::inference();
    let opts = crate::model::ForwardOptions {
        capture_gates: true,
        ..Default::default()
    };
    let out = state.forward(&tape, calibration, &Routing::dense(), &opts, None)?;
    let mut result = Vec::new();
    for (l, probs) in out.gate_probs.iter().enumerate() {
        let rows = probs.rows().max(1) as f64;
        for e in 0..moe.n_experts {
            let mass: f64 = (0..probs.rows()).map(|r| probs.row(r)[e] as f64).sum();
            result.push((l, e, mass / rows));
        }
    }
    Ok(result)
}

/// Experts to remove globally: the `⌊drop_fraction · total⌋` lowest by
/// importance, ties broken by ascending (layer, expert). A candidate whose
/// removal would empty its layer is passed over.
pub fn expert_drop_baseline(
    n_layers: usize,
    n_experts: usize,
    top_k: usize,
    importance: &[(usize, usize, f64)],
    drop_fraction: f64,
) -> Result<BTreeSet<(usize, usize)>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!(
            "drop_fraction must lie in [0, 1), got {drop_fraction}"
        )));
    }
    let total = n_layers * n_experts;
    if importance.len() != total {
        return Err(Error::Config(format!(
            "expected {total} importance scores, got {}",
            importance.len()
        )));
    }
    let count = (drop_fraction * total as f64).floor() as usize;
    let mut order: Vec<&(usize, usize, f64)> = importance.iter().collect();
    order.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut left = vec![n_experts; n_layers];
    let mut dropped = BTreeSet::new();
    for &&(l, e, _) in &order {
        if dropped.len() == count {
            break;
        }
        if l >= n_layers || e >= n_experts {
            return Err(Error::Config(format!("importance entry ({l}, {e}) out of range")));
        }
        // never empty a layer; the next candidate in order is taken instead
        if left[l] > 1 {
            left[l] -= 1;
            dropped.insert((l, e));
        }
    }
    if dropped.len() < count {
        return Err(Error::Config(format!(
            "cannot drop {count} experts without emptying a layer"
        )));
    }
    for (l, &n) in left.iter().enumerate() {
        if n < top_k {
            log::warn!("layer {l} keeps {n} experts, fewer than top_k = {top_k}");
        }
    }
    Ok(dropped)
}
