use serde::{Deserialize, Serialize};

use super::{evaluate_ppl, EvalReport};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelState};
use crate::router::{Granularity, LayerMask, MaskSource, Routing, Target};
use crate::tensor::{Tape, Tensor};
use crate::train::Window;

/// Statically pruned plan and the importance it was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDropPlan {
    pub target: Target,
    /// Dropped layers in drop order.
    pub dropped: Vec<usize>,
    /// Mean `1 − cos(input, output)` of the unit, per layer.
    pub importance: Vec<f64>,
}

impl LayerDropPlan {
    pub fn routing(&self, n_layers: usize) -> Result<Routing> {
        static_drop(n_layers, self.target, &self.dropped, false)
    }
}

/// A routing that removes `target` from `layers` for every input.
pub fn static_drop(n_layers: usize, target: Target, layers: &[usize], allow_last: bool) -> Result<Routing> {
    let mut routing = Routing::dense();
    for &l in layers {
        if l >= n_layers {
            return Err(Error::Plan(format!("layer {l} out of range for {n_layers} layers")));
        }
        if l + 1 == n_layers && !allow_last {
            return Err(Error::Plan(format!("plan forbids dropping the last layer ({l})")));
        }
        routing.dropped.insert((l, target));
    }
    Ok(routing)
}

/// Mask entries for statically dropped units, one skip per sequence.
pub(crate) fn static_mask(routing: &Routing, n_seq: usize) -> Vec<LayerMask> {
    routing
        .dropped
        .iter()
        .map(|&(layer, target)| LayerMask {
            layer,
            target,
            granularity: Granularity::Sequence,
            source: MaskSource::Static,
            scores: vec![0.0; n_seq],
            keep: vec![false; n_seq],
            sequence: (0..n_seq).collect(),
            position: vec![None; n_seq],
        })
        .collect()
}

fn cosine_gap(a: &Tensor, b: &Tensor) -> (f64, usize) {
    let mut sum = 0.0;
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
        let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|q| (*q as f64).powi(2)).sum::<f64>().sqrt();
        let cos = if nx == 0.0 || ny == 0.0 { 1.0 } else { dot / (nx * ny) };
        sum += 1.0 - cos;
    }
    (sum, a.rows())
}

/// Per-layer importance of `target`: mean over calibration tokens of
/// `1 − cos(unit input, unit output)` on the dense model.
pub fn layer_importance(state: &ModelState, target: Target, calibration: &[Window], batch_size: usize) -> Result<Vec<f64>> {
    if calibration.is_empty() {
        return Err(Error::Data("calibration set is empty".into()));
    }
    let n = state.config.n_layers;
    let mut sums = vec![0.0; n];
    let mut count = 0usize;
    let opts = ForwardOptions {
        capture_hidden: true,
        ..Default::default()
    };
    for chunk in calibration.chunks(batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
        let out = state.forward(&Tape::inference(), &seqs, &Routing::dense(), &opts, None)?;
        for (l, io) in out.hidden.iter().enumerate() {
            let (s, rows) = match target {
                Target::Attention => cosine_gap(&io.input, &io.mid),
                Target::Mlp => cosine_gap(&io.mid, &io.output),
                Target::Block => cosine_gap(&io.input, &io.output),
            };
            sums[l] += s;
            if l == 0 {
                count += rows;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Drops the `drop_count` least important layers of `target`; the final
/// layer is never eligible. Ties drop the deeper layer first.
pub fn layer_drop_baseline(
    state: &ModelState,
    target: Target,
    drop_count: usize,
    calibration: &[Window],
    batch_size: usize,
) -> Result<LayerDropPlan> {
    let n = state.config.n_layers;
    let eligible = n.saturating_sub(1);
    if drop_count >= eligible {
        return Err(Error::Plan(format!(
            "cannot drop {drop_count} of {eligible} eligible layers"
        )));
    }
    let importance = layer_importance(state, target, calibration, batch_size)?;
    let mut order: Vec<usize> = (0..eligible).collect();
    order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(b.cmp(&a)));
    order.truncate(drop_count);
    Ok(LayerDropPlan {
        target,
        dropped: order,
        importance,
    })
}

/// Resets every depth router's threshold so that it keeps `capacity` of its
/// decisions on the calibration windows. Routers are visited in layer order,
/// each one seeing the inputs left by the already calibrated ones above it.
pub fn calibrate_capacity(
    state: &ModelState,
    routing: &Routing,
    calibration: &[Window],
    batch_size: usize,
    capacity: f64,
) -> Result<Routing> {
    if !(0.0..=1.0).contains(&capacity) {
        return Err(Error::Config(format!("capacity {capacity} outside [0, 1]")));
    }
    if calibration.is_empty() {
        return Err(Error::Data("calibration set is empty".into()));
    }
    let mut out = routing.clone();
    let layers: Vec<usize> = out.depth.keys().copied().collect();
    for layer in layers {
        let mut scores = Vec::new();
        for chunk in calibration.chunks(batch_size.max(1)) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
            let o = state.forward(&Tape::inference(), &seqs, &out, &ForwardOptions::default(), None)?;
            for d in o.decisions.iter().filter(|d| d.layer == layer) {
                scores.extend_from_slice(d.scores.data());
            }
        }
        scores.sort_by(|a, b| b.total_cmp(a));
        let keep = (capacity * scores.len() as f64).round() as usize;
        // keep rule is score >= threshold
        let threshold = match keep {
            // above every sigmoid output
            0 => 1.0 + f32::EPSILON,
            k => scores[k - 1],
        };
        out.depth.get_mut(&layer).expect("layer listed above").threshold = threshold;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub perplexity: f64,
    pub mean_ce: f64,
    pub total_flops: u64,
    pub attention_flops: u64,
    pub capacity: Option<f64>,
}

impl From<&EvalReport> for RunSummary {
    fn from(r: &EvalReport) -> Self {
        RunSummary {
            perplexity: r.perplexity,
            mean_ce: r.mean_ce,
            total_flops: r.flops.total(),
            attention_flops: r.flops.attention(),
            capacity: r.capacity,
        }
    }
}

/// Static drop and dynamic routing evaluated on the same windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualComputeReport {
    pub dense: RunSummary,
    pub drop: RunSummary,
    pub routed: RunSummary,
    /// `|drop − routed| / drop` over measured backbone FLOPs.
    pub flop_gap: f64,
    /// `|drop − routed| / drop` over measured attention FLOPs.
    pub attention_flop_gap: f64,
    /// Whether the routed model's perplexity is at most the static drop's.
    pub routed_not_worse: bool,
}

pub fn compare_equal_compute(
    state: &ModelState,
    drop: &Routing,
    routed: &Routing,
    data: &[Window],
    batch_size: usize,
) -> Result<EqualComputeReport> {
    let dense = RunSummary::from(&evaluate_ppl(state, &Routing::dense(), data, batch_size)?);
    let d = RunSummary::from(&evaluate_ppl(state, drop, data, batch_size)?);
    let r = RunSummary::from(&evaluate_ppl(state, routed, data, batch_size)?);
    let gap = |a: u64, b: u64| (a as f64 - b as f64).abs() / a.max(1) as f64;
    let routed_not_worse = r.perplexity <= d.perplexity;
    if !routed_not_worse {
        log::warn!(
            "routed perplexity {:.4} exceeds static drop {:.4} at equal compute",
            r.perplexity,
            d.perplexity
        );
    }
    Ok(EqualComputeReport {
        flop_gap: gap(d.total_flops, r.total_flops),
        attention_flop_gap: gap(d.attention_flops, r.attention_flops),
        routed_not_worse,
        dense,
        drop: d,
        routed: r,
    })
}
