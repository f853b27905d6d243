//! Per-layer depth routers: importance scoring, threshold masks, the masked
//! training forward with straight-through gradients, and the bypassing
//! inference forward.

mod forward;
mod plan;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_skip::ExpertSkipRouter;
use crate::tensor::Tensor;

pub use forward::{binarize, mod_forward_infer, mod_forward_train, route_score, InferOutcome, PoolCarry, RowLayout};
pub use plan::{MoDLayerPlan, PlanEntry};

/// Default keep threshold: the sigmoid midpoint.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Attention,
    Mlp,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Sequence,
}

/// How sequence-level routers pool the layer input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every position of the sequence (reads future positions during training).
    #[default]
    Mean,
    /// Mean over positions up to and including the current one; yields one
    /// decision per position.
    CausalPrefixMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Binary mask with straight-through gradients.
    Hard,
    /// Mask replaced by the raw score; used to probe the straight-through path.
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train(MaskMode),
    Infer,
}

/// Replaces computed router scores, e.g. to force a unit off.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreOverride {
    Constant(f32),
    PerDecision(Vec<f32>),
}

impl ScoreOverride {
    pub fn materialize(&self, n: usize) -> Result<Vec<f32>> {
        match self {
            ScoreOverride::Constant(v) => Ok(vec![*v; n]),
            ScoreOverride::PerDecision(v) if v.len() == n => Ok(v.clone()),
            ScoreOverride::PerDecision(v) => Err(Error::Shape {
                op: "score_override",
                lhs: vec![n],
                rhs: vec![v.len()],
            }),
        }
    }
}

/// A d→1 gate deciding whether `target` at `layer` runs.
#[derive(Clone, Debug)]
pub struct RouterState {
    pub layer: usize,
    pub target: Target,
    pub granularity: Granularity,
    pub pooling: Pooling,
    pub threshold: f32,
    /// `[d_model × 1]`, the router's only trainable tensor.
    pub weight: Tensor,
}

impl RouterState {
    /// Zero weights, so every score starts at exactly 0.5 and every unit is kept.
    pub fn zero_init(layer: usize, target: Target, granularity: Granularity, d_model: usize) -> Self {
        RouterState {
            layer,
            target,
            granularity,
            pooling: Pooling::Mean,
            threshold: DEFAULT_THRESHOLD,
            weight: Tensor::zeros(&[d_model, 1]),
        }
    }

    pub fn name(&self) -> String {
        format!("router.{}.W", self.layer)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel()
    }

    /// One decision per position (token routers and causal-prefix pooling).
    pub fn per_position(&self) -> bool {
        self.granularity == Granularity::Token || self.pooling == Pooling::CausalPrefixMean
    }
}

/// Everything the forward pass needs to know about skipping.
#[derive(Clone, Debug, Default)]
pub struct Routing {
    pub depth: BTreeMap<usize, RouterState>,
    /// Units removed statically (Layer-Drop baselines).
    pub dropped: BTreeSet<(usize, Target)>,
    pub experts: BTreeMap<usize, ExpertSkipRouter>,
    /// Experts removed statically (Expert-Drop baseline).
    pub dropped_experts: BTreeSet<(usize, usize)>,
}

impl Routing {
    pub fn dense() -> Self {
        Self::default()
    }

    pub fn from_routers(routers: impl IntoIterator<Item = RouterState>) -> Self {
        Routing {
            depth: routers.into_iter().map(|r| (r.layer, r)).collect(),
            ..Default::default()
        }
    }

    pub fn is_dense(&self) -> bool {
        self.depth.is_empty()
            && self.dropped.is_empty()
            && self.experts.is_empty()
            && self.dropped_experts.is_empty()
    }

    pub fn is_dropped(&self, layer: usize, target: Target) -> bool {
        self.dropped.contains(&(layer, target))
    }

    /// Every trainable router tensor, keyed by checkpoint name.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .depth
            .values()
            .map(|r| (r.name(), r.weight.clone()))
            .collect();
        for er in self.experts.values() {
            for (e, w) in er.weights.iter().enumerate() {
                out.push((er.name(e), w.clone()));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces a router tensor by checkpoint name.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        for r in self.depth.values_mut() {
            if r.name() == name {
                check_same_shape(&r.weight, &value)?;
                r.weight = value;
                return Ok(());
            }
        }
        for er in self.experts.values_mut() {
            for e in 0..er.weights.len() {
                if er.name(e) == name {
                    check_same_shape(&er.weights[e], &value)?;
                    er.weights[e] = value;
                    return Ok(());
                }
            }
        }
        Err(Error::Config(format!("unknown router parameter {name}")))
    }

    /// Flags every router tensor as trainable (or not).
    pub fn set_trainable(&mut self, trainable: bool) {
        for r in self.depth.values_mut() {
            r.weight = r.weight.with_requires_grad(trainable);
        }
        for er in self.experts.values_mut() {
            for w in er.weights.iter_mut() {
                *w = w.with_requires_grad(trainable);
            }
        }
    }

    /// Serializable description of the routers (weights excluded).
    pub fn metadata(&self) -> RoutingMeta {
        RoutingMeta {
            routers: self
                .depth
                .values()
                .map(|r| RouterMeta {
                    layer: r.layer,
                    target: r.target,
                    granularity: r.granularity,
                    pooling: r.pooling,
                    threshold: r.threshold,
                })
                .collect(),
            experts: self
                .experts
                .values()
                .map(|e| ExpertRouterMeta {
                    layer: e.layer,
                    n_experts: e.weights.len(),
                    threshold: e.threshold,
                })
                .collect(),
            dropped: self
                .dropped
                .iter()
                .map(|&(layer, target)| DroppedUnit { layer, target })
                .collect(),
            dropped_experts: self.dropped_experts.iter().copied().collect(),
        }
    }

    /// Rebuilds routing from metadata plus named tensors.
    pub fn from_metadata(meta: &RoutingMeta, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let fetch = |name: String| {
            tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("router tensor {name} missing")))
        };
        let mut routing = Routing::default();
        for m in &meta.routers {
            let weight = fetch(format!("router.{}.W", m.layer))?;
            routing.depth.insert(
                m.layer,
                RouterState {
                    layer: m.layer,
                    target: m.target,
                    granularity: m.granularity,
                    pooling: m.pooling,
                    threshold: m.threshold,
                    weight,
                },
            );
        }
        for m in &meta.experts {
            let mut er = ExpertSkipRouter {
                layer: m.layer,
                threshold: m.threshold,
                weights: Vec::with_capacity(m.n_experts),
            };
            for e in 0..m.n_experts {
                er.weights.push(fetch(er.name(e))?);
            }
            routing.experts.insert(m.layer, er);
        }
        routing.dropped = meta.dropped.iter().map(|d| (d.layer, d.target)).collect();
        routing.dropped_experts = meta.dropped_experts.iter().copied().collect();
        Ok(routing)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "router parameter",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterMeta {
    pub layer: usize,
    pub target: Target,
    pub granularity: Granularity,
    #[serde(default)]
    pub pooling: Pooling,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRouterMeta {
    pub layer: usize,
    pub n_experts: usize,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroppedUnit {
    pub layer: usize,
    pub target: Target,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingMeta {
    #[serde(default)]
    pub routers: Vec<RouterMeta>,
    #[serde(default)]
    pub experts: Vec<ExpertRouterMeta>,
    #[serde(default)]
    pub dropped: Vec<DroppedUnit>,
    #[serde(default)]
    pub dropped_experts: Vec<(usize, usize)>,
}

/// Routing decisions of one routed unit during one forward pass.
#[derive(Clone, Debug)]
pub struct Decision {
    pub layer: usize,
    pub target: Target,
    pub granularity: Granularity,
    /// Scores R(x); on the tape in training mode.
    pub scores: Tensor,
    /// Mask M as used in the forward (straight-through in hard training mode).
    pub mask: Tensor,
    pub keep: Vec<bool>,
    /// Batch index of the sequence each decision belongs to.
    pub sequence: Vec<usize>,
    /// Absolute position for per-position decisions.
    pub position: Vec<Option<usize>>,
}

/// Where a mask entry came from; static drops carry no router cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Router,
    Static,
}

/// Binarized keep/skip decisions for one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer: usize,
    pub target: Target,
    pub granularity: Granularity,
    pub source: MaskSource,
    pub scores: Vec<f32>,
    pub keep: Vec<bool>,
    pub sequence: Vec<usize>,
    pub position: Vec<Option<usize>>,
}

impl LayerMask {
    pub fn capacity(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }

    /// Decisions belonging to one sequence, as (position, keep) pairs.
    pub fn for_sequence(&self, seq: usize) -> Vec<(Option<usize>, bool)> {
        self.sequence
            .iter()
            .zip(self.position.iter().zip(&self.keep))
            .filter(|(s, _)| **s == seq)
            .map(|(_, (p, k))| (*p, *k))
            .collect()
    }
}

/// Decisions across all routed units; capacity is ‖M‖₀ over the decision count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipMask {
    pub layers: Vec<LayerMask>,
}

impl SkipMask {
    pub fn from_decisions(decisions: &[Decision]) -> Self {
        SkipMask {
            layers: decisions
                .iter()
                .map(|d| LayerMask {
                    layer: d.layer,
                    target: d.target,
                    granularity: d.granularity,
                    source: MaskSource::Router,
                    scores: d.scores.to_vec(),
                    keep: d.keep.clone(),
                    sequence: d.sequence.clone(),
                    position: d.position.clone(),
                })
                .collect(),
        }
    }

    pub fn kept(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.keep.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn decisions(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    /// Fraction of kept decisions, in [0, 1]; 1 when there are none.
    pub fn capacity(&self) -> f64 {
        let n = self.decisions();
        if n == 0 {
            1.0
        } else {
            self.kept() as f64 / n as f64
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_router() {
        let r = RouterState::zero_init(3, Target::Attention, Granularity::Sequence, 16);
        assert_eq!(r.param_count(), 16);
        assert_eq!(r.threshold, 0.5);
        assert_eq!(r.name(), "router.3.W");
        assert!(r.weight.data().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn metadata_round_trip() {
        let mut routing = Routing::from_routers([
            RouterState::zero_init(1, Target::Mlp, Granularity::Token, 4),
            RouterState::zero_init(2, Target::Attention, Granularity::Sequence, 4),
        ]);
        routing.dropped.insert((0, Target::Block));
        let meta = routing.metadata();
        let json = serde_json::to_string(&meta).unwrap();
        let back: RoutingMeta = serde_json::from_str(&json).unwrap();
        assert_eq!(back, meta);
        let tensors: BTreeMap<String, Tensor> = routing.parameters().into_iter().collect();
        let rebuilt = Routing::from_metadata(&back, &tensors).unwrap();
        assert_eq!(rebuilt.depth.len(), 2);
        assert!(rebuilt.is_dropped(0, Target::Block));
    }

    #[test]
    fn mask_capacity() {
        let lm = |keep: Vec<bool>| LayerMask {
            layer: 0,
            target: Target::Attention,
            granularity: Granularity::Token,
            source: MaskSource::Router,
            scores: vec![0.0; keep.len()],
            sequence: vec![0; keep.len()],
            position: vec![None; keep.len()],
            keep,
        };
        let m = SkipMask {
            layers: vec![lm(vec![true, false]), lm(vec![true, true])],
        };
        assert_eq!(m.capacity(), 0.75);
        assert_eq!(SkipMask::default().capacity(), 1.0);
    }
}
