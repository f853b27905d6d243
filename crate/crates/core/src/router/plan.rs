use serde::{Deserialize, Serialize};

use super::{Granularity, Pooling, RouterState, Routing, Target, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub layer: usize,
    pub target: Target,
    pub granularity: Granularity,
}

/// Which layers carry routers, and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoDLayerPlan {
    pub entries: Vec<PlanEntry>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default)]
    pub pooling: Pooling,
    /// Permit a router on the final layer.
    #[serde(default)]
    pub allow_last: bool,
}

fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD
}

impl MoDLayerPlan {
    /// The `count` deepest layers, excluding the final one.
    pub fn deepest(n_layers: usize, count: usize, target: Target, granularity: Granularity) -> Result<Self> {
        if count == 0 || count + 1 > n_layers {
            return Err(Error::Plan(format!(
                "cannot place {count} routers below the last of {n_layers} layers"
            )));
        }
        let last = n_layers - 1;
        Ok(Self::explicit(last - count..last, target, granularity))
    }

    /// Routers on the deepest half of the stack, excluding the final layer
    /// (layers 8–14 of a 16-layer model).
    pub fn default_for(n_layers: usize, target: Target, granularity: Granularity) -> Result<Self> {
        let start = n_layers / 2;
        if n_layers < 3 {
            return Err(Error::Plan(format!(
                "default plan needs at least 3 layers, model has {n_layers}"
            )));
        }
        Self::deepest(n_layers, n_layers - 1 - start, target, granularity)
    }

    pub fn explicit(layers: impl IntoIterator<Item = usize>, target: Target, granularity: Granularity) -> Self {
        MoDLayerPlan {
            entries: layers
                .into_iter()
                .map(|layer| PlanEntry {
                    layer,
                    target,
                    granularity,
                })
                .collect(),
            threshold: DEFAULT_THRESHOLD,
            pooling: Pooling::Mean,
            allow_last: false,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.layer >= config.n_layers {
                return Err(Error::Plan(format!(
                    "router on layer {} but model has {} layers",
                    e.layer, config.n_layers
                )));
            }
            if e.layer == config.n_layers - 1 && !self.allow_last {
                return Err(Error::Plan(format!(
                    "router on final layer {} is not allowed by this plan",
                    e.layer
                )));
            }
            if !seen.insert(e.layer) {
                return Err(Error::Plan(format!("layer {} routed twice", e.layer)));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Plan(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Zero-initialized routers for every entry.
    pub fn attach(&self, config: &ModelConfig) -> Result<Routing> {
        self.validate(config)?;
        Ok(Routing::from_routers(self.entries.iter().map(|e| {
            let mut r = RouterState::zero_init(e.layer, e.target, e.granularity, config.d_model);
            r.threshold = self.threshold;
            r.pooling = self.pooling;
            r
        })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_on_sixteen_layers() {
        let p = MoDLayerPlan::default_for(16, Target::Attention, Granularity::Sequence).unwrap();
        assert_eq!(p.layers(), (8..=14).collect::<Vec<_>>());
        assert_eq!(p.threshold, 0.5);
    }

    #[test]
    fn deepest_eight() {
        let p = MoDLayerPlan::deepest(16, 8, Target::Attention, Granularity::Sequence).unwrap();
        assert_eq!(p.layers(), (7..=14).collect::<Vec<_>>());
        assert!(MoDLayerPlan::deepest(4, 4, Target::Mlp, Granularity::Token).is_err());
    }

    #[test]
    fn validation_errors() {
        let cfg = ModelConfig::tiny();
        let p = MoDLayerPlan::explicit([1], Target::Mlp, Granularity::Token);
        assert!(matches!(p.validate(&cfg), Err(Error::Plan(_))));
        let mut p = p;
        p.allow_last = true;
        p.validate(&cfg).unwrap();
        let p = MoDLayerPlan::explicit([0, 0], Target::Mlp, Granularity::Token);
        assert!(p.validate(&cfg).is_err());
        let p = MoDLayerPlan::explicit([5], Target::Mlp, Granularity::Token);
        assert!(p.validate(&cfg).is_err());
    }
}
