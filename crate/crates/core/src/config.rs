//! The single JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::router::{Granularity, MoDLayerPlan, Target};
use crate::train::{CorpusOptions, PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// UTF-8 text file; the built-in synthetic corpus when absent.
    pub path: Option<PathBuf>,
    /// Size of the synthetic corpus in bytes.
    pub synthetic_bytes: usize,
    pub max_windows: Option<usize>,
    pub eval_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let base = CorpusOptions::default();
        CorpusConfig {
            path: None,
            synthetic_bytes: 400_000,
            max_windows: base.max_windows,
            eval_fraction: base.eval_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Held-out windows used for evaluation and traces; all when absent.
    pub max_windows: Option<usize>,
    pub bench_batch: usize,
    pub bench_prompt_len: usize,
    pub bench_gen_len: usize,
    pub bench_repeats: usize,
    pub drop_target: Target,
    pub drop_count: usize,
    pub expert_drop_fraction: f64,
    pub calibration_sequences: usize,
    /// Also write CSV next to JSON and JSON-lines outputs.
    pub csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 16,
            max_windows: None,
            bench_batch: 4,
            bench_prompt_len: 64,
            bench_gen_len: 32,
            bench_repeats: 5,
            drop_target: Target::Attention,
            drop_count: 4,
            expert_drop_fraction: 0.25,
            calibration_sequences: 64,
            csv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Default router placement when the config gives no plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefaultPlan {
    pub target: Target,
    pub granularity: Granularity,
}

impl Default for DefaultPlan {
    fn default() -> Self {
        DefaultPlan {
            target: Target::Attention,
            granularity: Granularity::Sequence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Explicit router plan; the deepest-half plan of `default_plan` when absent.
    pub plan: Option<MoDLayerPlan>,
    pub default_plan: DefaultPlan,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.resolved_plan()?.validate(&self.model)?;
        if !(0.0..1.0).contains(&self.eval.expert_drop_fraction) {
            return Err(Error::Config("expert_drop_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The explicit plan, or the default deepest-half plan for this model.
    pub fn resolved_plan(&self) -> Result<MoDLayerPlan> {
        match &self.plan {
            Some(p) => Ok(p.clone()),
            None => MoDLayerPlan::default_for(
                self.model.n_layers,
                self.default_plan.target,
                self.default_plan.granularity,
            ),
        }
    }

    /// Copy with the plan filled in, as written next to every output.
    pub fn resolved(&self) -> Result<Self> {
        Ok(RunConfig {
            plan: Some(self.resolved_plan()?),
            ..self.clone()
        })
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            window: self.train.seq_len,
            max_windows: self.corpus.max_windows,
            eval_fraction: self.corpus.eval_fraction,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lamda": 0.1}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn default_plan_is_deepest_half() {
        let plan = RunConfig::default().resolved_plan().unwrap();
        assert_eq!(plan.layers(), (8..15).collect::<Vec<_>>());
        assert_eq!(plan.threshold, 0.5);
    }
}
