use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// silu(x·W_gate) ⊙ (x·W_up) · W_down
    SwiGlu,
    /// gelu(x·W_up) · W_down
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Renormalize the selected gate scores to sum to one. Off by default:
    /// the mixing weights are the raw softmax scores of the full distribution.
    #[serde(default)]
    pub renormalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_kind")]
    pub mlp_kind: MlpKind,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
}

fn default_mlp_kind() -> MlpKind {
    MlpKind::SwiGlu
}

fn default_eps() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    /// The desk-scale backbone: 16 byte-level blocks with a wide MLP, so that
    /// seven d-wide routers stay below 0.01% of all parameters.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 16,
            n_heads: 4,
            head_dim: 32,
            mlp_hidden: 1536,
            max_seq_len: 256,
            mlp_kind: MlpKind::SwiGlu,
            norm_eps: 1e-5,
            moe: None,
        }
    }
}

impl ModelConfig {
    /// Small two-layer model for unit tests and gradient probes.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            mlp_hidden: 32,
            max_seq_len: 32,
            mlp_kind: MlpKind::SwiGlu,
            norm_eps: 1e-5,
            moe: None,
        }
    }

    /// The default depth at half the width and a narrow MLP, for runs where
    /// training time matters more than the parameter ratio.
    pub fn narrow() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            mlp_hidden: 256,
            max_seq_len: 128,
            ..Self::default()
        }
    }

    /// Four-layer top-2-of-8 MoE backbone.
    pub fn toy_moe() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            mlp_hidden: 0,
            max_seq_len: 128,
            mlp_kind: MlpKind::SwiGlu,
            norm_eps: 1e-5,
            moe: Some(MoeConfig {
                n_experts: 8,
                top_k: 2,
                expert_hidden: 128,
                renormalize: false,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("vocab_size, d_model, n_layers and n_heads must be positive".into());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model ({}) must equal n_heads ({}) × head_dim ({})",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even for rotary embeddings, got {}", self.head_dim));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        match &self.moe {
            Some(moe) => {
                if moe.top_k == 0 || moe.top_k > moe.n_experts {
                    return fail(format!(
                        "moe requires 1 <= top_k <= n_experts, got top_k={} n_experts={}",
                        moe.top_k, moe.n_experts
                    ));
                }
                if moe.expert_hidden == 0 {
                    return fail("moe.expert_hidden must be positive".into());
                }
            }
            None if self.mlp_hidden == 0 => return fail("mlp_hidden must be positive".into()),
            None => {}
        }
        Ok(())
    }

    /// Per-block parameter shapes, in a fixed order.
    pub fn layer_param_shapes(&self, layer: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let p = |n: &str| format!("layers.{layer}.{n}");
        let mut out = vec![
            (p("attn_norm"), vec![d]),
            (p("wq"), vec![d, d]),
            (p("wk"), vec![d, d]),
            (p("wv"), vec![d, d]),
            (p("wo"), vec![d, d]),
            (p("mlp_norm"), vec![d]),
        ];
        match &self.moe {
            Some(moe) => {
                out.push((p("moe.gate"), vec![d, moe.n_experts]));
                for e in 0..moe.n_experts {
                    let h = moe.expert_hidden;
                    out.push((p(&format!("experts.{e}.w_gate")), vec![d, h]));
                    out.push((p(&format!("experts.{e}.w_up")), vec![d, h]));
                    out.push((p(&format!("experts.{e}.w_down")), vec![h, d]));
                }
            }
            None => {
                let h = self.mlp_hidden;
                if self.mlp_kind == MlpKind::SwiGlu {
                    out.push((p("mlp.w_gate"), vec![d, h]));
                }
                out.push((p("mlp.w_up"), vec![d, h]));
                out.push((p("mlp.w_down"), vec![h, d]));
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, self.d_model])];
        for l in 0..self.n_layers {
            out.extend(self.layer_param_shapes(l));
        }
        out.push(("final_norm".into(), vec![self.d_model]));
        out.push(("lm_head".into(), vec![self.d_model, self.vocab_size]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::toy_moe().validate().unwrap();
    }

    #[test]
    fn head_mismatch_rejected() {
        let mut c = ModelConfig::tiny();
        c.head_dim = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn moe_top_k_bounds() {
        let mut c = ModelConfig::toy_moe();
        c.moe.as_mut().unwrap().top_k = 9;
        assert!(c.validate().is_err());
        c.moe.as_mut().unwrap().top_k = 0;
        assert!(c.validate().is_err());
        c.moe.as_mut().unwrap().top_k = 8;
        c.validate().unwrap();
    }

    #[test]
    fn default_param_count() {
        // 16 × (4·128² + 3·128·1536 + 2·128) + 2·256·128 + 128
        assert_eq!(ModelConfig::default().param_count(), 10_555_520);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::tiny()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
