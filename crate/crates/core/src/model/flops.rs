//! Matmul-style FLOP accounting: a `[m×k]·[k×n]` product costs `2·m·k·n`,
//! one attention (query, key) pair costs `4·head_dim` per head (score plus
//! weighted value). Norms, activations and softmax are not counted.

use serde::{Deserialize, Serialize};

use super::config::{MlpKind, ModelConfig};
use crate::error::{Error, Result};
use crate::router::{Granularity, SkipMask, Target};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub attention: u64,
    /// Dense MLP, or gate plus executed experts for MoE layers.
    pub mlp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub lm_head: u64,
    /// Router scoring, kept apart so a dense mask costs the same as no mask.
    pub router: u64,
}

impl FlopReport {
    pub fn new(n_layers: usize) -> Self {
        FlopReport {
            layers: vec![LayerFlops::default(); n_layers],
            ..Default::default()
        }
    }

    pub fn attention(&self) -> u64 {
        self.layers.iter().map(|l| l.attention).sum()
    }

    pub fn mlp(&self) -> u64 {
        self.layers.iter().map(|l| l.mlp).sum()
    }

    /// Backbone FLOPs, routers excluded.
    pub fn total(&self) -> u64 {
        self.attention() + self.mlp() + self.lm_head
    }

    pub fn total_with_routers(&self) -> u64 {
        self.total() + self.router
    }

    pub fn accumulate(&mut self, other: &FlopReport) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize(other.layers.len(), LayerFlops::default());
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.attention += b.attention;
            a.mlp += b.mlp;
        }
        self.lm_head += other.lm_head;
        self.router += other.router;
    }
}

pub(crate) fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

pub(crate) fn pair_flops(pairs: u64, d_model: usize) -> u64 {
    4 * pairs * d_model as u64
}

/// Per-row cost of the dense feed-forward sublayer (MoE: gate plus `top_k` experts).
pub fn mlp_row_flops(config: &ModelConfig) -> u64 {
    let d = config.d_model;
    match &config.moe {
        Some(moe) => matmul_flops(1, d, moe.n_experts) + moe.top_k as u64 * expert_row_flops(config),
        None => mlp_matmuls(config) * matmul_flops(1, d, config.mlp_hidden),
    }
}

pub(crate) fn expert_row_flops(config: &ModelConfig) -> u64 {
    let h = config.moe.as_ref().map_or(0, |m| m.expert_hidden);
    3 * matmul_flops(1, config.d_model, h)
}

fn mlp_matmuls(config: &ModelConfig) -> u64 {
    match config.mlp_kind {
        MlpKind::SwiGlu => 3,
        MlpKind::Gelu => 2,
    }
}

/// Attention over `c` rows with distinct positions attending causally to each other.
pub fn attention_flops(config: &ModelConfig, c: usize) -> u64 {
    let d = config.d_model;
    4 * matmul_flops(c, d, d) + pair_flops((c * (c + 1) / 2) as u64, d)
}

/// Scoring cost for one router call over sequences of the given lengths.
pub(crate) fn router_flops(d: usize, per_position: bool, granularity: Granularity, lens: &[usize]) -> u64 {
    lens.iter()
        .map(|&n| match (granularity, per_position) {
            (Granularity::Token, _) => matmul_flops(n, d, 1),
            (Granularity::Sequence, false) => matmul_flops(1, n, d) + matmul_flops(1, d, 1),
            // row t pools t + 1 rows
            (Granularity::Sequence, true) => (d * n * (n + 1)) as u64 + matmul_flops(n, d, 1),
        })
        .sum()
}

#[derive(Clone, Copy)]
enum Count {
    Dense,
    Padded,
}

/// Analytic FLOPs of a full forward over sequences of `seq_len` tokens.
///
/// With a mask, every sequence index it mentions is counted (at least one);
/// skipped units cost nothing and per-position decisions leave only the kept
/// rows as queries, keys and values. MoE layers count `top_k` experts per row.
pub fn count_flops(config: &ModelConfig, seq_len: usize, mask: Option<&SkipMask>) -> Result<FlopReport> {
    count_impl(config, seq_len, mask, Count::Dense)
}

/// As [`count_flops`], but per-position attention units pad every sequence
/// to the batch's largest kept set, as a batched kernel would.
pub fn count_flops_padded(config: &ModelConfig, seq_len: usize, mask: Option<&SkipMask>) -> Result<FlopReport> {
    count_impl(config, seq_len, mask, Count::Padded)
}

fn count_impl(config: &ModelConfig, seq_len: usize, mask: Option<&SkipMask>, mode: Count) -> Result<FlopReport> {
    if seq_len > config.max_seq_len {
        return Err(Error::Capacity {
            requested: seq_len,
            max: config.max_seq_len,
        });
    }
    let empty = SkipMask::default();
    let mask = mask.unwrap_or(&empty);
    let n_seq = mask
        .layers
        .iter()
        .flat_map(|l| l.sequence.iter().copied())
        .max()
        .map_or(1, |m| m + 1);
    let d = config.d_model;
    let mut report = FlopReport::new(config.n_layers);
    report.lm_head = n_seq as u64 * matmul_flops(seq_len, d, config.vocab_size);
    for l in 0..config.n_layers {
        let mut attn = vec![seq_len; n_seq];
        let mut mlp = vec![seq_len; n_seq];
        let mut attn_per_position = false;
        for lm in mask.layers.iter().filter(|m| m.layer == l) {
            let per_position = lm.position.iter().any(Option::is_some);
            for (b, (a, m)) in attn.iter_mut().zip(mlp.iter_mut()).enumerate() {
                let decisions = lm.for_sequence(b);
                if decisions.is_empty() {
                    continue;
                }
                let kept = if per_position {
                    decisions.iter().filter(|(_, k)| *k).count()
                } else if decisions.iter().all(|(_, k)| *k) {
                    seq_len
                } else {
                    0
                };
                if matches!(lm.target, Target::Attention | Target::Block) {
                    *a = (*a).min(kept);
                    attn_per_position |= per_position;
                }
                if matches!(lm.target, Target::Mlp | Target::Block) {
                    *m = (*m).min(kept);
                }
            }
            if lm.source == crate::router::MaskSource::Router {
                let lens: Vec<usize> = (0..n_seq)
                    .filter(|&b| !lm.for_sequence(b).is_empty())
                    .map(|_| seq_len)
                    .collect();
                report.router += router_flops(d, per_position, lm.granularity, &lens);
            }
        }
        if matches!(mode, Count::Padded) && attn_per_position {
            let widest = attn.iter().copied().max().unwrap_or(0);
            attn.iter_mut().filter(|a| **a > 0).for_each(|a| *a = widest);
        }
        report.layers[l] = LayerFlops {
            attention: attn.iter().map(|&c| if c == 0 { 0 } else { attention_flops(config, c) }).sum(),
            mlp: mlp.iter().map(|&c| c as u64 * mlp_row_flops(config)).sum(),
        };
    }
    Ok(report)
}
