//! Pre-norm decoder-only transformer with rotary attention, a gated MLP or
//! top-k MoE feed-forward, KV caching and FLOP accounting.

mod checkpoint;
mod config;
mod flops;
mod forward;
mod kv_cache;
mod moe;
mod state;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, ManifestEntry};
pub use config::{MlpKind, ModelConfig, MoeConfig};
pub use flops::{attention_flops, count_flops, count_flops_padded, mlp_row_flops, FlopReport, LayerFlops};
pub use forward::{ForwardOptions, ForwardOutput, Generation, LayerIo};
pub use kv_cache::{KvCache, LayerCache};
pub use moe::MoeOutcome;
pub(crate) use moe::moe_sublayer;
pub use state::{ModelState, Param};
