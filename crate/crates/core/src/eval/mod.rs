//! Measurement harness: perplexity, wall-clock and FLOP / KV-cache cost
//! reports, skip traces, and the static Layer-Drop baseline.

mod layer_drop;
mod trace;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_flops, count_flops_padded, FlopReport, ForwardOptions, Generation, ModelState};
use crate::router::{Routing, SkipMask};
use crate::tensor::Tape;
use crate::train::{measured_capacity, Window};

pub use layer_drop::{
    calibrate_capacity, compare_equal_compute, layer_drop_baseline, layer_importance, static_drop, EqualComputeReport, LayerDropPlan,
    RunSummary,
};
pub use trace::{collect_trace, skip_ratio_summary, LayerKeep, SkipTrace, TraceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_ce: f64,
    pub perplexity: f64,
    pub tokens: usize,
    /// Fraction of kept routing decisions; `None` without routers.
    pub capacity: Option<f64>,
    pub flops: FlopReport,
}

/// Next-token cross-entropy of one row in f64.
fn row_ce(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + z.ln() - logits[target] as f64
}

/// `exp(mean next-token cross-entropy)` over held-out windows, with bypassing
/// inference when routers are present.
pub fn evaluate_ppl(state: &ModelState, routing: &Routing, data: &[Window], batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let tape = Tape::inference();
    let opts = ForwardOptions::default();
    let (mut sum, mut tokens) = (0.0f64, 0usize);
    let (mut kept, mut decisions) = (0.0f64, 0usize);
    let mut flops = FlopReport::new(state.config.n_layers);
    for chunk in data.chunks(batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
        let out = state.forward(&tape, &seqs, routing, &opts, None)?;
        let targets = chunk.iter().flat_map(|w| w.targets.iter());
        for (r, t) in targets.enumerate() {
            if let Some(t) = *t {
                sum += row_ce(out.logits.row(r), t);
                tokens += 1;
            }
        }
        let n = out.decisions.iter().map(|d| d.keep.len()).sum::<usize>()
            + out.expert_decisions.iter().map(|d| d.keep.len()).sum::<usize>();
        kept += measured_capacity(&out).0 * n as f64;
        decisions += n;
        flops.accumulate(&out.flops);
    }
    if tokens == 0 {
        return Err(Error::Data("evaluation set has no targets".into()));
    }
    let mean_ce = sum / tokens as f64;
    Ok(EvalReport {
        mean_ce,
        perplexity: mean_ce.exp(),
        tokens,
        capacity: (decisions > 0).then(|| kept / decisions as f64),
        flops,
    })
}

/// Host description attached to every wall-clock report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub arch: String,
    pub os: String,
    pub cpu: Option<String>,
    pub available_cores: usize,
    /// The timed region runs on one thread.
    pub workers: usize,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        });
        HardwareInfo {
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            cpu,
            available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            workers: 1,
        }
    }
}

/// Cost of one configuration over the benchmark workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub total_flops: u64,
    pub attention_flops: u64,
    pub router_flops: u64,
    /// Analytic prefill attention FLOPs with ragged per-sequence token sets.
    pub prefill_attention_flops_ideal: u64,
    /// The same with every sequence padded to the batch maximum.
    pub prefill_attention_flops_padded: u64,
    pub peak_kv_bytes: usize,
    pub prefill_tokens_per_sec: f64,
    pub generation_tokens_per_sec: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub repeats: usize,
    pub dense: RunCost,
    pub routed: RunCost,
    /// Routed ÷ dense tokens per second over prefill plus generation.
    pub speedup: f64,
    pub prefill_speedup: f64,
    pub generation_speedup: f64,
    /// 1 − routed ÷ dense attention FLOPs.
    pub attention_flop_reduction: f64,
    pub kv_bytes_saved: i64,
    pub hardware: HardwareInfo,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Timing {
    prefill: Duration,
    generation: Duration,
}

fn per_sec(tokens: usize, d: Duration) -> f64 {
    tokens as f64 / d.as_secs_f64().max(1e-12)
}

/// Times greedy generation (prefill plus `gen_len` tokens) for the dense
/// backbone and for `routing` on identical prompts, alternating the two.
/// The first two of `repeats + 2` rounds are warm-up and discarded; the
/// order within a round alternates.
pub fn benchmark_speed(
    state: &ModelState,
    routing: &Routing,
    batch: usize,
    prompt_len: usize,
    gen_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<CostReport> {
    if batch == 0 || prompt_len == 0 || repeats == 0 {
        return Err(Error::Config("batch, prompt_len and repeats must be positive".into()));
    }
    let cfg = &state.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..prompt_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
        .collect();
    let dense_routing = Routing::dense();
    let configs = [&dense_routing, routing];
    let mut timings: [Vec<Timing>; 2] = [Vec::new(), Vec::new()];
    let mut gens: [Option<Generation>; 2] = [None, None];
    for round in 0..repeats + 2 {
        // alternate which configuration goes first to cancel order effects
        let order = if round % 2 == 0 { [0, 1] } else { [1, 0] };
        for i in order {
            let g = state.generate(configs[i], &prompts, gen_len)?;
            if round >= 2 {
                timings[i].push(Timing {
                    prefill: g.prefill_time,
                    generation: g.generation_time,
                });
            }
            if round == 0 {
                gens[i] = Some(g);
            }
        }
    }
    let prefill_tokens = batch * prompt_len;
    let gen_tokens = batch * gen_len.saturating_sub(1);
    let mut costs = Vec::new();
    for (i, r) in configs.iter().enumerate() {
        let g = gens[i].as_ref().expect("round 0 ran both");
        let mut flops = g.prefill_flops.clone();
        flops.accumulate(&g.generation_flops);
        let mask = prefill_mask(state, r, &prompts)?;
        let ideal = count_flops(cfg, prompt_len, mask.as_ref())?;
        let padded = count_flops_padded(cfg, prompt_len, mask.as_ref())?;
        // without a mask the analytic count covers a single sequence
        let seqs = if mask.is_none() { batch as u64 } else { 1 };
        let t = &timings[i];
        costs.push(RunCost {
            total_flops: flops.total(),
            attention_flops: flops.attention(),
            router_flops: flops.router,
            prefill_attention_flops_ideal: ideal.attention() * seqs,
            prefill_attention_flops_padded: padded.attention() * seqs,
            peak_kv_bytes: g.peak_cache_bytes,
            prefill_tokens_per_sec: median(t.iter().map(|x| per_sec(prefill_tokens, x.prefill)).collect()),
            generation_tokens_per_sec: median(t.iter().map(|x| per_sec(gen_tokens, x.generation)).collect()),
            tokens_per_sec: median(
                t.iter()
                    .map(|x| per_sec(prefill_tokens + gen_tokens, x.prefill + x.generation))
                    .collect(),
            ),
        });
    }
    let routed = costs.pop().expect("two runs");
    let dense = costs.pop().expect("two runs");
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 1.0 };
    Ok(CostReport {
        batch,
        prompt_len,
        gen_len,
        repeats,
        speedup: ratio(routed.tokens_per_sec, dense.tokens_per_sec),
        prefill_speedup: ratio(routed.prefill_tokens_per_sec, dense.prefill_tokens_per_sec),
        generation_speedup: ratio(routed.generation_tokens_per_sec, dense.generation_tokens_per_sec),
        attention_flop_reduction: 1.0 - ratio(routed.attention_flops as f64, dense.attention_flops as f64),
        kv_bytes_saved: dense.peak_kv_bytes as i64 - routed.peak_kv_bytes as i64,
        dense,
        routed,
        hardware: HardwareInfo::detect(),
    })
}

/// Routing decisions the prompts receive at prefill, if any unit is routed or dropped.
fn prefill_mask(state: &ModelState, routing: &Routing, prompts: &[Vec<usize>]) -> Result<Option<SkipMask>> {
    if routing.depth.is_empty() && routing.dropped.is_empty() {
        return Ok(None);
    }
    let out = state.forward(&Tape::inference(), prompts, routing, &ForwardOptions::default(), None)?;
    let mut mask = out.skip_mask();
    mask.layers.extend(layer_drop::static_mask(routing, prompts.len()));
    Ok(Some(mask))
}
