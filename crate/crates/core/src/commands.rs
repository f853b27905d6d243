//! Command implementations behind the CLI. Commands compose through files in
//! the run's output directory:
//!
//! | command          | reads                               | writes                                   |
//! |------------------|-------------------------------------|------------------------------------------|
//! | `init`           |                                     | `init.ckpt`                              |
//! | `pretrain`       | `init.ckpt`                         | `backbone.ckpt`, `pretrain_log.jsonl`    |
//! | `attach-routers` | `backbone.ckpt`                     | `routers.ckpt`                           |
//! | `train-router`   | `backbone.ckpt`, `routers.ckpt`     | `trained_routers.ckpt`, `train_log.jsonl`|
//! | `eval`           | `backbone.ckpt`, trained routers    | `eval_report.json`                       |
//! | `bench`          | `backbone.ckpt`, trained routers    | `cost_report.json`                       |
//! | `trace`          | `backbone.ckpt`, trained routers    | `trace.jsonl`, `trace_summary.json`      |
//! | `drop-baseline`  | `backbone.ckpt`, trained routers    | `drop_plan.json`, `equal_compute.json`   |
//! | `expert-drop`    | `backbone.ckpt`                     | `expert_drop.json`                       |
//! | `moe-train`      | `backbone.ckpt`                     | `moe_routers.ckpt`, `moe_train_log.jsonl`, `expert_load.jsonl` |
//!
//! Every command also writes `resolved_config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    benchmark_speed, collect_trace, compare_equal_compute, evaluate_ppl, layer_drop_baseline, skip_ratio_summary,
};
use crate::model::{read_checkpoint, write_checkpoint, ForwardOptions, ModelConfig, ModelState};
use crate::moe_skip::{attach_expert_routers, expert_drop_baseline, expert_importance, ExpertLoadReport};
use crate::router::Routing;
use crate::tensor::Tape;
use crate::train::{dataset_from_text, ingest_corpus, pretrain, synthetic_corpus, train_routers, Dataset, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Init,
    Pretrain,
    AttachRouters,
    TrainRouter,
    Eval,
    Bench,
    Trace,
    DropBaseline,
    ExpertDrop,
    MoeTrain,
}

pub const INIT: &str = "init.ckpt";
pub const BACKBONE: &str = "backbone.ckpt";
pub const ROUTERS: &str = "routers.ckpt";
pub const TRAINED: &str = "trained_routers.ckpt";
pub const MOE_ROUTERS: &str = "moe_routers.ckpt";

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let dir = &cfg.paths.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("resolved_config.json"), &cfg.resolved()?.to_json()?)?;
    match cmd {
        Command::Init => init(cfg),
        Command::Pretrain => pretrain_cmd(cfg),
        Command::AttachRouters => attach(cfg),
        Command::TrainRouter => train_router(cfg),
        Command::Eval => eval(cfg),
        Command::Bench => bench(cfg),
        Command::Trace => trace(cfg),
        Command::DropBaseline => drop_baseline(cfg),
        Command::ExpertDrop => expert_drop(cfg),
        Command::MoeTrain => moe_train(cfg),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn save_state(path: &Path, state: &ModelState) -> Result<()> {
    write_checkpoint(path, &state.config, None, state.iter().map(|(n, p)| (n, &p.tensor)))
}

/// Loads a frozen backbone and checks it against the configured model.
pub fn load_backbone(path: &Path, expected: &ModelConfig) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let ck = read_checkpoint(path)?;
    if ck.header.config != *expected {
        return Err(Error::Plan(format!(
            "{} holds a different model than the configuration describes",
            path.display()
        )));
    }
    let mut state = ModelState::from_tensors(ck.header.config, ck.tensors)?;
    state.freeze();
    Ok(state)
}

pub fn save_routing(path: &Path, config: &ModelConfig, routing: &Routing) -> Result<()> {
    let params = routing.parameters();
    let meta = serde_json::to_value(routing.metadata())?;
    write_checkpoint(path, config, Some(meta), params.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn load_routing(path: &Path, config: &ModelConfig) -> Result<Routing> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let ck = read_checkpoint(path)?;
    if ck.header.config != *config {
        return Err(Error::Plan(format!(
            "routers in {} were built for a different model",
            path.display()
        )));
    }
    let meta = ck
        .header
        .routing
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no routing metadata", path.display())))?;
    Routing::from_metadata(&serde_json::from_value(meta)?, &ck.tensors)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let opts = cfg.corpus_options();
    match &cfg.corpus.path {
        Some(p) => ingest_corpus(p, &opts),
        None => dataset_from_text(&synthetic_corpus(cfg.seed, cfg.corpus.synthetic_bytes), &opts),
    }
}

fn eval_windows<'a>(cfg: &RunConfig, data: &'a Dataset) -> &'a [Window] {
    let n = cfg.eval.max_windows.unwrap_or(data.eval.len()).min(data.eval.len());
    &data.eval[..n]
}

fn calibration<'a>(cfg: &RunConfig, data: &'a Dataset) -> &'a [Window] {
    &data.train[..cfg.eval.calibration_sequences.min(data.train.len())]
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn backbone(cfg: &RunConfig) -> Result<ModelState> {
    load_backbone(&out(cfg, BACKBONE), &cfg.model)
}

fn init(cfg: &RunConfig) -> Result<Value> {
    let state = ModelState::init(cfg.model.clone(), cfg.seed)?;
    let path = out(cfg, INIT);
    save_state(&path, &state)?;
    Ok(json!({"checkpoint": path, "parameters": state.param_count(), "checksum": state.checksum()}))
}

fn pretrain_cmd(cfg: &RunConfig) -> Result<Value> {
    let mut state = load_backbone(&out(cfg, INIT), &cfg.model)?;
    let data = load_dataset(cfg)?;
    let mut log = Vec::new();
    let pcfg = crate::train::PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let losses = pretrain(&mut state, &data.train, &pcfg, Some(&mut log))?;
    let log_path = out(cfg, "pretrain_log.jsonl");
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    save_state(&out(cfg, BACKBONE), &state)?;
    let dense = evaluate_ppl(&state, &Routing::dense(), eval_windows(cfg, &data), cfg.eval.batch_size)?;
    Ok(json!({
        "steps": losses.len(),
        "final_loss": losses.last(),
        "eval_perplexity": dense.perplexity,
        "checksum": state.checksum(),
    }))
}

fn attach(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let plan = cfg.resolved_plan()?;
    let routing = plan.attach(&state.config)?;
    save_routing(&out(cfg, ROUTERS), &state.config, &routing)?;
    Ok(json!({
        "layers": plan.layers(),
        "threshold": plan.threshold,
        "router_parameters": routing.param_count(),
        "model_parameters": state.param_count(),
    }))
}

fn train_router(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let routing = load_routing(&out(cfg, ROUTERS), &state.config)?;
    let data = load_dataset(cfg)?;
    let mut log = Vec::new();
    let tcfg = crate::train::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train_routers(&state, &routing, &data.train, &tcfg, Some(&mut log))?;
    let log_path = out(cfg, "train_log.jsonl");
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    save_routing(&out(cfg, TRAINED), &state.config, &outcome.routing)?;
    let last = outcome.history.last();
    Ok(json!({
        "steps": outcome.history.len(),
        "final_capacity": last.map(|h| h.capacity),
        "final_task_loss": last.map(|h| h.task_loss),
        "backbone_checksum": state.checksum(),
    }))
}

fn trained(cfg: &RunConfig, state: &ModelState) -> Result<Routing> {
    load_routing(&out(cfg, TRAINED), &state.config)
}

fn eval(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let data = load_dataset(cfg)?;
    let windows = eval_windows(cfg, &data);
    let dense = evaluate_ppl(&state, &Routing::dense(), windows, cfg.eval.batch_size)?;
    let routed = match trained(cfg, &state) {
        Ok(r) => Some(evaluate_ppl(&state, &r, windows, cfg.eval.batch_size)?),
        Err(Error::MissingCheckpoint(_)) => None,
        Err(e) => return Err(e),
    };
    let report = json!({
        "dense": dense,
        "routed": routed,
        "relative_perplexity_increase": routed.as_ref().map(|r| r.perplexity / dense.perplexity - 1.0),
    });
    write_json(&out(cfg, "eval_report.json"), &report)?;
    Ok(report)
}

fn bench(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let routing = trained(cfg, &state)?;
    let e = &cfg.eval;
    let report = benchmark_speed(
        &state,
        &routing,
        e.bench_batch,
        e.bench_prompt_len,
        e.bench_gen_len,
        e.bench_repeats,
        cfg.seed,
    )?;
    write_json(&out(cfg, "cost_report.json"), &report)?;
    if e.csv {
        let path = out(cfg, "cost_report.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["run", "total_flops", "attention_flops", "router_flops", "peak_kv_bytes", "prefill_tok_s", "generation_tok_s", "tok_s"])?;
        for (name, r) in [("dense", &report.dense), ("routed", &report.routed)] {
            w.write_record([
                name.to_string(),
                r.total_flops.to_string(),
                r.attention_flops.to_string(),
                r.router_flops.to_string(),
                r.peak_kv_bytes.to_string(),
                r.prefill_tokens_per_sec.to_string(),
                r.generation_tokens_per_sec.to_string(),
                r.tokens_per_sec.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(serde_json::to_value(&report)?)
}

fn trace(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let routing = trained(cfg, &state)?;
    let data = load_dataset(cfg)?;
    let trace = collect_trace(&state, &routing, eval_windows(cfg, &data), cfg.eval.batch_size)?;
    trace.write_jsonl(&out(cfg, "trace.jsonl"))?;
    if cfg.eval.csv {
        trace.write_csv(&out(cfg, "trace.csv"))?;
    }
    let summary = skip_ratio_summary(&trace);
    for s in summary.iter().filter(|s| s.keep_fraction == 0.0) {
        log::warn!("layer {} {:?} is skipped for every input", s.layer, s.target);
    }
    write_json(&out(cfg, "trace_summary.json"), &summary)?;
    Ok(json!({"records": trace.records.len(), "summary": summary}))
}

fn drop_baseline(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let data = load_dataset(cfg)?;
    let plan = layer_drop_baseline(
        &state,
        cfg.eval.drop_target,
        cfg.eval.drop_count,
        calibration(cfg, &data),
        cfg.eval.batch_size,
    )?;
    write_json(&out(cfg, "drop_plan.json"), &plan)?;
    let drop = plan.routing(state.config.n_layers)?;
    let comparison = match trained(cfg, &state) {
        Ok(routed) => Some(compare_equal_compute(
            &state,
            &drop,
            &routed,
            eval_windows(cfg, &data),
            cfg.eval.batch_size,
        )?),
        Err(Error::MissingCheckpoint(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(c) = &comparison {
        write_json(&out(cfg, "equal_compute.json"), c)?;
    }
    Ok(json!({"plan": plan, "equal_compute": comparison}))
}

fn expert_drop(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let moe = state
        .config
        .moe
        .clone()
        .ok_or_else(|| Error::Config("expert-drop needs an MoE model".into()))?;
    let data = load_dataset(cfg)?;
    let calib: Vec<&[usize]> = calibration(cfg, &data).iter().map(|w| w.inputs.as_slice()).collect();
    let importance = expert_importance(&state, &calib)?;
    let dropped = expert_drop_baseline(
        state.config.n_layers,
        moe.n_experts,
        moe.top_k,
        &importance,
        cfg.eval.expert_drop_fraction,
    )?;
    let mut routing = Routing::dense();
    routing.dropped_experts = dropped.clone();
    let windows = eval_windows(cfg, &data);
    let dense = evaluate_ppl(&state, &Routing::dense(), windows, cfg.eval.batch_size)?;
    let pruned = evaluate_ppl(&state, &routing, windows, cfg.eval.batch_size)?;
    let report = json!({
        "dropped": dropped,
        "importance": importance,
        "dense_perplexity": dense.perplexity,
        "pruned_perplexity": pruned.perplexity,
    });
    write_json(&out(cfg, "expert_drop.json"), &report)?;
    Ok(report)
}

/// Expert loads of `routing` over windows, inference mode.
pub fn expert_loads(state: &ModelState, routing: &Routing, windows: &[Window], batch: usize) -> Result<ExpertLoadReport> {
    let mut report = ExpertLoadReport::default();
    for chunk in windows.chunks(batch.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
        let o = state.forward(&Tape::inference(), &seqs, routing, &ForwardOptions::default(), None)?;
        report.merge(&o.loads);
    }
    Ok(report)
}

fn moe_train(cfg: &RunConfig) -> Result<Value> {
    let state = backbone(cfg)?;
    let routing = attach_expert_routers(&state.config)?;
    let data = load_dataset(cfg)?;
    let mut log = Vec::new();
    let tcfg = crate::train::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train_routers(&state, &routing, &data.train, &tcfg, Some(&mut log))?;
    let log_path = out(cfg, "moe_train_log.jsonl");
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    save_routing(&out(cfg, MOE_ROUTERS), &state.config, &outcome.routing)?;
    let loads = expert_loads(&state, &outcome.routing, eval_windows(cfg, &data), cfg.eval.batch_size)?;
    loads.write_jsonl(&out(cfg, "expert_load.jsonl"))?;
    if cfg.eval.csv {
        let path = out(cfg, "expert_load.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for l in &loads.loads {
            w.serialize(l)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let normalized: Vec<Value> = loads
        .loads
        .iter()
        .zip(loads.normalized())
        .map(|(l, (a, e))| json!({"layer": l.layer, "expert": l.expert, "assigned": a, "executed": e}))
        .collect();
    write_json(&out(cfg, "expert_load_normalized.json"), &normalized)?;
    Ok(json!({
        "steps": outcome.history.len(),
        "final_capacity": outcome.history.last().map(|h| h.capacity),
        "executed_over_assigned": loads.loads.iter().map(|l| l.executed).sum::<u64>() as f64
            / loads.loads.iter().map(|l| l.assigned).sum::<u64>().max(1) as f64,
    }))
}
