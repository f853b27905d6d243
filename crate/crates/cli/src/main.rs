//! Command-line front end. Every subcommand reads one JSON run configuration,
//! applies flag overrides, and composes with the others through files in the
//! output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use skiprouter::commands::{self, Command};
use skiprouter::config::RunConfig;
use skiprouter::router::Target;
use skiprouter::Error;

#[derive(Parser, Debug)]
#[command(name = "skiprouter", version, about = "Train and evaluate layer-skipping routers on a frozen decoder")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Also write CSV next to JSON outputs.
    #[arg(long, global = true)]
    csv: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a randomly initialized backbone.
    Init,
    /// Dense pretraining of the backbone on the corpus.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Attach zero-initialized routers per the plan.
    AttachRouters,
    /// Train the routers with the backbone frozen.
    TrainRouter(TrainFlags),
    /// Perplexity of the dense and routed models on held-out windows.
    Eval,
    /// Wall-clock, FLOP and KV-cache comparison of dense and routed generation.
    Bench {
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        gen_len: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Per-decision skip trace and per-layer keep fractions.
    Trace,
    /// Static layer-drop plan and the equal-compute comparison.
    DropBaseline {
        #[arg(long, value_parser = parse_target)]
        target: Option<Target>,
        #[arg(long)]
        drop_count: Option<usize>,
    },
    /// Static expert-drop baseline for MoE backbones.
    ExpertDrop {
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train per-expert skip routers and export expert loads.
    MoeTrain(TrainFlags),
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    target_capacity: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
}

fn parse_target(s: &str) -> Result<Target, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown target `{s}` (attention, mlp, block)"))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TrainFlags {
    fn apply(self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.learning_rate, self.lr);
        set(&mut t.lambda, self.lambda);
        set(&mut t.target_capacity, self.target_capacity);
        set(&mut t.steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.seq_len, self.seq_len);
    }
}

fn resolve(cli: Cli) -> Result<(Command, RunConfig), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.paths.out_dir, cli.out_dir);
    cfg.eval.csv |= cli.csv;
    let cmd = match cli.command {
        Cmd::Init => Command::Init,
        Cmd::Pretrain { steps, lr } => {
            set(&mut cfg.pretrain.steps, steps);
            set(&mut cfg.pretrain.learning_rate, lr);
            Command::Pretrain
        }
        Cmd::AttachRouters => Command::AttachRouters,
        Cmd::TrainRouter(flags) => {
            flags.apply(&mut cfg);
            Command::TrainRouter
        }
        Cmd::Eval => Command::Eval,
        Cmd::Bench {
            batch,
            prompt_len,
            gen_len,
            repeats,
        } => {
            let e = &mut cfg.eval;
            set(&mut e.bench_batch, batch);
            set(&mut e.bench_prompt_len, prompt_len);
            set(&mut e.bench_gen_len, gen_len);
            set(&mut e.bench_repeats, repeats);
            Command::Bench
        }
        Cmd::Trace => Command::Trace,
        Cmd::DropBaseline { target, drop_count } => {
            set(&mut cfg.eval.drop_target, target);
            set(&mut cfg.eval.drop_count, drop_count);
            Command::DropBaseline
        }
        Cmd::ExpertDrop { fraction } => {
            set(&mut cfg.eval.expert_drop_fraction, fraction);
            Command::ExpertDrop
        }
        Cmd::MoeTrain(flags) => {
            flags.apply(&mut cfg);
            Command::MoeTrain
        }
    };
    Ok((cmd, cfg))
}

/// Exit status per error code; 1 is left to panics and clap uses 2.
fn exit_status(code: &str) -> u8 {
    match code {
        "config" => 3,
        "missing_checkpoint" => 4,
        "plan_mismatch" => 5,
        "checkpoint" => 6,
        "data" => 7,
        "io" => 8,
        "state" => 9,
        _ => 10,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match resolve(cli).and_then(|(cmd, cfg)| commands::run(cmd, &cfg)) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary is valid JSON"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.code();
            eprintln!("{}", json!({"error": code, "message": e.to_string()}));
            ExitCode::from(exit_status(code))
        }
    }
}
