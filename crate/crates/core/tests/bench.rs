//! Wall-clock checks. Kept in their own binary and serialized, so no other
//! test competes for the core while the timed region runs.

use std::sync::Mutex;

use skiprouter::eval::benchmark_speed;
use skiprouter::model::{ModelConfig, ModelState};
use skiprouter::router::{Granularity, MoDLayerPlan, Routing, Target};
use skiprouter::Error;

static TIMED: Mutex<()> = Mutex::new(());

#[test]
fn identity_routing_runs_at_dense_speed() {
    let _g = TIMED.lock().unwrap_or_else(|e| e.into_inner());
    let mut state = ModelState::init(ModelConfig::narrow(), 1).unwrap();
    state.freeze();
    let routing = MoDLayerPlan::default_for(16, Target::Attention, Granularity::Sequence)
        .unwrap()
        .attach(&state.config)
        .unwrap();
    let report = benchmark_speed(&state, &routing, 4, 64, 32, 31, 0).unwrap();
    println!(
        "identity speedup {:.4} (prefill {:.4}, generation {:.4})",
        report.speedup, report.prefill_speedup, report.generation_speedup
    );
    assert!((report.speedup - 1.0).abs() <= 0.05, "{}", report.speedup);
    assert_eq!(report.dense.attention_flops, report.routed.attention_flops);
    assert_eq!(report.kv_bytes_saved, 0);
    assert_eq!(report.attention_flop_reduction, 0.0);
    assert!(report.routed.router_flops > 0);
    assert_eq!(report.hardware.workers, 1);
}

#[test]
fn benchmark_rejects_empty_workloads() {
    let state = ModelState::init(ModelConfig::tiny(), 1).unwrap();
    assert!(matches!(
        benchmark_speed(&state, &Routing::dense(), 0, 4, 2, 1, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        benchmark_speed(&state, &Routing::dense(), 1, 4, 2, 0, 0),
        Err(Error::Config(_))
    ));
}
