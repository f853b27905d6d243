mod common;

use common::*;
use proptest::prelude::*;
use skiprouter::model::{ForwardOptions, ModelState};
use skiprouter::router::{Granularity, MaskMode, MoDLayerPlan, Routing, Target};
use skiprouter::train::{
    collect_masks, dataset_from_text, grid_search, mod_loss, select_cell, synthetic_corpus, train_routers,
    windows, BatchSampler, CorpusOptions, Dataset, GridCell, TrainConfig, Window, DEFAULT_LAMBDA_GRID,
    DEFAULT_LR_GRID,
};
use skiprouter::{Error, Tape, Tensor};

fn random_windows(seed: u64, vocab: usize, len: usize, n: usize) -> Vec<Window> {
    let mut r = rng(seed);
    windows(&random_tokens(&mut r, vocab, len * n + 1), len).unwrap()
}

fn tiny_setup(g: Granularity) -> (ModelState, Routing, Vec<Window>) {
    let mut state = ModelState::init(small_config(4), 11).unwrap();
    state.freeze();
    let routing = MoDLayerPlan::explicit(1..3, Target::Attention, g)
        .attach(&state.config)
        .unwrap();
    (state, routing, random_windows(12, 32, 16, 64))
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        seq_len: 16,
        learning_rate: 1e-2,
        ..Default::default()
    }
}

fn oracle_ce(logits: &[f32], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|&v| (v as f64).exp()).sum();
    z.ln() - logits[target] as f64
}

#[test]
fn hinge_examples() {
    let tape = Tape::new();
    let m = Tensor::parameter(vec![1.0, 1.0, 1.0, 0.0], &[4, 1]).unwrap();
    assert!((mod_loss(&tape, &[m], 0.5).unwrap().item() - 0.25).abs() < 1e-7);

    let tape = Tape::new();
    let m = Tensor::parameter(vec![1.0, 0.0, 1.0, 0.0], &[4, 1]).unwrap();
    let l = mod_loss(&tape, std::slice::from_ref(&m), 0.5).unwrap();
    assert_eq!(l.item(), 0.0);
    tape.backward(&l).unwrap();
    assert!(m.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));

    assert!(matches!(mod_loss(&Tape::new(), &[], 0.5), Err(Error::Config(_))));
}

#[test]
fn zero_init_hinge_pushes_every_score_down() {
    for g in [Granularity::Token, Granularity::Sequence] {
        let (state, mut routing, data) = tiny_setup(g);
        routing.set_trainable(true);
        let seqs: Vec<&[usize]> = data[..3].iter().map(|w| w.inputs.as_slice()).collect();
        let tape = Tape::new();
        let out = state
            .forward(&tape, &seqs, &routing, &ForwardOptions::train(MaskMode::Hard), None)
            .unwrap();
        let masks = collect_masks(&out);
        let n: usize = masks.iter().map(Tensor::numel).sum();
        let loss = mod_loss(&tape, &masks, 0.5).unwrap();
        assert_eq!(loss.item(), 0.5);
        tape.backward(&loss).unwrap();
        // descent moves each score by −grad, so a positive gradient is downward pressure
        for d in &out.decisions {
            let grad = d.scores.take_grad().unwrap();
            assert!(grad.iter().all(|&v| (v - 1.0 / n as f32).abs() < 1e-9), "{g:?}: {grad:?}");
        }
        for (_, w) in routing.parameters() {
            assert!(w.take_grad().unwrap().iter().any(|&v| v != 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn hinge_matches_closed_form(bits in proptest::collection::vec(any::<bool>(), 1..40), s in 0.0f32..1.0) {
        let tape = Tape::new();
        let vals: Vec<f32> = bits.iter().map(|&b| f32::from(u8::from(b))).collect();
        let m = Tensor::parameter(vals.clone(), &[vals.len(), 1]).unwrap();
        let l = mod_loss(&tape, std::slice::from_ref(&m), s).unwrap();
        let c = vals.iter().sum::<f32>() as f64 / vals.len() as f64;
        let expect = (c - s as f64).max(0.0);
        prop_assert!((l.item() as f64 - expect).abs() < 1e-6);
        tape.backward(&l).unwrap();
        let g = m.grad().unwrap_or_else(|| vec![0.0; vals.len()]);
        let slope = if l.item() > 0.0 { 1.0 / vals.len() as f32 } else { 0.0 };
        prop_assert!(g.iter().all(|&v| (v - slope).abs() < 1e-7));
    }
}

#[test]
fn loss_decomposes_and_task_loss_matches_oracle() {
    let (state, routing, data) = tiny_setup(Granularity::Token);
    let cfg = TrainConfig { lambda: 0.3, ..quick(5) };
    let out = train_routers(&state, &routing, &data, &cfg, None).unwrap();
    for h in &out.history {
        assert!((h.total - (h.task_loss + cfg.lambda as f64 * h.mod_loss)).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&h.capacity));
    }
    // step 0 runs the dense model on the first sampled batch
    let idx = BatchSampler::new(data.len(), cfg.seed).unwrap().next_batch(cfg.batch_size);
    let mut sum = 0.0;
    let mut count = 0;
    for &i in &idx {
        let logits = ref_forward(&state, &data[i].inputs);
        for (row, t) in logits.iter().zip(&data[i].targets) {
            if let Some(t) = *t {
                let row32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
                sum += oracle_ce(&row32, t);
                count += 1;
            }
        }
    }
    let expect = sum / count as f64;
    assert!((out.history[0].task_loss - expect).abs() < 1e-4 * expect);
    assert_eq!(out.history[0].capacity, 1.0);
    assert!((out.history[0].mod_loss - 0.5).abs() < 1e-7);
}

#[test]
fn training_is_deterministic() {
    let (state, routing, data) = tiny_setup(Granularity::Sequence);
    let cfg = quick(8);
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    let a = train_routers(&state, &routing, &data, &cfg, Some(&mut la)).unwrap();
    let b = train_routers(&state, &routing, &data, &cfg, Some(&mut lb)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(la, lb);
    assert_eq!(la.iter().filter(|&&c| c == b'\n').count(), 8);
    for ((na, ta), (nb, tb)) in a.routing.parameters().iter().zip(b.routing.parameters().iter()) {
        assert_eq!(na, nb);
        assert_eq!(bits(ta.data()), bits(tb.data()));
    }
}

#[test]
fn log_lines_carry_the_documented_fields() {
    let (state, routing, data) = tiny_setup(Granularity::Token);
    let mut log = Vec::new();
    train_routers(&state, &routing, &data, &quick(2), Some(&mut log)).unwrap();
    for line in String::from_utf8(log).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "task_loss", "mod_loss", "capacity", "per_layer_capacity"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
        assert_eq!(v["per_layer_capacity"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn zero_steps_leave_routers_untouched() {
    let (state, routing, data) = tiny_setup(Granularity::Token);
    let out = train_routers(&state, &routing, &data, &quick(0), None).unwrap();
    assert!(out.history.is_empty());
    for ((_, a), (_, b)) in routing.parameters().iter().zip(out.routing.parameters().iter()) {
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    let seqs: Vec<&[usize]> = data[..2].iter().map(|w| w.inputs.as_slice()).collect();
    let tape = Tape::inference();
    let dense = state.forward(&tape, &seqs, &Routing::dense(), &Default::default(), None).unwrap();
    let routed = state.forward(&tape, &seqs, &out.routing, &Default::default(), None).unwrap();
    assert_eq!(bits(dense.logits.data()), bits(routed.logits.data()));
}

#[test]
fn only_router_tensors_change() {
    let (state, routing, data) = tiny_setup(Granularity::Token);
    let before = state.checksum();
    let out = train_routers(&state, &routing, &data, &quick(10), None).unwrap();
    assert_eq!(state.checksum(), before);
    assert!(state.iter().all(|(_, p)| !p.tensor.requires_grad()));
    let changed = routing
        .parameters()
        .iter()
        .zip(out.routing.parameters().iter())
        .filter(|((_, a), (_, b))| a.data() != b.data())
        .count();
    assert_eq!(changed, 2);
}

#[test]
fn training_rejects_bad_inputs() {
    let (state, routing, data) = tiny_setup(Granularity::Token);
    let mut live = state.clone();
    live.set_trainable(true);
    assert!(matches!(train_routers(&live, &routing, &data, &quick(1), None), Err(Error::State(_))));
    assert!(matches!(
        train_routers(&state, &Routing::dense(), &data, &quick(1), None),
        Err(Error::Config(_))
    ));
    let bad = TrainConfig {
        target_capacity: 1.5,
        ..quick(1)
    };
    assert!(matches!(train_routers(&state, &routing, &data, &bad, None), Err(Error::Config(_))));
    assert!(train_routers(&state, &routing, &[], &quick(1), None).is_err());
}

#[test]
fn capacity_trends_down_until_near_target() {
    let (state, routing, data) = tiny_setup(Granularity::Token);
    let cfg = TrainConfig {
        lambda: 1.0,
        learning_rate: 2e-3,
        ..quick(400)
    };
    let out = train_routers(&state, &routing, &data, &cfg, None).unwrap();
    let caps: Vec<f64> = out.history.iter().map(|h| h.capacity).collect();
    let ma: Vec<f64> = caps.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let s = cfg.target_capacity as f64;
    let reached = ma
        .iter()
        .position(|&c| c <= s + 0.05)
        .expect("capacity never reached the target band");
    for w in ma[..=reached].windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "moving average rose: {} -> {}", w[0], w[1]);
    }
}

fn cell(lr: f32, lambda: f32, loss: f64, cap: f64) -> GridCell {
    GridCell {
        learning_rate: lr,
        lambda,
        final_train_capacity: cap,
        val_task_loss: loss,
        val_capacity: cap,
        meets_target: (cap - 0.5).abs() <= 0.05,
    }
}

#[test]
fn cell_selection_rules() {
    assert_eq!(select_cell(&[], 0.5), None);
    assert_eq!(select_cell(&[cell(1e-4, 0.1, 2.0, 0.9)], 0.5), Some((0, true)));
    let cells = [
        cell(1e-4, 0.1, 2.0, 0.52),
        cell(1e-4, 0.01, 1.5, 0.70),
        cell(2e-4, 0.1, 1.9, 0.48),
    ];
    assert_eq!(select_cell(&cells, 0.5), Some((2, false)));
    let tied = [cell(2e-4, 0.1, 1.9, 0.5), cell(1e-4, 0.01, 1.9, 0.5), cell(5e-5, 0.01, 1.9, 0.5)];
    assert_eq!(select_cell(&tied, 0.5), Some((2, false)));
    let none = [cell(1e-4, 0.1, 1.0, 0.8), cell(1e-4, 0.01, 1.2, 0.6), cell(1e-4, 0.0, 0.9, 1.0)];
    assert_eq!(select_cell(&none, 0.5), Some((1, true)));
}

fn tiny_dataset(data: Vec<Window>) -> Dataset {
    let eval = data[..8].to_vec();
    Dataset {
        window: 16,
        train: data[8..].to_vec(),
        eval,
    }
}

#[test]
fn default_grid_runs_every_cell() {
    let (state, routing, data) = tiny_setup(Granularity::Sequence);
    let data = tiny_dataset(data);
    assert_eq!(DEFAULT_LR_GRID, [1e-5, 2e-5, 5e-5, 1e-4, 2e-4]);
    assert_eq!(DEFAULT_LAMBDA_GRID, [0.0, 0.1, 0.01, 0.001]);
    let out = grid_search(&state, &routing, &data, &quick(2)).unwrap();
    assert_eq!(out.cells.len(), 20);
    let mut seen = Vec::new();
    for c in &out.cells {
        assert!(c.val_task_loss.is_finite());
        assert!((0.0..=1.0).contains(&c.val_capacity));
        seen.push((c.learning_rate.to_bits(), c.lambda.to_bits()));
    }
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 20);
    assert_eq!(Some((out.selected, out.warning)), select_cell(&out.cells, 0.5));
    let again = grid_search(&state, &routing, &data, &quick(2)).unwrap();
    assert_eq!(again.cells, out.cells);
}

#[test]
fn single_cell_grid_selects_it() {
    let (state, routing, data) = tiny_setup(Granularity::Sequence);
    let cfg = TrainConfig {
        lr_grid: vec![1e-3],
        lambda_grid: vec![0.1],
        ..quick(2)
    };
    let out = grid_search(&state, &routing, &tiny_dataset(data), &cfg).unwrap();
    assert_eq!(out.cells.len(), 1);
    assert_eq!(out.selected, 0);
    let empty = TrainConfig { lr_grid: vec![], ..cfg };
    assert!(matches!(
        grid_search(&state, &routing, &tiny_dataset(random_windows(1, 32, 16, 16)), &empty),
        Err(Error::Config(_))
    ));
}

#[test]
fn corpus_windows_and_split() {
    let w = windows(&[b'a' as usize, b'b' as usize], 2).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].inputs, vec![97, 98]);
    assert_eq!(w[0].targets, vec![Some(98), None]);
    let w = windows(&[1, 2, 3, 4, 5], 2).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!(w[1].targets, vec![Some(4), Some(5)]);

    assert!(matches!(dataset_from_text("", &CorpusOptions::default()), Err(Error::Data(_))));
    let text = synthetic_corpus(3, 200_000);
    let opts = CorpusOptions {
        window: 32,
        max_windows: Some(1000),
        ..Default::default()
    };
    let a = dataset_from_text(&text, &opts).unwrap();
    let b = dataset_from_text(&text, &opts).unwrap();
    assert_eq!(a.train.len(), 1000);
    assert_eq!(a.train, b.train);
    assert_eq!(a.eval, b.eval);
    let other = dataset_from_text(&text, &CorpusOptions { seed: 1, ..opts }).unwrap();
    assert_ne!(a.train, other.train);
}

#[test]
fn sampler_order_depends_only_on_seed() {
    let mut a = BatchSampler::new(50, 4).unwrap();
    let mut b = BatchSampler::new(50, 4).unwrap();
    let mut c = BatchSampler::new(50, 5).unwrap();
    let (xa, xb, xc): (Vec<_>, Vec<_>, Vec<_>) = (
        (0..20).flat_map(|_| a.next_batch(7)).collect(),
        (0..20).flat_map(|_| b.next_batch(7)).collect(),
        (0..20).flat_map(|_| c.next_batch(7)).collect(),
    );
    assert_eq!(xa, xb);
    assert_ne!(xa, xc);
}

#[test]
fn ingest_reads_files_and_rejects_empty_ones() {
    use skiprouter::train::ingest_corpus;
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert!(matches!(ingest_corpus(&empty, &CorpusOptions::default()), Err(Error::Data(_))));
    let text = dir.path().join("text.txt");
    std::fs::write(&text, synthetic_corpus(0, 10_000)).unwrap();
    let opts = CorpusOptions {
        window: 16,
        ..Default::default()
    };
    let d = ingest_corpus(&text, &opts).unwrap();
    assert_eq!(d.train.len() + d.eval.len(), 10_000 / 16);
    assert!(matches!(
        ingest_corpus(&dir.path().join("missing.txt"), &opts),
        Err(Error::Io { .. })
    ));
}

/// With no capacity pressure, zero-init routers stay at the dense start.
#[test]
fn lambda_zero_keeps_capacity() {
    let state = pretrained_narrow();
    let data = toy_dataset();
    let routing = MoDLayerPlan::default_for(16, Target::Attention, Granularity::Sequence)
        .unwrap()
        .attach(&state.config)
        .unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        steps: 200,
        ..Default::default()
    };
    let out = train_routers(&state, &routing, &data.train, &cfg, None).unwrap();
    assert!(out.history[199].capacity >= 0.99, "{}", out.history[199].capacity);
}
