mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use skiprouter::model::{ForwardOptions, ModelConfig, ModelState, MoeConfig};
use skiprouter::moe_skip::{
    attach_expert_routers, expert_drop_baseline, expert_importance, moe_forward_skip, moe_forward_skip_with,
    moe_layer_dense, ExpertSkipRouter,
};
use skiprouter::router::{MaskMode, Mode, Routing, ScoreOverride};
use skiprouter::{Tape, Tensor};

fn moe_config(n_experts: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        mlp_hidden: 0,
        n_layers: 2,
        moe: Some(MoeConfig {
            n_experts,
            top_k,
            expert_hidden: 24,
            renormalize: false,
        }),
        ..ModelConfig::tiny()
    }
}

fn random_x(seed: u64, rows: usize, d: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::new((0..rows * d).map(|_| r.random_range(-1.0f32..1.0)).collect(), &[rows, d]).unwrap()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Reference MoE sublayer: `x + Σ_{e∈K, e∉skip} w_e·E_e(h)`.
fn reference(state: &ModelState, l: usize, x: &Tensor, skip: &[usize], renorm: bool) -> Vec<Vec<f64>> {
    let moe = state.config.moe.clone().unwrap();
    let xm = to_mat(x);
    let h = ref_mlp_norm(state, l, &xm);
    let logits = ref_gate_logits(state, l, &h);
    let outs: Vec<_> = (0..moe.n_experts).map(|e| ref_expert(state, l, e, &h)).collect();
    xm.iter()
        .enumerate()
        .map(|(r, row)| {
            let p = softmax(&logits[r]);
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            idx.truncate(moe.top_k);
            let z: f64 = if renorm { idx.iter().map(|&e| p[e]).sum() } else { 1.0 };
            let mut y = row.clone();
            for &e in idx.iter().filter(|e| !skip.contains(e)) {
                for (j, v) in y.iter_mut().enumerate() {
                    *v += p[e] / z * outs[e][r][j];
                }
            }
            y
        })
        .collect()
}

#[test]
fn zero_init_skip_routers_reproduce_dense_moe() {
    let state = ModelState::init(moe_config(4, 2), 3).unwrap();
    let x = random_x(1, 10, 16);
    let dense = moe_layer_dense(&Tape::inference(), &state, 0, &x).unwrap();
    let routers = ExpertSkipRouter::zero_init(0, 4, 16);
    for mode in [Mode::Infer, Mode::Train(MaskMode::Hard)] {
        let (y, report) = moe_forward_skip(&Tape::new(), &state, 0, &x, Some(&routers), mode).unwrap();
        assert_eq!(bits(y.data()), bits(dense.data()));
        assert!(report.loads.iter().all(|l| l.executed == l.assigned));
        assert_eq!(report.loads.iter().map(|l| l.assigned).sum::<u64>(), 20);
    }
    assert!(mat_max_diff(&to_mat(&dense), &reference(&state, 0, &x, &[], false)) < 1e-5);

    let seqs = vec![random_tokens(&mut rng(2), 32, 7), random_tokens(&mut rng(3), 32, 5)];
    let plain = state
        .forward(&Tape::inference(), &seqs, &Routing::dense(), &ForwardOptions::default(), None)
        .unwrap();
    let routing = attach_expert_routers(&state.config).unwrap();
    for opts in [ForwardOptions::default(), ForwardOptions::train(MaskMode::Hard)] {
        let out = state.forward(&Tape::new(), &seqs, &routing, &opts, None).unwrap();
        assert_eq!(bits(out.logits.data()), bits(plain.logits.data()));
        assert!(out.loads.loads.iter().all(|l| l.executed == l.assigned));
    }
}

#[test]
fn forced_expert_skip_removes_its_contribution() {
    let state = ModelState::init(moe_config(4, 2), 5).unwrap();
    let x = random_x(4, 12, 16);
    let routers = ExpertSkipRouter::zero_init(0, 4, 16);
    let ov = [(2, ScoreOverride::Constant(0.1))];
    for mode in [Mode::Infer, Mode::Train(MaskMode::Hard)] {
        let (y, report) = moe_forward_skip_with(&Tape::new(), &state, 0, &x, Some(&routers), mode, &ov).unwrap();
        let l2 = report.loads.iter().find(|l| l.expert == 2).unwrap();
        assert!(l2.assigned > 0);
        assert_eq!(l2.executed, 0);
        let diff = mat_max_diff(&to_mat(&y), &reference(&state, 0, &x, &[2], false));
        assert!(diff < 1e-5, "{mode:?}: {diff}");
    }
}

#[test]
fn three_experts_top_two_by_hand() {
    let mut cfg = moe_config(3, 2);
    cfg.norm_eps = 0.0;
    let mut state = ModelState::init(cfg, 7).unwrap();
    // x = e0 normalizes to 4·e0; gate row 0 = [0.5, 0.25, 0] gives logits [2, 1, 0]
    let mut gate = vec![0.0; 16 * 3];
    gate[..3].copy_from_slice(&[0.5, 0.25, 0.0]);
    state.set("layers.0.moe.gate", Tensor::new(gate, &[16, 3]).unwrap()).unwrap();
    let mut xv = vec![0.0; 16];
    xv[0] = 1.0;
    let x = Tensor::new(xv, &[1, 16]).unwrap();
    let h = ref_mlp_norm(&state, 0, &to_mat(&x));
    let e0 = ref_expert(&state, 0, 0, &h);
    let e1 = ref_expert(&state, 0, 1, &h);

    let dense = moe_layer_dense(&Tape::inference(), &state, 0, &x).unwrap();
    for j in 0..16 {
        let want = x.data()[j] as f64 + 0.6652 * e0[0][j] + 0.2447 * e1[0][j];
        assert!((dense.data()[j] as f64 - want).abs() < 1e-4 * (1.0 + want.abs()));
    }
    let routers = ExpertSkipRouter::zero_init(0, 3, 16);
    let (y, report) = moe_forward_skip_with(
        &Tape::inference(),
        &state,
        0,
        &x,
        Some(&routers),
        Mode::Infer,
        &[(1, ScoreOverride::Constant(0.0))],
    )
    .unwrap();
    let assigned: Vec<u64> = report.loads.iter().map(|l| l.assigned).collect();
    assert_eq!(assigned, vec![1, 1, 0]);
    for j in 0..16 {
        let want = x.data()[j] as f64 + 0.6652 * e0[0][j];
        assert!((y.data()[j] as f64 - want).abs() < 1e-4 * (1.0 + want.abs()));
    }
}

#[test]
fn top_k_equal_to_n_mixes_every_expert() {
    let state = ModelState::init(moe_config(3, 3), 9).unwrap();
    let x = random_x(5, 6, 16);
    let y = moe_layer_dense(&Tape::inference(), &state, 1, &x).unwrap();
    assert!(mat_max_diff(&to_mat(&y), &reference(&state, 1, &x, &[], false)) < 1e-5);
}

#[test]
fn renormalized_gate_weights() {
    let mut cfg = moe_config(4, 2);
    cfg.moe.as_mut().unwrap().renormalize = true;
    let state = ModelState::init(cfg, 10).unwrap();
    let x = random_x(6, 5, 16);
    let y = moe_layer_dense(&Tape::inference(), &state, 0, &x).unwrap();
    assert!(mat_max_diff(&to_mat(&y), &reference(&state, 0, &x, &[], true)) < 1e-5);
}

#[test]
fn expert_router_gradients_match_surrogate_differences() {
    let state = ModelState::init(moe_config(4, 2), 12).unwrap();
    let seqs = vec![random_tokens(&mut rng(13), 32, 6)];
    let targets: Vec<Option<usize>> = random_tokens(&mut rng(14), 32, 6).into_iter().map(Some).collect();
    let mut base = attach_expert_routers(&state.config).unwrap();
    let mut r = rng(15);
    for er in base.experts.values_mut() {
        for w in er.weights.iter_mut() {
            *w = Tensor::new((0..16).map(|_| r.random_range(-0.3f32..0.3)).collect(), &[16, 1]).unwrap();
        }
    }
    let loss_of = |routing: &Routing, tape: &Tape| {
        let out = state
            .forward(tape, &seqs, routing, &ForwardOptions::train(MaskMode::Surrogate), None)
            .unwrap();
        tape.cross_entropy(&out.logits, &targets).unwrap()
    };
    let mut routing = base.clone();
    routing.set_trainable(true);
    let tape = Tape::new();
    let loss = loss_of(&routing, &tape);
    tape.backward(&loss).unwrap();
    let h = 1e-3f32;
    for (probe, (layer, e, j)) in [(0, 0, 3), (0, 2, 7), (1, 1, 0), (1, 3, 15), (0, 1, 9), (1, 2, 4)]
        .into_iter()
        .enumerate()
    {
        let analytic = routing.experts[&layer].weights[e].grad().unwrap()[j];
        let eval = |delta: f32| {
            let mut p = base.clone();
            let w = &mut p.experts.get_mut(&layer).unwrap().weights[e];
            let mut v = w.to_vec();
            v[j] += delta;
            *w = Tensor::new(v, &[16, 1]).unwrap();
            loss_of(&p, &Tape::new()).item() as f64
        };
        let numeric = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
        let err = (analytic - numeric).abs() / 1f32.max(analytic.abs()).max(numeric.abs());
        assert!(err < 1e-3, "probe {probe}: {analytic} vs {numeric}");
    }
    base.set_trainable(false);
}

#[test]
fn expert_drop_removes_a_global_quarter() {
    let state = ModelState::init(ModelConfig::toy_moe(), 17).unwrap();
    let calib: Vec<Vec<usize>> = (0..4).map(|i| random_tokens(&mut rng(20 + i), 256, 16)).collect();
    let imp = expert_importance(&state, &calib).unwrap();
    assert_eq!(imp.len(), 32);
    for l in 0..4 {
        let mass: f64 = imp.iter().filter(|t| t.0 == l).map(|t| t.2).sum();
        assert!((mass - 1.0).abs() < 1e-4);
    }
    let dropped = expert_drop_baseline(4, 8, 2, &imp, 0.25).unwrap();
    assert_eq!(dropped.len(), 8);
    let mut routing = Routing::dense();
    routing.dropped_experts = dropped.clone();
    let out = state
        .forward(&Tape::inference(), &calib, &routing, &ForwardOptions::default(), None)
        .unwrap();
    for l in &out.loads.loads {
        if dropped.contains(&(l.layer, l.expert)) {
            assert_eq!(l.assigned, 0);
        }
    }
    let total: u64 = out.loads.loads.iter().map(|l| l.assigned).sum();
    assert_eq!(total, 4 * 64 * 2);
    assert_eq!(expert_drop_baseline(4, 8, 2, &imp, 0.0).unwrap().len(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn executed_never_exceeds_assigned(seed in 0u64..1000, scale in 0.0f32..3.0) {
        let state = ModelState::init(moe_config(4, 2), 30).unwrap();
        let x = random_x(seed, 9, 16);
        let mut routers = ExpertSkipRouter::zero_init(0, 4, 16);
        let mut r = rng(seed + 1);
        for w in routers.weights.iter_mut() {
            *w = Tensor::new((0..16).map(|_| r.random_range(-scale..=scale)).collect(), &[16, 1]).unwrap();
        }
        for mode in [Mode::Infer, Mode::Train(MaskMode::Hard)] {
            let (_, report) = moe_forward_skip(&Tape::new(), &state, 0, &x, Some(&routers), mode).unwrap();
            prop_assert!(report.loads.iter().all(|l| l.executed <= l.assigned));
            prop_assert_eq!(report.loads.iter().map(|l| l.assigned).sum::<u64>(), 18);
        }
    }
}
