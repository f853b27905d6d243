//! Analytic gradients versus central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skiprouter::tensor::AttnSegment;
use skiprouter::{Tape, Tensor};

const H: f32 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f32> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element carries a distinct upstream gradient.
fn project(tape: &Tape, y: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(random(&mut rng, y.shape()), y.shape()).unwrap();
    let prod = tape.mul(y, &w).unwrap();
    tape.sum_all(&prod)
}

/// Checks d(loss)/d(input) for every input element; returns the worst
/// relative error, scaled by max(1, |analytic|, |numeric|).
fn check<F>(inputs: &[(Vec<f32>, Vec<usize>)], f: F) -> f32
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::parameter(d.clone(), s).unwrap())
        .collect();
    let tape = Tape::new();
    let loss = f(&tape, &params);
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f32>> = params.iter().map(|p| p.grad().unwrap()).collect();

    let eval = |which: usize, idx: usize, delta: f32| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[idx] += delta;
                }
                Tensor::new(d, s).unwrap()
            })
            .collect();
        f(&Tape::inference(), &ts).item() as f64
    };

    let mut worst = 0.0f32;
    for (i, (data, _)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let numeric = ((eval(i, j, H) - eval(i, j, -H)) / (2.0 * H as f64)) as f32;
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1f32.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn matmul_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let params = [
        Tensor::parameter(a.clone(), &[3, 4]).unwrap(),
        Tensor::parameter(b.clone(), &[4, 2]).unwrap(),
    ];
    let tape = Tape::new();
    let y = tape.matmul(&params[0], &params[1]).unwrap();
    let loss = tape.sum_all(&y);
    tape.backward(&loss).unwrap();
    let ga = params[0].grad().unwrap();
    let eval = |a: &[f32]| {
        let t = Tape::inference();
        let y = t
            .matmul(
                &Tensor::new(a.to_vec(), &[3, 4]).unwrap(),
                &Tensor::new(b.clone(), &[4, 2]).unwrap(),
            )
            .unwrap();
        t.sum_all(&y).item()
    };
    for j in 0..12 {
        let (mut p, mut m) = (a.clone(), a.clone());
        p[j] += H;
        m[j] -= H;
        let numeric = (eval(&p) - eval(&m)) / (2.0 * H);
        assert!((ga[j] - numeric).abs() < 1e-3, "elem {j}: {} vs {numeric}", ga[j]);
    }
}

#[test]
fn rmsnorm_2x4_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 4]);
    let w = random(&mut rng, &[4]);
    let err = check(&[(x, vec![2, 4]), (w, vec![4])], |t, p| {
        let y = t.rmsnorm(&p[0], &p[1], 1e-5).unwrap();
        project(t, &y, 5)
    });
    assert!(err < 1e-3, "rmsnorm max err {err}");
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 5]);
    let err = check(&[(x, vec![3, 5])], |t, p| {
        t.cross_entropy(&p[0], &[Some(1), None, Some(4)]).unwrap()
    });
    assert!(err < 1e-3, "cross entropy max err {err}");
}

#[test]
fn embedding_and_rope_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random(&mut rng, &[5, 4]);
    let err = check(&[(w, vec![5, 4])], |t, p| {
        let e = t.embedding(&p[0], &[3, 1, 3]).unwrap();
        let r = t.rope(&e, &[0, 2, 7], 2).unwrap();
        project(t, &r, 8)
    });
    assert!(err < 1e-3, "embedding/rope max err {err}");
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&mut rng, &[5, 4]);
    let k = random(&mut rng, &[5, 4]);
    let v = random(&mut rng, &[5, 4]);
    let err = check(
        &[(q, vec![5, 4]), (k, vec![5, 4]), (v, vec![5, 4])],
        |t, p| {
            let segs = vec![
                AttnSegment::causal(0, 3),
                AttnSegment {
                    q_start: 3,
                    q_pos: vec![4, 9],
                    k_start: 3,
                    k_pos: vec![4, 9],
                },
            ];
            let (y, _) = t.attention(&p[0], &p[1], &p[2], 2, segs).unwrap();
            project(t, &y, 10)
        },
    );
    assert!(err < 1e-3, "attention max err {err}");
}

#[test]
fn row_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[4, 3]);
    let v = random(&mut rng, &[2, 3]);
    let s = random(&mut rng, &[2]);
    let err = check(
        &[(x, vec![4, 3]), (v, vec![2, 3]), (s, vec![2])],
        |t, p| {
            let g = t.gather_rows(&p[0], &[2, 0]).unwrap();
            let scaled = t.row_scale(&g, &p[2]).unwrap();
            let sum = t.add(&scaled, &p[1]).unwrap();
            let a = t.index_add(&p[0], &[1, 1], &sum).unwrap();
            let b = t.scatter_rows(&a, &[3], &t.gather_rows(&p[1], &[0]).unwrap()).unwrap();
            project(t, &b, 13)
        },
    );
    assert!(err < 1e-3, "row ops max err {err}");
}

#[test]
fn soft_gate_residual_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let out = random(&mut rng, &[4, 3]);
    let x = random(&mut rng, &[4, 3]);
    let m: Vec<f32> = random(&mut rng, &[2]).iter().map(|v| v.abs()).collect();
    let err = check(
        &[(out, vec![4, 3]), (x, vec![4, 3]), (m, vec![2])],
        |t, p| {
            let y = t.gate_residual(&p[0], &p[1], &p[2], 2, false).unwrap();
            project(t, &y, 15)
        },
    );
    assert!(err < 1e-3, "gate_residual max err {err}");
}

#[test]
fn gather_elements_and_sigmoid_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, &[3, 3]);
    let err = check(&[(x, vec![3, 3])], |t, p| {
        let s = t.softmax(&p[0], 1).unwrap();
        let g = t.gather_elements(&s, &[(0, 2), (2, 1), (1, 1)]).unwrap();
        let r = t.relu(&t.add_scalar(&g, -0.2));
        let sg = t.sigmoid(&t.scale(&r, 3.0));
        project(t, &sg, 17)
    });
    assert!(err < 1e-3, "gather/sigmoid/relu max err {err}");
}

#[test]
fn gelu_and_row_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(&mut rng, &[3, 4]);
    let err = check(&[(x, vec![3, 4])], |t, p| {
        let g = t.gelu(&p[0]);
        let pos = t.sigmoid(&g);
        let n = t.normalize_rows(&pos).unwrap();
        project(t, &n, 19)
    });
    assert!(err < 1e-3, "gelu/normalize max err {err}");
}

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_ops_on_random_shapes((a, b, c) in shape_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[a, b, c]);
        let w = random(&mut rng, &[c, b]);
        let err = check(&[(x, vec![a, b, c]), (w, vec![c, b])], |t, p| {
            let h = t.linear(&p[0], &p[1]).unwrap();
            let h = t.silu(&h);
            let sm = t.softmax(&h, 1).unwrap();
            let m = t.mean(&sm, 0).unwrap();
            let m2 = t.mean(&t.mul(&h, &h).unwrap(), 2).unwrap();
            let s1 = project(t, &m, seed + 1);
            let s2 = project(t, &m2, seed + 2);
            t.add(&s1, &s2).unwrap()
        });
        prop_assert!(err < 1e-3, "max err {}", err);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(random(&mut rng, &[3, 4]), &[3, 4]).unwrap();
        let w = Tensor::new(random(&mut rng, &[4, 4]), &[4, 4]).unwrap();
        let run = || {
            let t = Tape::inference();
            let h = t.matmul(&x, &w).unwrap();
            t.softmax(&t.silu(&h), 1).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
