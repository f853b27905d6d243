//! Shared test helpers, including a plain f64 reference decoder used as an
//! oracle for the tape-based forward pass.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skiprouter::model::{MlpKind, ModelConfig, ModelState};

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

type Mat = Vec<Vec<f64>>;

fn param(state: &ModelState, name: &str) -> (Vec<f64>, Vec<usize>) {
    let t = state.get(name).unwrap();
    (t.data().iter().map(|&v| v as f64).collect(), t.shape().to_vec())
}

fn matmul(x: &Mat, (w, shape): &(Vec<f64>, Vec<usize>)) -> Mat {
    let (k, n) = (shape[0], shape[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w[i * n + j]).sum())
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &Mat, w: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let s = 1.0 / (ms + eps).sqrt();
            row.iter().zip(w).map(|(v, g)| v * s * g).collect()
        })
        .collect()
}

fn rope(x: &mut Mat, n_heads: usize, positions: &[usize]) {
    let d = x[0].len();
    let hd = d / n_heads;
    let half = hd / 2;
    for (row, &pos) in x.iter_mut().zip(positions) {
        for h in 0..n_heads {
            for i in 0..half {
                let theta = pos as f64 * 10000f64.powf(-(2.0 * i as f64) / hd as f64);
                let (a, b) = (row[h * hd + i], row[h * hd + i + half]);
                row[h * hd + i] = a * theta.cos() - b * theta.sin();
                row[h * hd + i + half] = a * theta.sin() + b * theta.cos();
            }
        }
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

/// Causal attention where row `i` attends to rows `j <= i` of `rows`.
pub fn ref_attention(state: &ModelState, l: usize, x: &Mat, positions: &[usize]) -> Mat {
    let cfg = &state.config;
    let p = |n: &str| param(state, &format!("layers.{l}.{n}"));
    let h = rmsnorm(x, &p("attn_norm").0, cfg.norm_eps as f64);
    let mut q = matmul(&h, &p("wq"));
    let mut k = matmul(&h, &p("wk"));
    let v = matmul(&h, &p("wv"));
    rope(&mut q, cfg.n_heads, positions);
    rope(&mut k, cfg.n_heads, positions);
    let hd = cfg.head_dim;
    let n = x.len();
    let mut out = vec![vec![0.0; cfg.d_model]; n];
    for hh in 0..cfg.n_heads {
        let cols = hh * hd..(hh + 1) * hd;
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..=i).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let o = matmul(&out, &p("wo"));
    x.iter()
        .zip(o)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect()
}

fn swiglu(h: &Mat, wg: &(Vec<f64>, Vec<usize>), wu: &(Vec<f64>, Vec<usize>), wd: &(Vec<f64>, Vec<usize>)) -> Mat {
    let g = matmul(h, wg);
    let u = matmul(h, wu);
    let a: Mat = g
        .iter()
        .zip(&u)
        .map(|(gr, ur)| gr.iter().zip(ur).map(|(x, y)| silu(*x) * y).collect())
        .collect();
    matmul(&a, wd)
}

/// Dense MLP residual sublayer (no MoE).
pub fn ref_mlp(state: &ModelState, l: usize, x: &Mat) -> Mat {
    let cfg = &state.config;
    let p = |n: &str| param(state, &format!("layers.{l}.{n}"));
    let h = rmsnorm(x, &p("mlp_norm").0, cfg.norm_eps as f64);
    let y = match cfg.mlp_kind {
        MlpKind::SwiGlu => swiglu(&h, &p("mlp.w_gate"), &p("mlp.w_up"), &p("mlp.w_down")),
        MlpKind::Gelu => {
            let u: Mat = matmul(&h, &p("mlp.w_up"))
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            matmul(&u, &p("mlp.w_down"))
        }
    };
    x.iter()
        .zip(y)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect()
}

/// Single expert output E_e(h) on already-normalized rows.
pub fn ref_expert(state: &ModelState, l: usize, e: usize, h: &Mat) -> Mat {
    let p = |n: &str| param(state, &format!("layers.{l}.experts.{e}.{n}"));
    swiglu(h, &p("w_gate"), &p("w_up"), &p("w_down"))
}

pub fn ref_mlp_norm(state: &ModelState, l: usize, x: &Mat) -> Mat {
    let w = param(state, &format!("layers.{l}.mlp_norm")).0;
    rmsnorm(x, &w, state.config.norm_eps as f64)
}

pub fn ref_gate_logits(state: &ModelState, l: usize, h: &Mat) -> Mat {
    matmul(h, &param(state, &format!("layers.{l}.moe.gate")))
}

pub fn ref_embed(state: &ModelState, tokens: &[usize]) -> Mat {
    let (w, shape) = param(state, "embed");
    let d = shape[1];
    tokens.iter().map(|&t| w[t * d..(t + 1) * d].to_vec()).collect()
}

pub fn ref_head(state: &ModelState, x: &Mat) -> Mat {
    let h = rmsnorm(x, &param(state, "final_norm").0, state.config.norm_eps as f64);
    matmul(&h, &param(state, "lm_head"))
}

/// Full dense forward of a non-MoE model over one sequence from position 0.
pub fn ref_forward(state: &ModelState, tokens: &[usize]) -> Mat {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = ref_embed(state, tokens);
    for l in 0..state.config.n_layers {
        x = ref_attention(state, l, &x, &positions);
        x = ref_mlp(state, l, &x);
    }
    ref_head(state, &x)
}

pub fn to_mat(t: &skiprouter::Tensor) -> Mat {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn mat_max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Tiny config with a deeper stack, for routing tests that need several layers.
pub fn small_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        max_seq_len: 64,
        ..ModelConfig::tiny()
    }
}

/// Held-out split of the built-in corpus used by the training tests.
pub fn toy_dataset() -> skiprouter::train::Dataset {
    use skiprouter::train::{dataset_from_text, synthetic_corpus, CorpusOptions};
    let opts = CorpusOptions {
        window: 64,
        ..Default::default()
    };
    dataset_from_text(&synthetic_corpus(0, 400_000), &opts).unwrap()
}

/// Narrow backbone after 2,000 dense pretraining steps on `toy_dataset`,
/// cached under the cargo target tmp dir so test binaries share one run.
pub fn pretrained_narrow() -> ModelState {
    use skiprouter::model::{read_checkpoint, write_checkpoint};
    use skiprouter::train::{pretrain, PretrainConfig};
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join("pretrained_narrow_v1.ckpt");
    let config = ModelConfig::narrow();
    if let Ok(ck) = read_checkpoint(&path) {
        if ck.header.config == config {
            let mut state = ModelState::from_tensors(config, ck.tensors).unwrap();
            state.freeze();
            return state;
        }
    }
    let data = toy_dataset();
    let mut state = ModelState::init(config, 0).unwrap();
    pretrain(&mut state, &data.train, &PretrainConfig::default(), None).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    let tmp = dir.join(format!("pretrained_narrow_v1.{}.tmp", std::process::id()));
    write_checkpoint(&tmp, &state.config, None, state.iter().map(|(n, p)| (n, &p.tensor))).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    state
}
