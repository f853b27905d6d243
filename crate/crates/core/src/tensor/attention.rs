use super::{BackwardCtx, Tape, Tensor};
use crate::error::{Error, Result};

/// One independent attention problem inside a packed batch: a run of query
/// rows attending over a run of key/value rows, causally by absolute position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_pos: Vec<usize>,
    pub k_start: usize,
    pub k_pos: Vec<usize>,
}

impl AttnSegment {
    /// Plain causal self-attention over `len` rows starting at `start`.
    pub fn causal(start: usize, len: usize) -> Self {
        AttnSegment {
            q_start: start,
            q_pos: (0..len).collect(),
            k_start: start,
            k_pos: (0..len).collect(),
        }
    }
}

/// Rows of one head inside a packed `[rows × d]` buffer: row `i` is
/// `data[(start + i)·stride + off ..][..hd]`.
#[derive(Clone, Copy)]
struct HeadRows<'a> {
    data: &'a [f32],
    start: usize,
    stride: usize,
    off: usize,
}

impl<'a> HeadRows<'a> {
    fn contiguous(data: &'a [f32], hd: usize) -> Self {
        HeadRows {
            data,
            start: 0,
            stride: hd,
            off: 0,
        }
    }

    fn row(&self, i: usize, hd: usize) -> &'a [f32] {
        let b = (self.start + i) * self.stride + self.off;
        &self.data[b..b + hd]
    }
}

/// Single-head causal attention on contiguous `[n×hd]` buffers. Key `j` is
/// visible to query `i` iff `k_pos[j] <= q_pos[i]`. Returns the number of
/// (query, key) pairs evaluated.
#[allow(clippy::too_many_arguments)]
pub fn attend_head(
    q: &[f32],
    q_pos: &[usize],
    k: &[f32],
    v: &[f32],
    k_pos: &[usize],
    hd: usize,
    out: &mut [f32],
    probs: Option<&mut [f32]>,
) -> u64 {
    out.iter_mut().for_each(|o| *o = 0.0);
    attend(
        HeadRows::contiguous(q, hd),
        q_pos,
        HeadRows::contiguous(k, hd),
        HeadRows::contiguous(v, hd),
        k_pos,
        hd,
        (out, 0, hd, 0),
        probs,
    )
}

/// Accumulates the head output into `out` rows (`out` is zero there).
#[allow(clippy::too_many_arguments)]
fn attend(
    q: HeadRows<'_>,
    q_pos: &[usize],
    k: HeadRows<'_>,
    v: HeadRows<'_>,
    k_pos: &[usize],
    hd: usize,
    (out, o_start, o_stride, o_off): (&mut [f32], usize, usize, usize),
    mut probs: Option<&mut [f32]>,
) -> u64 {
    let nk = k_pos.len();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut scores = vec![0.0f32; nk];
    let mut pairs = 0u64;
    for (i, &qp) in q_pos.iter().enumerate() {
        let qi = q.row(i, hd);
        let mut max = f32::NEG_INFINITY;
        let mut visible = 0usize;
        for (j, &kp) in k_pos.iter().enumerate() {
            if kp <= qp {
                let s = qi.iter().zip(k.row(j, hd)).map(|(a, b)| a * b).sum::<f32>() * scale;
                scores[j] = s;
                max = max.max(s);
                visible += 1;
            } else {
                scores[j] = f32::NEG_INFINITY;
            }
        }
        pairs += visible as u64;
        if visible == 0 {
            continue;
        }
        let b = (o_start + i) * o_stride + o_off;
        let oi = &mut out[b..b + hd];
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
            sum += *s;
        }
        let inv = 1.0 / sum;
        for (j, s) in scores.iter_mut().enumerate() {
            if *s == 0.0 {
                continue;
            }
            *s *= inv;
            for (o, vv) in oi.iter_mut().zip(v.row(j, hd)) {
                *o += *s * vv;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[i * nk..(i + 1) * nk].copy_from_slice(&scores);
        }
    }
    pairs
}

/// Queries against keys and values held outside the tape, such as a KV
/// cache. Key rows are `[len × d]` with heads as column blocks.
pub struct ExternalSegment<'a> {
    pub q_start: usize,
    pub q_pos: &'a [usize],
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub k_pos: &'a [usize],
}

/// Inference-only multi-head attention over external key/value buffers,
/// read in place. Returns the `[rows × d]` output and the pairs per head.
pub fn attend_external(q: &Tensor, n_heads: usize, segments: &[ExternalSegment<'_>]) -> Result<(Tensor, u64)> {
    let d = q.cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Shape {
            op: "attend_external",
            lhs: q.shape().to_vec(),
            rhs: vec![n_heads],
        });
    }
    let hd = d / n_heads;
    let mut out = vec![0.0; q.rows() * d];
    let mut pairs = 0u64;
    for s in segments {
        let nk = s.k_pos.len();
        if s.q_start + s.q_pos.len() > q.rows() || s.keys.len() != nk * d || s.values.len() != nk * d {
            return Err(Error::Shape {
                op: "attend_external",
                lhs: q.shape().to_vec(),
                rhs: vec![nk, d],
            });
        }
        for h in 0..n_heads {
            let view = |data, start| HeadRows {
                data,
                start,
                stride: d,
                off: h * hd,
            };
            pairs += attend(
                view(q.data(), s.q_start),
                s.q_pos,
                view(s.keys, 0),
                view(s.values, 0),
                s.k_pos,
                hd,
                (&mut out, s.q_start, d, h * hd),
                None,
            );
        }
    }
    Ok((Tensor::new(out, q.shape())?, pairs / n_heads as u64))
}

fn head_slice(src: &[f32], start: usize, n: usize, d: usize, head: usize, hd: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * hd);
    for r in start..start + n {
        out.extend_from_slice(&src[r * d + head * hd..r * d + (head + 1) * hd]);
    }
    out
}

fn scatter_head(dst: &mut [f32], src: &[f32], start: usize, n: usize, d: usize, head: usize, hd: usize) {
    for i in 0..n {
        let r = start + i;
        let row = &mut dst[r * d + head * hd..r * d + (head + 1) * hd];
        row.iter_mut()
            .zip(&src[i * hd..(i + 1) * hd])
            .for_each(|(a, b)| *a += b);
    }
}

impl Tape {
    /// Multi-head causal attention over packed segments. `q` has one row per
    /// query, `k`/`v` one row per key; heads are contiguous column blocks.
    /// Rows not covered by any segment produce zeros. Returns the output and
    /// the number of (query, key) pairs evaluated per head.
    pub fn attention(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        n_heads: usize,
        segments: Vec<AttnSegment>,
    ) -> Result<(Tensor, u64)> {
        let d = q.cols();
        if k.shape() != v.shape() || k.cols() != d || n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Shape {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let hd = d / n_heads;
        let (nq_total, nk_total) = (q.rows(), k.rows());
        for s in &segments {
            if s.q_start + s.q_pos.len() > nq_total || s.k_start + s.k_pos.len() > nk_total {
                return Err(Error::Index {
                    op: "attention",
                    index: (s.q_start + s.q_pos.len()).max(s.k_start + s.k_pos.len()),
                    size: nq_total.min(nk_total),
                });
            }
        }
        let mut out = vec![0.0; nq_total * d];
        let tracked = self.is_recording() && [q, k, v].iter().any(|t| t.requires_grad());
        let mut saved_probs: Vec<Vec<f32>> = Vec::new();
        let mut pairs = 0u64;
        for s in &segments {
            let (nq, nk) = (s.q_pos.len(), s.k_pos.len());
            for h in 0..n_heads {
                let view = |data, start| HeadRows {
                    data,
                    start,
                    stride: d,
                    off: h * hd,
                };
                let mut probs = if tracked { vec![0.0; nq * nk] } else { Vec::new() };
                pairs += attend(
                    view(q.data(), s.q_start),
                    &s.q_pos,
                    view(k.data(), s.k_start),
                    view(v.data(), s.k_start),
                    &s.k_pos,
                    hd,
                    (&mut out, s.q_start, d, h * hd),
                    tracked.then_some(probs.as_mut_slice()),
                );
                if tracked {
                    saved_probs.push(probs);
                }
            }
        }
        let pairs = pairs / n_heads as u64;
        let shape = q.shape().to_vec();
        let y = self.record("attention", &[q, k, v], out, shape, || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (q, k, v) = (
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.inputs[2].data(),
                );
                let scale = 1.0 / (hd as f32).sqrt();
                let mut gq = vec![0.0; q.len()];
                let mut gk = vec![0.0; k.len()];
                let mut gv = vec![0.0; v.len()];
                let mut probs_iter = saved_probs.iter();
                for s in &segments {
                    let (nq, nk) = (s.q_pos.len(), s.k_pos.len());
                    for h in 0..n_heads {
                        let p = probs_iter.next().expect("saved probabilities");
                        let qh = head_slice(q, s.q_start, nq, d, h, hd);
                        let kh = head_slice(k, s.k_start, nk, d, h, hd);
                        let vh = head_slice(v, s.k_start, nk, d, h, hd);
                        let go = head_slice(ctx.grad, s.q_start, nq, d, h, hd);
                        let mut dq = vec![0.0; nq * hd];
                        let mut dk = vec![0.0; nk * hd];
                        let mut dv = vec![0.0; nk * hd];
                        let mut dp = vec![0.0; nk];
                        for i in 0..nq {
                            let goi = &go[i * hd..(i + 1) * hd];
                            let pi = &p[i * nk..(i + 1) * nk];
                            let mut dot = 0.0;
                            for j in 0..nk {
                                if pi[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vh[j * hd..(j + 1) * hd];
                                dp[j] = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += pi[j] * dp[j];
                                for c in 0..hd {
                                    dv[j * hd + c] += pi[j] * goi[c];
                                }
                            }
                            for j in 0..nk {
                                if pi[j] == 0.0 {
                                    continue;
                                }
                                let ds = pi[j] * (dp[j] - dot) * scale;
                                for c in 0..hd {
                                    dq[i * hd + c] += ds * kh[j * hd + c];
                                    dk[j * hd + c] += ds * qh[i * hd + c];
                                }
                            }
                        }
                        scatter_head(&mut gq, &dq, s.q_start, nq, d, h, hd);
                        scatter_head(&mut gk, &dk, s.k_start, nk, d, h, hd);
                        scatter_head(&mut gv, &dv, s.k_start, nk, d, h, hd);
                    }
                }
                vec![
                    ctx.needs[0].then_some(gq),
                    ctx.needs[1].then_some(gk),
                    ctx.needs[2].then_some(gv),
                ]
            })
        });
        Ok((y, pairs))
    }
}
