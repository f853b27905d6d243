use super::{Decision, Granularity, MaskMode, Pooling, RouterState, ScoreOverride};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Packed-row layout: `lens[b]` consecutive rows per sequence and the
/// absolute position of every row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLayout {
    pub lens: Vec<usize>,
    pub positions: Vec<usize>,
}

impl RowLayout {
    /// `batch` sequences of `len` positions starting at 0.
    pub fn uniform(batch: usize, len: usize) -> Self {
        RowLayout {
            lens: vec![len; batch],
            positions: (0..batch).flat_map(|_| 0..len).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.lens
            .iter()
            .scan(0, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect()
    }

    /// Layout of a subset of rows, given in ascending order.
    pub fn subset(&self, rows: &[usize]) -> RowLayout {
        let owner = self.sequence_of_rows();
        let mut lens = vec![0; self.lens.len()];
        for &r in rows {
            lens[owner[r]] += 1;
        }
        RowLayout {
            lens,
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        }
    }

    pub fn sequence_of_rows(&self) -> Vec<usize> {
        self.lens
            .iter()
            .enumerate()
            .flat_map(|(b, &l)| std::iter::repeat_n(b, l))
            .collect()
    }
}

/// Running sum carried across generation steps for causal-prefix pooling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolCarry {
    pub sum: Vec<f32>,
    pub count: usize,
}

/// Keep mask: `score >= threshold`. Ties keep the unit.
pub fn binarize(scores: &[f32], threshold: f32) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Importance scores for every decision point of `x[T×d]`: one per row for
/// token routers, one per sequence (sigmoid of the pooled mean) otherwise.
pub fn route_score(tape: &Tape, router: &RouterState, x: &Tensor, lens: &[usize]) -> Result<Tensor> {
    let all: Vec<usize> = (0..lens.len()).collect();
    score_impl(tape, router, x, lens, &all, &[])
}

fn score_impl(
    tape: &Tape,
    router: &RouterState,
    x: &Tensor,
    lens: &[usize],
    sequences: &[usize],
    carry: &[Option<PoolCarry>],
) -> Result<Tensor> {
    let d = x.cols();
    if router.weight.shape() != [d, 1] {
        return Err(Error::Shape {
            op: "route_score",
            lhs: x.shape().to_vec(),
            rhs: router.weight.shape().to_vec(),
        });
    }
    let rows = x.rows();
    if lens.iter().sum::<usize>() != rows {
        return Err(Error::Shape {
            op: "route_score",
            lhs: x.shape().to_vec(),
            rhs: lens.to_vec(),
        });
    }
    let features = match (router.granularity, router.pooling) {
        (Granularity::Token, _) => x.clone(),
        (Granularity::Sequence, Pooling::Mean) => {
            let starts = row_starts(lens);
            let mut p = vec![0.0; sequences.len() * rows];
            for (i, &b) in sequences.iter().enumerate() {
                let inv = 1.0 / lens[b] as f32;
                p[i * rows + starts[b]..i * rows + starts[b] + lens[b]].fill(inv);
            }
            let p = Tensor::new(p, &[sequences.len(), rows])?;
            tape.matmul(&p, x)?
        }
        (Granularity::Sequence, Pooling::CausalPrefixMean) => {
            let starts = row_starts(lens);
            let mut p = vec![0.0; rows * rows];
            let mut offset = vec![0.0; rows * d];
            for (b, &len) in lens.iter().enumerate() {
                let c = carry.get(b).cloned().flatten().unwrap_or_default();
                for t in 0..len {
                    let r = starts[b] + t;
                    let inv = 1.0 / (c.count + t + 1) as f32;
                    p[r * rows + starts[b]..=r * rows + r].fill(inv);
                    for (j, s) in c.sum.iter().enumerate() {
                        offset[r * d + j] = s * inv;
                    }
                }
            }
            let p = Tensor::new(p, &[rows, rows])?;
            let pooled = tape.matmul(&p, x)?;
            tape.add(&pooled, &Tensor::new(offset, &[rows, d])?)?
        }
    };
    let logits = tape.linear(&features, &router.weight)?;
    let s = tape.sigmoid(&logits);
    let n = s.numel();
    tape.reshape(&s, &[n])
}

fn row_starts(lens: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    lens.iter()
        .map(|l| {
            let s = acc;
            acc += l;
            s
        })
        .collect()
}

fn apply_override(scores: Tensor, ov: Option<&ScoreOverride>) -> Result<Tensor> {
    match ov {
        None => Ok(scores),
        Some(o) => {
            let n = scores.numel();
            Tensor::new(o.materialize(n)?, &[n])
        }
    }
}

fn owners(router: &RouterState, layout: &RowLayout, sequences: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    if router.per_position() {
        (
            layout.sequence_of_rows(),
            layout.positions.iter().map(|&p| Some(p)).collect(),
        )
    } else {
        (sequences.to_vec(), vec![None; sequences.len()])
    }
}

/// Masked training forward `y = M ⊙ F(x) + x`.
///
/// `layer` computes the dense residual sublayer `x + F(x)` and is evaluated
/// for every row; the mask only selects. In [`MaskMode::Hard`] the mask is
/// the binarized score with a straight-through backward (∂M/∂R = 1); in
/// [`MaskMode::Surrogate`] the score itself is used as the mask.
pub fn mod_forward_train<F>(
    tape: &Tape,
    router: &RouterState,
    x: &Tensor,
    layout: &RowLayout,
    mask_mode: MaskMode,
    score_override: Option<&ScoreOverride>,
    layer: F,
) -> Result<(Tensor, Decision)>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    if !tape.is_recording() {
        return Err(Error::State(
            "masked training forward called with a non-recording (inference) tape".into(),
        ));
    }
    let sequences: Vec<usize> = (0..layout.lens.len()).collect();
    let scores = score_impl(tape, router, x, &layout.lens, &sequences, &[])?;
    let scores = apply_override(scores, score_override)?;
    let keep = binarize(scores.data(), router.threshold);
    let (mask, hard) = match mask_mode {
        MaskMode::Hard => (tape.ste_threshold(&scores, router.threshold), true),
        MaskMode::Surrogate => (scores.clone(), false),
    };
    let group = if router.per_position() {
        1
    } else {
        let len = layout.lens.first().copied().unwrap_or(0);
        if layout.lens.iter().any(|&l| l != len) {
            return Err(Error::State(
                "sequence-level training needs equal-length sequences".into(),
            ));
        }
        len
    };
    let out = layer(x)?;
    let y = tape.gate_residual(&out, x, &mask, group, hard)?;
    let (sequence, position) = owners(router, layout, &sequences);
    Ok((
        y,
        Decision {
            layer: router.layer,
            target: router.target,
            granularity: router.granularity,
            scores,
            mask,
            keep,
            sequence,
            position,
        },
    ))
}

/// Result of a bypassing forward.
#[derive(Debug)]
pub struct InferOutcome {
    pub y: Tensor,
    /// Decisions computed in this call (held ones are not repeated).
    pub decision: Decision,
    /// Keep flag per sequence for sequence-level routers (held or new).
    pub sequence_keep: Vec<bool>,
    /// Global row indices that ran the unit.
    pub kept_rows: Vec<usize>,
}

/// Inference forward: kept rows get `x + F(x)`, skipped rows are returned
/// untouched and never reach `layer`.
///
/// `layer` receives the kept rows and their indices in `x` (or `None` when
/// every row is kept). `held` carries sequence-level decisions fixed at
/// prefill; sequences with a held decision are not rescored.
#[allow(clippy::too_many_arguments)]
pub fn mod_forward_infer<F>(
    tape: &Tape,
    router: &RouterState,
    x: &Tensor,
    layout: &RowLayout,
    held: &[Option<bool>],
    carry: &[Option<PoolCarry>],
    score_override: Option<&ScoreOverride>,
    layer: F,
) -> Result<InferOutcome>
where
    F: FnOnce(&Tensor, Option<&[usize]>) -> Result<Tensor>,
{
    let n_seq = layout.lens.len();
    let rows = x.rows();
    let (scores, keep, sequences, row_keep, sequence_keep) = if router.per_position() {
        let all: Vec<usize> = (0..n_seq).collect();
        let scores = score_impl(tape, router, x, &layout.lens, &all, carry)?;
        let scores = apply_override(scores, score_override)?;
        let keep = binarize(scores.data(), router.threshold);
        (scores, keep.clone(), all, keep, Vec::new())
    } else {
        let need: Vec<usize> = (0..n_seq)
            .filter(|&b| held.get(b).copied().flatten().is_none())
            .collect();
        let scores = if need.is_empty() {
            Tensor::zeros(&[0])
        } else {
            score_impl(tape, router, x, &layout.lens, &need, carry)?
        };
        let scores = apply_override(scores, score_override)?;
        let keep = binarize(scores.data(), router.threshold);
        let mut seq_keep: Vec<bool> = (0..n_seq)
            .map(|b| held.get(b).copied().flatten().unwrap_or(false))
            .collect();
        for (&b, &k) in need.iter().zip(&keep) {
            seq_keep[b] = k;
        }
        let row_keep = layout
            .lens
            .iter()
            .zip(&seq_keep)
            .flat_map(|(&l, &k)| std::iter::repeat_n(k, l))
            .collect();
        (scores, keep, need, row_keep, seq_keep)
    };
    let kept_rows: Vec<usize> = (0..rows).filter(|&r| row_keep[r]).collect();
    let y = if kept_rows.len() == rows {
        layer(x, None)?
    } else if kept_rows.is_empty() {
        x.clone()
    } else {
        let xs = tape.gather_rows(x, &kept_rows)?;
        let out = layer(&xs, Some(&kept_rows))?;
        tape.scatter_rows(x, &kept_rows, &out)?
    };
    let (sequence, position) = owners(router, layout, &sequences);
    let mask = Tensor::new(
        keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        &[keep.len()],
    )?;
    Ok(InferOutcome {
        y,
        decision: Decision {
            layer: router.layer,
            target: router.target,
            granularity: router.granularity,
            scores,
            mask,
            keep,
            sequence,
            position,
        },
        sequence_keep,
        kept_rows,
    })
}
