use std::collections::BTreeSet;

use super::flops::{matmul_flops, FlopReport};
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::moe_skip::{ExpertDecision, ExpertLoad, ExpertSkipRouter};
use crate::router::{binarize, MaskMode, Mode, ScoreOverride};
use crate::tensor::{Tape, Tensor};

#[derive(Debug)]
pub struct MoeOutcome {
    pub out: Tensor,
    pub decisions: Vec<ExpertDecision>,
    pub loads: Vec<ExpertLoad>,
    /// Gate softmax `[rows × n_experts]`.
    pub gate_probs: Tensor,
}

/// Top-k surviving experts per row, by probability then lower index.
pub(crate) fn top_k(probs: &[f32], k: usize, dropped: &BTreeSet<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|e| !dropped.contains(e)).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub(crate) fn swiglu(
    tape: &Tape,
    h: &Tensor,
    w_gate: &Tensor,
    w_up: &Tensor,
    w_down: &Tensor,
    flops: &mut u64,
) -> Result<Tensor> {
    let (n, d, hidden) = (h.rows(), h.cols(), w_up.cols());
    let g = tape.silu(&tape.linear(h, w_gate)?);
    let u = tape.linear(h, w_up)?;
    *flops += 2 * matmul_flops(n, d, hidden) + matmul_flops(n, hidden, d);
    tape.linear(&tape.mul(&g, &u)?, w_down)
}

/// Residual MoE sublayer on `x`; `dropped` lists experts removed from this layer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn moe_sublayer(
    tape: &Tape,
    state: &ModelState,
    layer: usize,
    x: &Tensor,
    routers: Option<&ExpertSkipRouter>,
    dropped: &BTreeSet<usize>,
    mode: Mode,
    overrides: &dyn Fn(usize) -> Option<ScoreOverride>,
    flops: &mut FlopReport,
) -> Result<MoeOutcome> {
    let cfg = &state.config;
    let moe = cfg
        .moe
        .as_ref()
        .ok_or_else(|| Error::Config("model has no MoE layers".into()))?;
    if dropped.len() >= moe.n_experts {
        return Err(Error::Config(format!("every expert of layer {layer} is dropped")));
    }
    if let Some(r) = routers {
        if r.weights.len() != moe.n_experts {
            return Err(Error::Config(format!(
                "layer {layer}: {} skip routers for {} experts",
                r.weights.len(),
                moe.n_experts
            )));
        }
    }
    let (n, d) = (x.rows(), x.cols());
    let h = tape.rmsnorm(x, state.layer(layer, "mlp_norm")?, cfg.norm_eps)?;
    let mut logits = tape.linear(&h, state.layer(layer, "moe.gate")?)?;
    flops.layers[layer].mlp += matmul_flops(n, d, moe.n_experts);
    if !dropped.is_empty() {
        let mut bias = vec![0.0; n * moe.n_experts];
        for r in 0..n {
            for &e in dropped {
                bias[r * moe.n_experts + e] = f32::NEG_INFINITY;
            }
        }
        logits = tape.add(&logits, &Tensor::new(bias, &[n, moe.n_experts])?)?;
    }
    let probs = tape.softmax(&logits, 1)?;
    let chosen: Vec<Vec<usize>> = (0..n).map(|r| top_k(probs.row(r), moe.top_k, dropped)).collect();
    let k = chosen.first().map_or(0, Vec::len);

    // weights[r, rank]
    let (weights, weight_col): (Tensor, Box<dyn Fn(usize, usize) -> usize>) = if moe.renormalize {
        let pairs: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .flat_map(|(r, es)| es.iter().map(move |&e| (r, e)))
            .collect();
        let sel = tape.reshape(&tape.gather_elements(&probs, &pairs)?, &[n, k])?;
        let chosen = chosen.clone();
        (
            tape.normalize_rows(&sel)?,
            Box::new(move |r, e| chosen[r].iter().position(|&c| c == e).unwrap()),
        )
    } else {
        (probs.clone(), Box::new(|_, e| e))
    };

    let mut acc = Tensor::zeros(&[n, d]);
    let mut decisions = Vec::new();
    let mut loads = Vec::with_capacity(moe.n_experts);
    for e in 0..moe.n_experts {
        let rows: Vec<usize> = (0..n).filter(|&r| chosen[r].contains(&e)).collect();
        let mut load = ExpertLoad {
            layer,
            expert: e,
            assigned: rows.len() as u64,
            executed: 0,
        };
        if rows.is_empty() {
            loads.push(load);
            continue;
        }
        let w_of = |rs: &[usize]| -> Result<Tensor> {
            let pairs: Vec<(usize, usize)> = rs.iter().map(|&r| (r, weight_col(r, e))).collect();
            tape.gather_elements(&weights, &pairs)
        };
        let wname = |p: &str| format!("experts.{e}.{p}");
        let (wg, wu, wd) = (
            state.layer(layer, &wname("w_gate"))?,
            state.layer(layer, &wname("w_up"))?,
            state.layer(layer, &wname("w_down"))?,
        );
        let h_rows = tape.gather_rows(&h, &rows)?;
        let router = routers.map(|r| (r, &r.weights[e]));
        let scored = match router {
            None => None,
            Some((r, w)) => {
                // experts see the normalized token, and so does their gate
                let s = tape.sigmoid(&tape.linear(&h_rows, w)?);
                flops.router += matmul_flops(rows.len(), d, 1);
                let s = tape.reshape(&s, &[rows.len()])?;
                let s = match overrides(e) {
                    Some(o) => Tensor::new(o.materialize(rows.len())?, &[rows.len()])?,
                    None => s,
                };
                let keep = binarize(s.data(), r.threshold);
                Some((r, s, keep))
            }
        };
        let contribution = match (&scored, mode) {
            (None, _) => {
                load.executed = load.assigned;
                let mut f = 0;
                let out = swiglu(tape, &h_rows, wg, wu, wd, &mut f)?;
                flops.layers[layer].mlp += f;
                Some((rows.clone(), tape.row_scale(&out, &w_of(&rows)?)?))
            }
            (Some((r, s, keep)), Mode::Train(mask_mode)) => {
                load.executed = keep.iter().filter(|&&k| k).count() as u64;
                let mask = match mask_mode {
                    MaskMode::Hard => tape.ste_threshold(s, r.threshold),
                    MaskMode::Surrogate => s.clone(),
                };
                let mut f = 0;
                let out = swiglu(tape, &h_rows, wg, wu, wd, &mut f)?;
                flops.layers[layer].mlp += f;
                let scale = tape.mul(&w_of(&rows)?, &mask)?;
                decisions.push(ExpertDecision {
                    layer,
                    expert: e,
                    scores: s.clone(),
                    mask,
                    keep: keep.clone(),
                    rows: rows.clone(),
                });
                Some((rows.clone(), tape.row_scale(&out, &scale)?))
            }
            (Some((_, s, keep)), Mode::Infer) => {
                let exec: Vec<usize> = rows
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(&r, _)| r)
                    .collect();
                load.executed = exec.len() as u64;
                decisions.push(ExpertDecision {
                    layer,
                    expert: e,
                    scores: s.clone(),
                    mask: Tensor::new(
                        keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                        &[keep.len()],
                    )?,
                    keep: keep.clone(),
                    rows: rows.clone(),
                });
                if exec.is_empty() {
                    None
                } else {
                    let h_exec = if exec.len() == rows.len() {
                        h_rows.clone()
                    } else {
                        tape.gather_rows(&h, &exec)?
                    };
                    let mut f = 0;
                    let out = swiglu(tape, &h_exec, wg, wu, wd, &mut f)?;
                    flops.layers[layer].mlp += f;
                    Some((exec.clone(), tape.row_scale(&out, &w_of(&exec)?)?))
                }
            }
        };
        if let Some((rs, c)) = contribution {
            acc = tape.index_add(&acc, &rs, &c)?;
        }
        loads.push(load);
    }
    let out = tape.add(x, &acc)?;
    Ok(MoeOutcome {
        out,
        decisions,
        loads,
        gate_probs: probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_skips_dropped() {
        let p = [0.1, 0.4, 0.4, 0.1];
        assert_eq!(top_k(&p, 2, &BTreeSet::new()), vec![1, 2]);
        assert_eq!(top_k(&p, 2, &[1].into_iter().collect()), vec![2, 0]);
        assert_eq!(top_k(&p, 4, &BTreeSet::new()), vec![1, 2, 0, 3]);
    }
}
