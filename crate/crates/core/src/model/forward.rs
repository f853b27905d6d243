use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use super::flops::{matmul_flops, pair_flops, router_flops, FlopReport};
use super::kv_cache::KvCache;
use super::moe::moe_sublayer;
use super::state::ModelState;
use super::config::MlpKind;
use crate::error::{Error, Result};
use crate::moe_skip::{ExpertDecision, ExpertLoadReport};
use crate::router::{
    mod_forward_infer, mod_forward_train, Decision, Mode, PoolCarry, RouterState, RowLayout, Routing,
    ScoreOverride, SkipMask, Target,
};
use crate::tensor::{attend_external, AttnSegment, ExternalSegment, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Forced router scores by layer.
    pub overrides: BTreeMap<usize, ScoreOverride>,
    /// Forced expert skip scores by (layer, expert).
    pub expert_overrides: BTreeMap<(usize, usize), ScoreOverride>,
    /// Keep each layer's input, post-attention and output states.
    pub capture_hidden: bool,
    /// Keep each MoE layer's gate probabilities.
    pub capture_gates: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: Mode::Infer,
            overrides: BTreeMap::new(),
            expert_overrides: BTreeMap::new(),
            capture_hidden: false,
            capture_gates: false,
        }
    }
}

impl ForwardOptions {
    pub fn train(mask_mode: crate::router::MaskMode) -> Self {
        ForwardOptions {
            mode: Mode::Train(mask_mode),
            ..Default::default()
        }
    }
}

/// Residual stream around one block.
#[derive(Clone, Debug)]
pub struct LayerIo {
    pub input: Tensor,
    /// After the attention sublayer (equal to `output` for a routed block).
    pub mid: Tensor,
    pub output: Tensor,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[rows × vocab]`, rows packed sequence after sequence.
    pub logits: Tensor,
    pub layout: RowLayout,
    pub decisions: Vec<Decision>,
    pub expert_decisions: Vec<ExpertDecision>,
    pub loads: ExpertLoadReport,
    /// FLOPs counted at every matmul actually executed.
    pub flops: FlopReport,
    pub hidden: Vec<LayerIo>,
    pub gate_probs: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn skip_mask(&self) -> SkipMask {
        SkipMask::from_decisions(&self.decisions)
    }

    /// Logit rows of sequence `b`.
    pub fn sequence_logits(&self, b: usize) -> Vec<&[f32]> {
        let start: usize = self.layout.lens[..b].iter().sum();
        (start..start + self.layout.lens[b])
            .map(|r| self.logits.row(r))
            .collect()
    }
}

struct Ctx<'a> {
    state: &'a ModelState,
    tape: &'a Tape,
    routing: &'a Routing,
    opts: &'a ForwardOptions,
    caches: Option<&'a mut [KvCache]>,
    flops: FlopReport,
    expert_decisions: Vec<ExpertDecision>,
    loads: ExpertLoadReport,
    gate_probs: Vec<Tensor>,
}

impl Ctx<'_> {
    fn attention(&mut self, l: usize, x: &Tensor, layout: &RowLayout) -> Result<Tensor> {
        let (tape, st) = (self.tape, self.state);
        let cfg = &st.config;
        let (n, d) = (x.rows(), x.cols());
        let h = tape.rmsnorm(x, st.layer(l, "attn_norm")?, cfg.norm_eps)?;
        let q = tape.linear(&h, st.layer(l, "wq")?)?;
        let k = tape.linear(&h, st.layer(l, "wk")?)?;
        let v = tape.linear(&h, st.layer(l, "wv")?)?;
        self.flops.layers[l].attention += 3 * matmul_flops(n, d, d);
        let q = tape.rope(&q, &layout.positions, cfg.n_heads)?;
        let k = tape.rope(&k, &layout.positions, cfg.n_heads)?;
        let starts = layout.starts();
        let (a, pairs) = match self.caches.as_deref_mut() {
            None => {
                let segments = starts
                    .iter()
                    .zip(&layout.lens)
                    .filter(|(_, &len)| len > 0)
                    .map(|(&s, &len)| {
                        let pos = layout.positions[s..s + len].to_vec();
                        AttnSegment {
                            q_start: s,
                            q_pos: pos.clone(),
                            k_start: s,
                            k_pos: pos,
                        }
                    })
                    .collect();
                tape.attention(&q, &k, &v, cfg.n_heads, segments)?
            }
            Some(caches) => {
                // caches are inference-only, so attention reads them in place
                for (b, cache) in caches.iter_mut().enumerate() {
                    let (s, len) = (starts[b], layout.lens[b]);
                    if len > 0 {
                        let rows = s * d..(s + len) * d;
                        cache.append(l, &k.data()[rows.clone()], &v.data()[rows], &layout.positions[s..s + len]);
                    }
                }
                let segments: Vec<ExternalSegment<'_>> = caches
                    .iter()
                    .enumerate()
                    .filter(|&(b, _)| layout.lens[b] > 0)
                    .map(|(b, cache)| {
                        let c = cache.layer(l).expect("just written");
                        ExternalSegment {
                            q_start: starts[b],
                            q_pos: &layout.positions[starts[b]..starts[b] + layout.lens[b]],
                            keys: c.keys(),
                            values: c.values(),
                            k_pos: &c.positions,
                        }
                    })
                    .collect();
                attend_external(&q, cfg.n_heads, &segments)?
            }
        };
        self.flops.layers[l].attention += pair_flops(pairs, d) + matmul_flops(n, d, d);
        let o = tape.linear(&a, st.layer(l, "wo")?)?;
        tape.add(x, &o)
    }

    /// Feed-forward sublayer; `rows` maps local rows to forward rows.
    fn mlp(&mut self, l: usize, x: &Tensor, rows: Option<&[usize]>) -> Result<Tensor> {
        let (tape, st) = (self.tape, self.state);
        let cfg = &st.config;
        if cfg.moe.is_some() {
            let dropped: BTreeSet<usize> = self
                .routing
                .dropped_experts
                .iter()
                .filter(|(dl, _)| *dl == l)
                .map(|&(_, e)| e)
                .collect();
            let overrides = |e: usize| self.opts.expert_overrides.get(&(l, e)).cloned();
            let mut out = moe_sublayer(
                tape,
                st,
                l,
                x,
                self.routing.experts.get(&l),
                &dropped,
                self.opts.mode,
                &overrides,
                &mut self.flops,
            )?;
            if let Some(rows) = rows {
                for dec in out.decisions.iter_mut() {
                    dec.rows.iter_mut().for_each(|r| *r = rows[*r]);
                }
            }
            self.expert_decisions.extend(out.decisions);
            self.loads.merge(&ExpertLoadReport { loads: out.loads });
            if self.opts.capture_gates {
                self.gate_probs.push(out.gate_probs.detach());
            }
            return Ok(out.out);
        }
        let (n, d, hidden) = (x.rows(), x.cols(), cfg.mlp_hidden);
        let h = tape.rmsnorm(x, st.layer(l, "mlp_norm")?, cfg.norm_eps)?;
        let y = match cfg.mlp_kind {
            MlpKind::SwiGlu => {
                let mut f = 0;
                let y = super::moe::swiglu(
                    tape,
                    &h,
                    st.layer(l, "mlp.w_gate")?,
                    st.layer(l, "mlp.w_up")?,
                    st.layer(l, "mlp.w_down")?,
                    &mut f,
                )?;
                self.flops.layers[l].mlp += f;
                y
            }
            MlpKind::Gelu => {
                let u = tape.gelu(&tape.linear(&h, st.layer(l, "mlp.w_up")?)?);
                self.flops.layers[l].mlp += matmul_flops(n, d, hidden) + matmul_flops(n, hidden, d);
                tape.linear(&u, st.layer(l, "mlp.w_down")?)?
            }
        };
        tape.add(x, &y)
    }

    fn unit(&mut self, l: usize, target: Target, x: &Tensor, layout: &RowLayout, rows: Option<&[usize]>) -> Result<Tensor> {
        match target {
            Target::Attention => self.attention(l, x, layout),
            Target::Mlp => self.mlp(l, x, rows),
            Target::Block => {
                let a = self.attention(l, x, layout)?;
                self.mlp(l, &a, rows)
            }
        }
    }

    /// Runs `router.target` at layer `router.layer` behind its router.
    fn routed(&mut self, router: &RouterState, x: &Tensor, layout: &RowLayout) -> Result<(Tensor, Decision)> {
        let l = router.layer;
        let ov = self.opts.overrides.get(&l).cloned();
        let d = x.cols();
        match self.opts.mode {
            Mode::Train(mask_mode) => {
                self.flops.router += router_flops(d, router.per_position(), router.granularity, &layout.lens);
                let tape = self.tape;
                mod_forward_train(tape, router, x, layout, mask_mode, ov.as_ref(), |x| {
                    self.unit(l, router.target, x, layout, None)
                })
            }
            Mode::Infer => {
                let n_seq = layout.lens.len();
                let (held, carry): (Vec<Option<bool>>, Vec<Option<PoolCarry>>) = match self.caches.as_deref() {
                    Some(caches) => (
                        caches.iter().map(|c| c.held.get(&l).copied()).collect(),
                        caches.iter().map(|c| c.pool.get(&l).cloned()).collect(),
                    ),
                    None => (vec![None; n_seq], vec![None; n_seq]),
                };
                let needed: Vec<usize> = if router.per_position() {
                    layout.lens.clone()
                } else {
                    (0..n_seq)
                        .filter(|&b| held[b].is_none())
                        .map(|b| layout.lens[b])
                        .collect()
                };
                self.flops.router += router_flops(d, router.per_position(), router.granularity, &needed);
                let tape = self.tape;
                let outcome = mod_forward_infer(tape, router, x, layout, &held, &carry, ov.as_ref(), |xs, kept| {
                    match kept {
                        None => self.unit(l, router.target, xs, layout, None),
                        Some(rows) => {
                            let sub = layout.subset(rows);
                            self.unit(l, router.target, xs, &sub, Some(rows))
                        }
                    }
                })?;
                if let Some(caches) = self.caches.as_deref_mut() {
                    let starts = layout.starts();
                    for (b, cache) in caches.iter_mut().enumerate() {
                        if router.per_position() {
                            if router.pooling == crate::router::Pooling::CausalPrefixMean {
                                let c = cache.pool.entry(l).or_insert_with(|| PoolCarry {
                                    sum: vec![0.0; d],
                                    count: 0,
                                });
                                for r in starts[b]..starts[b] + layout.lens[b] {
                                    c.sum.iter_mut().zip(x.row(r)).for_each(|(s, v)| *s += v);
                                }
                                c.count += layout.lens[b];
                            }
                        } else if layout.lens[b] > 0 {
                            cache.held.entry(l).or_insert(outcome.sequence_keep[b]);
                        }
                    }
                }
                Ok((outcome.y, outcome.decision))
            }
        }
    }
}

impl ModelState {
    /// Forward over a batch of sequences packed row after row.
    ///
    /// With `caches` (one per sequence), each sequence continues from its
    /// cache: tokens are placed after the positions already seen, keys and
    /// values are appended, and sequence-level decisions made at prefill are
    /// reused. Caches require inference mode.
    pub fn forward<S: AsRef<[usize]>>(
        &self,
        tape: &Tape,
        seqs: &[S],
        routing: &Routing,
        opts: &ForwardOptions,
        caches: Option<&mut [KvCache]>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(Error::Data("forward needs at least one sequence".into()));
        }
        if let Some(c) = caches.as_deref() {
            if c.len() != seqs.len() {
                return Err(Error::State(format!(
                    "{} caches for {} sequences",
                    c.len(),
                    seqs.len()
                )));
            }
            if matches!(opts.mode, Mode::Train(_)) {
                return Err(Error::State("KV caches are inference-only".into()));
            }
        }
        for r in routing.depth.values() {
            if r.layer >= cfg.n_layers {
                return Err(Error::Plan(format!(
                    "router on layer {} but model has {} layers",
                    r.layer, cfg.n_layers
                )));
            }
        }
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            let start = caches.as_deref().map_or(0, |c| c[b].seen);
            if start + s.len() > cfg.max_seq_len {
                return Err(Error::Capacity {
                    requested: start + s.len(),
                    max: cfg.max_seq_len,
                });
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Index {
                    op: "forward",
                    index: bad,
                    size: cfg.vocab_size,
                });
            }
            ids.extend_from_slice(s);
            lens.push(s.len());
            positions.extend(start..start + s.len());
        }
        let layout = RowLayout { lens, positions };
        let mut ctx = Ctx {
            state: self,
            tape,
            routing,
            opts,
            caches,
            flops: FlopReport::new(cfg.n_layers),
            expert_decisions: Vec::new(),
            loads: ExpertLoadReport::default(),
            gate_probs: Vec::new(),
        };
        let mut decisions = Vec::new();
        let mut hidden = Vec::new();
        let mut x = tape.embedding(self.get("embed")?, &ids)?;
        for l in 0..cfg.n_layers {
            let input = x.clone();
            let router = routing.depth.get(&l);
            let mut mid = None;
            if routing.is_dropped(l, Target::Block) {
                // static drop: the residual passes through
            } else if let Some(r) = router.filter(|r| r.target == Target::Block) {
                let (y, dec) = ctx.routed(r, &x, &layout)?;
                decisions.push(dec);
                x = y;
            } else {
                for target in [Target::Attention, Target::Mlp] {
                    if routing.is_dropped(l, target) {
                    } else if let Some(r) = router.filter(|r| r.target == target) {
                        let (y, dec) = ctx.routed(r, &x, &layout)?;
                        decisions.push(dec);
                        x = y;
                    } else {
                        x = ctx.unit(l, target, &x, &layout, None)?;
                    }
                    if target == Target::Attention {
                        mid = Some(x.clone());
                    }
                }
            }
            if opts.capture_hidden {
                hidden.push(LayerIo {
                    input: input.detach(),
                    mid: mid.unwrap_or_else(|| x.clone()).detach(),
                    output: x.detach(),
                });
            }
        }
        let h = tape.rmsnorm(&x, self.get("final_norm")?, cfg.norm_eps)?;
        let logits = tape.linear(&h, self.get("lm_head")?)?;
        ctx.flops.lm_head += matmul_flops(x.rows(), cfg.d_model, cfg.vocab_size);
        if let Some(caches) = ctx.caches.as_deref_mut() {
            for (c, &len) in caches.iter_mut().zip(&layout.lens) {
                c.seen += len;
            }
        }
        Ok(ForwardOutput {
            logits,
            layout,
            decisions,
            expert_decisions: ctx.expert_decisions,
            loads: ctx.loads,
            flops: ctx.flops,
            hidden,
            gate_probs: ctx.gate_probs,
        })
    }

    /// Causal logits `[len × vocab]` of the plain backbone. With a cache the
    /// tokens continue the cached sequence.
    pub fn forward_dense(&self, tokens: &[usize], cache: Option<&mut KvCache>) -> Result<Tensor> {
        let tape = Tape::inference();
        let caches = cache.map(std::slice::from_mut);
        let out = self.forward(&tape, &[tokens], &Routing::dense(), &ForwardOptions::default(), caches)?;
        Ok(out.logits)
    }

    /// Greedy generation: prefill every prompt, then `gen_len` single-token
    /// steps. Returns the generated tokens, the final caches and the FLOPs of
    /// prefill and generation.
    pub fn generate(
        &self,
        routing: &Routing,
        prompts: &[Vec<usize>],
        gen_len: usize,
    ) -> Result<Generation> {
        let tape = Tape::inference();
        let opts = ForwardOptions::default();
        let mut caches: Vec<KvCache> = prompts.iter().map(|_| KvCache::new(&self.config)).collect();
        let started = Instant::now();
        let out = self.forward(&tape, prompts, routing, &opts, Some(&mut caches))?;
        let prefill_flops = out.flops.clone();
        let mut peak_bytes: usize = caches.iter().map(KvCache::bytes).sum();
        let mut next: Vec<usize> = (0..prompts.len())
            .map(|b| argmax(out.sequence_logits(b).last().copied().unwrap_or(&[])))
            .collect();
        let prefill_time = started.elapsed();
        let started = Instant::now();
        let mut tokens = vec![Vec::with_capacity(gen_len); prompts.len()];
        let mut gen_flops = FlopReport::new(self.config.n_layers);
        for step in 0..gen_len {
            for (t, &n) in tokens.iter_mut().zip(&next) {
                t.push(n);
            }
            if step + 1 == gen_len {
                break;
            }
            let step_in: Vec<[usize; 1]> = next.iter().map(|&n| [n]).collect();
            let out = self.forward(&tape, &step_in, routing, &opts, Some(&mut caches))?;
            gen_flops.accumulate(&out.flops);
            peak_bytes = peak_bytes.max(caches.iter().map(KvCache::bytes).sum());
            next = (0..prompts.len())
                .map(|b| argmax(out.sequence_logits(b)[0]))
                .collect();
        }
        Ok(Generation {
            tokens,
            caches,
            prefill_flops,
            generation_flops: gen_flops,
            peak_cache_bytes: peak_bytes,
            prefill_time,
            generation_time: started.elapsed(),
        })
    }
}

#[derive(Debug)]
pub struct Generation {
    pub tokens: Vec<Vec<usize>>,
    pub caches: Vec<KvCache>,
    pub prefill_flops: FlopReport,
    pub generation_flops: FlopReport,
    pub peak_cache_bytes: usize,
    pub prefill_time: Duration,
    pub generation_time: Duration,
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
