//! Incremental decoding. A session keeps one growing cache or recurrent
//! state per block; each generated token runs the router again, advances
//! only the blocks it picked, and mirrors the full forward pass row for
//! row, so greedy decode agrees with whole-sequence argmax.

use crate::attention::KvCache;
use crate::delta::{DeltaState, NORM_EPS};
use crate::kernels::{self, RopeTable};
use crate::mac::{self, MacBreakdown};
use crate::model::{LayerParams, Model};
use crate::router::{route_topk, SeParams, SE_HIDDEN};
use crate::stage::{
    AttnSubParams, FfnParams, InnerParams, StageParams, ThinBlockParams, RMSNORM_EPS,
};
use crate::tensor::{Error, Real, Result, Tensor};

enum MixState<E: Real> {
    Kv(KvCache<E>),
    Delta(DeltaState<E>),
}

impl<E: Real> MixState<E> {
    fn for_attn(attn: &AttnSubParams<E>) -> Self {
        match attn {
            AttnSubParams::Softmax(p) => MixState::Kv(KvCache::new(p.heads, p.d_head())),
            AttnSubParams::Delta(p) => MixState::Delta(DeltaState::new(p.heads, p.d_head())),
        }
    }

    fn context(&self) -> usize {
        match self {
            MixState::Kv(c) => c.context(),
            MixState::Delta(s) => s.context(),
        }
    }
}

enum LayerSlot<E: Real> {
    Dense(MixState<E>),
    Split(Vec<MixState<E>>),
}

fn matvec<E: Real>(w: &Tensor<E>, x: &[E]) -> Vec<E> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![E::zero(); cols];
    kernels::matvec_t(w.data(), x, rows, cols, &mut y);
    y
}

fn rmsnorm_row<E: Real>(x: &[E], gamma: &Tensor<E>) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    kernels::rmsnorm_rows(x, gamma.data(), E::from_f64(RMSNORM_EPS), 1, x.len(), &mut out);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<E: Real>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn mix_step<E: Real>(
    attn: &AttnSubParams<E>,
    state: &mut MixState<E>,
    rope: &RopeTable<E>,
    pos: usize,
    delta_rope: bool,
    x: &[E],
    macs: &mut MacBreakdown,
) -> Result<Vec<E>> {
    match (attn, state) {
        (AttnSubParams::Softmax(p), MixState::Kv(c)) => Ok(c.decode_step(p, rope, x, pos, macs)),
        (AttnSubParams::Delta(p), MixState::Delta(s)) => {
            let r = if delta_rope { Some((rope, pos)) } else { None };
            Ok(s.decode_step(p, r, x, macs))
        }
        _ => Err(Error::Invalid { op: "decode", msg: "state kind does not match block".into() }),
    }
}

fn ffn_decode<E: Real>(p: &FfnParams<E>, x: &[E], macs: &mut MacBreakdown) -> Vec<E> {
    match p {
        FfnParams::Dense { w1, w2 } => {
            let mut a = matvec(w1, x);
            for v in a.iter_mut() {
                *v = kernels::gelu(*v);
            }
            let out = matvec(w2, &a);
            macs.ffn += mac::linear_macs(1, w1.shape()[0], w1.shape()[1])
                + mac::linear_macs(1, w2.shape()[0], w2.shape()[1]);
            out
        }
        FfnParams::Rank1Moe { router, w, u, active } => {
            let d = router.shape()[0];
            let experts = router.shape()[1];
            let logits = matvec(router, x);
            let mut probs = vec![E::zero(); experts];
            kernels::softmax_row(&logits, &mut probs);
            macs.router += mac::linear_macs(1, d, experts);
            let dec = route_topk(
                &Tensor::new(&[1, experts], probs).expect("probe row"),
                *active,
            );
            let mut out = vec![E::zero(); d];
            for (slot, &e) in dec.picks.iter().enumerate() {
                let gate = dec.weights[slot];
                let mut pre = E::zero();
                for i in 0..d {
                    pre += x[i] * w.data()[i * experts + e];
                }
                let scale = gate * kernels::gelu(pre);
                kernels::axpy(&mut out, scale, &u.data()[e * d..(e + 1) * d]);
                macs.ffn += 2 * d as u64;
            }
            out
        }
    }
}

fn inner_decode<E: Real>(
    p: &InnerParams<E>,
    state: &mut MixState<E>,
    rope: &RopeTable<E>,
    pos: usize,
    delta_rope: bool,
    x: &[E],
    macs: &mut MacBreakdown,
) -> Result<Vec<E>> {
    let d = x.len();
    let n1 = rmsnorm_row(x, &p.norm1);
    macs.norm += mac::norm_macs(1, d);
    let attn = mix_step(&p.attn, state, rope, pos, delta_rope, &n1, macs)?;
    let mut h1 = x.to_vec();
    kernels::axpy(&mut h1, E::one(), &attn);
    let n2 = rmsnorm_row(&h1, &p.norm2);
    macs.norm += mac::norm_macs(1, d);
    let f = ffn_decode(&p.ffn, &n2, macs);
    kernels::axpy(&mut h1, E::one(), &f);
    Ok(h1)
}

/// One thin block's contribution for one token: enter the thin width, run
/// the inner block against this block's own state, leave the thin width.
fn thin_decode<E: Real>(
    b: &ThinBlockParams<E>,
    state: &mut MixState<E>,
    rope: &RopeTable<E>,
    pos: usize,
    delta_rope: bool,
    x: &[E],
    macs: &mut MacBreakdown,
) -> Result<Vec<E>> {
    let h = matvec(&b.w_down, x);
    macs.proj += mac::linear_macs(1, b.w_down.shape()[0], b.w_down.shape()[1]);
    let y = inner_decode(&b.inner, state, rope, pos, delta_rope, &h, macs)?;
    let mut diff = y;
    kernels::axpy(&mut diff, -E::one(), &h);
    let up = matvec(&b.w_up, &diff);
    macs.proj += mac::linear_macs(1, b.w_up.shape()[0], b.w_up.shape()[1]);
    Ok(up)
}

fn se_gate_row<E: Real>(se: &SeParams<E>, mags: &[E], macs: &mut MacBreakdown) -> Vec<E> {
    let k = mags.len();
    let mut h = matvec(&se.w1, mags);
    for (hv, &b) in h.iter_mut().zip(se.b1.data()) {
        *hv = kernels::silu(*hv + b);
    }
    let mut out = matvec(&se.w2, &h);
    for (ov, &b) in out.iter_mut().zip(se.b2.data()) {
        *ov = kernels::sigmoid(*ov + b);
    }
    macs.router += mac::linear_macs(1, k, SE_HIDDEN) + mac::linear_macs(1, SE_HIDDEN, k);
    out
}

fn stage_decode<E: Real>(
    p: &StageParams<E>,
    states: &mut [MixState<E>],
    rope: &RopeTable<E>,
    pos: usize,
    delta_rope: bool,
    x: &[E],
    macs: &mut MacBreakdown,
) -> Result<(Vec<E>, Vec<(usize, E)>)> {
    let spec = &p.spec;
    let d = x.len();
    let routed = spec.routed();

    let logits = matvec(&p.router, x);
    let mut probs = vec![E::zero(); routed];
    kernels::softmax_row(&logits, &mut probs);
    macs.router += mac::linear_macs(1, d, routed);
    let dec = route_topk(&Tensor::new(&[1, routed], probs)?, spec.k);
    let picks: Vec<(usize, E)> =
        dec.picks.iter().zip(&dec.weights).map(|(&b, &w)| (b, w)).collect();

    let mut shared_sum: Option<Vec<E>> = None;
    for i in 0..spec.s {
        let o = thin_decode(&p.blocks[i], &mut states[i], rope, pos, delta_rope, x, macs)?;
        match shared_sum.as_mut() {
            Some(acc) => kernels::axpy(acc, E::one(), &o),
            None => shared_sum = Some(o),
        }
    }

    // Contributions in pick-slot order for the gate magnitudes, combined in
    // ascending block order like the full-sequence path.
    let mut outs: Vec<Option<Vec<E>>> = vec![None; spec.k];
    for (j, &(b, _)) in picks.iter().enumerate() {
        let st = &mut states[spec.s + b];
        outs[j] = Some(thin_decode(&p.blocks[spec.s + b], st, rope, pos, delta_rope, x, macs)?);
    }
    let gates = p.se.as_ref().map(|se| {
        let eps = E::from_f64(NORM_EPS);
        let mags: Vec<E> = outs
            .iter()
            .map(|o| {
                let o = o.as_ref().expect("every pick slot produced output");
                (kernels::dot(o, o) + eps).sqrt()
            })
            .collect();
        se_gate_row(se, &mags, macs)
    });

    let mut order: Vec<usize> = (0..spec.k).collect();
    order.sort_by_key(|&j| picks[j].0);
    let mut routed_sum = vec![E::zero(); d];
    for j in order {
        let (_, w) = picks[j];
        let w = match &gates {
            Some(g) => w * g[j],
            None => w,
        };
        kernels::axpy(&mut routed_sum, w, outs[j].as_ref().expect("pick output"));
    }

    let inv_k = E::from_f64(1.0 / spec.k as f64);
    let mut y = x.to_vec();
    if spec.shared_in_average {
        let mut acc = shared_sum.unwrap_or_else(|| vec![E::zero(); d]);
        kernels::axpy(&mut acc, E::one(), &routed_sum);
        kernels::axpy(&mut y, inv_k, &acc);
    } else {
        if let Some(s) = shared_sum {
            kernels::axpy(&mut y, E::one(), &s);
        }
        kernels::axpy(&mut y, inv_k, &routed_sum);
    }
    Ok((y, picks))
}

pub struct StepOutput<E: Real> {
    /// Next-token logits `[vocab]`.
    pub logits: Vec<E>,
    /// Exact multiply count for this one token.
    pub macs: MacBreakdown,
    /// Per layer: routed picks `(block, router weight)`; `None` for dense.
    pub picks: Vec<Option<Vec<(usize, E)>>>,
}

pub struct DecodeSession<'m, E: Real> {
    model: &'m Model<E>,
    pos: usize,
    layers: Vec<LayerSlot<E>>,
}

impl<'m, E: Real> DecodeSession<'m, E> {
    pub fn new(model: &'m Model<E>) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Dense(p) => LayerSlot::Dense(MixState::for_attn(&p.attn)),
                LayerParams::Split(p) => LayerSlot::Split(
                    p.blocks.iter().map(|b| MixState::for_attn(&b.inner.attn)).collect(),
                ),
            })
            .collect();
        DecodeSession { model, pos: 0, layers }
    }

    /// Tokens consumed so far; also the next token's position.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// How many tokens each block of `layer` has actually seen.
    pub fn block_contexts(&self, layer: usize) -> Vec<usize> {
        match &self.layers[layer] {
            LayerSlot::Dense(s) => vec![s.context()],
            LayerSlot::Split(blocks) => blocks.iter().map(MixState::context).collect(),
        }
    }

    /// Consume one token and return the logits for the next one.
    pub fn step(&mut self, token: usize) -> Result<StepOutput<E>> {
        let cfg = &self.model.cfg;
        if token >= cfg.vocab {
            return Err(Error::Invalid {
                op: "decode",
                msg: format!("token {token} outside vocab of {}", cfg.vocab),
            });
        }
        if self.pos >= cfg.t_max {
            return Err(Error::Invalid {
                op: "decode",
                msg: format!("position {} reached t_max {}", self.pos, cfg.t_max),
            });
        }
        let pos = self.pos;
        let d = cfg.d_model;
        let mut macs = MacBreakdown::default();
        let mut x = self.model.embed.data()[token * d..(token + 1) * d].to_vec();
        let mut picks = Vec::with_capacity(self.layers.len());
        for (lp, slot) in self.model.layers.iter().zip(self.layers.iter_mut()) {
            match (lp, slot) {
                (LayerParams::Dense(p), LayerSlot::Dense(st)) => {
                    x = inner_decode(
                        p,
                        st,
                        &self.model.rope,
                        pos,
                        cfg.delta_rope,
                        &x,
                        &mut macs,
                    )?;
                    picks.push(None);
                }
                (LayerParams::Split(p), LayerSlot::Split(states)) => {
                    let (y, pk) = stage_decode(
                        p,
                        states,
                        &self.model.rope,
                        pos,
                        cfg.delta_rope,
                        &x,
                        &mut macs,
                    )?;
                    x = y;
                    picks.push(Some(pk));
                }
                _ => {
                    return Err(Error::Invalid {
                        op: "decode",
                        msg: "session layout does not match the model".into(),
                    })
                }
            }
        }
        let xn = rmsnorm_row(&x, &self.model.final_norm);
        let logits = matvec(&self.model.head, &xn);
        macs.head += mac::norm_macs(1, d) + mac::linear_macs(1, d, cfg.vocab);
        self.pos += 1;
        Ok(StepOutput { logits, macs, picks })
    }

    /// Feed a prompt and return the last step's output.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<StepOutput<E>> {
        let (last, rest) = tokens
            .split_last()
            .ok_or(Error::Invalid { op: "decode", msg: "empty prompt".into() })?;
        for &t in rest {
            self.step(t)?;
        }
        self.step(*last)
    }
}

/// Greedy continuation: feed the prompt, then repeatedly take the argmax.
pub fn greedy_decode<E: Real>(
    model: &Model<E>,
    prompt: &[usize],
    n: usize,
) -> Result<Vec<usize>> {
    let mut session = DecodeSession::new(model);
    let mut out = Vec::with_capacity(n);
    let mut step = session.prefill(prompt)?;
    for _ in 0..n {
        let next = argmax(&step.logits);
        out.push(next);
        step = session.step(next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LayerKind, ModelConfig};
    use crate::graph::Graph;
    use crate::model::{build_model, forward_lm};
    use crate::stage::{AttnKind, DispatchMode, FfnKind};

    fn hybrid_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::base(
            64,
            vec![
                LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 },
                LayerKind::Dense,
            ],
        );
        cfg.t_max = 96;
        cfg.dense_d_ff = 128;
        cfg.routed_attn = AttnKind::Delta;
        cfg.seed = 31;
        cfg
    }

    fn full_forward_logits(model: &crate::model::Model<f64>, tokens: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let vars = model.leaf(&mut g, false);
        let out = forward_lm(&mut g, model, &vars, tokens, DispatchMode::Dense).unwrap();
        g.value(out.logits).data().to_vec()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn test_decode_matches_full_forward_row_by_row() {
        let model = build_model::<f64>(&hybrid_cfg()).unwrap();
        let tokens: Vec<usize> = (0..14).map(|i| (i * 53 + 9) % 256).collect();
        let full = full_forward_logits(&model, &tokens);
        let vocab = model.cfg.vocab;
        let mut session = DecodeSession::new(&model);
        for (i, &tok) in tokens.iter().enumerate() {
            let step = session.step(tok).unwrap();
            let diff = max_diff(&step.logits, &full[i * vocab..(i + 1) * vocab]);
            assert!(diff < 1e-10, "row {i} differs by {diff}");
        }
        assert_eq!(session.position(), tokens.len());
    }

    #[test]
    fn test_decode_with_gating_moe_and_averaged_shared() {
        let mut cfg = hybrid_cfg();
        cfg.se_gating = true;
        cfg.shared_in_average = true;
        cfg.delta_rope = true;
        cfg.ffn = FfnKind::Rank1Moe { experts: 5, active: 2 };
        cfg.seed = 32;
        let model = build_model::<f64>(&cfg).unwrap();
        let tokens: Vec<usize> = (0..11).map(|i| (i * 91 + 4) % 256).collect();
        let full = full_forward_logits(&model, &tokens);
        let vocab = model.cfg.vocab;
        let mut session = DecodeSession::new(&model);
        for (i, &tok) in tokens.iter().enumerate() {
            let step = session.step(tok).unwrap();
            let diff = max_diff(&step.logits, &full[i * vocab..(i + 1) * vocab]);
            assert!(diff < 1e-10, "row {i} differs by {diff}");
        }
    }

    #[test]
    fn test_greedy_matches_full_forward_argmax_chain() {
        let model = build_model::<f64>(&hybrid_cfg()).unwrap();
        let prompt: Vec<usize> = vec![10, 200, 7, 31];
        let generated = greedy_decode(&model, &prompt, 32).unwrap();

        let mut seq = prompt.clone();
        let vocab = model.cfg.vocab;
        let mut expect = Vec::new();
        for _ in 0..32 {
            let full = full_forward_logits(&model, &seq);
            let last = &full[(seq.len() - 1) * vocab..];
            let next = argmax(last);
            expect.push(next);
            seq.push(next);
        }
        assert_eq!(generated, expect);
    }

    #[test]
    fn test_blocks_only_see_their_own_tokens() {
        let model = build_model::<f64>(&hybrid_cfg()).unwrap();
        let tokens: Vec<usize> = (0..20).map(|i| (i * 17 + 3) % 256).collect();
        let mut session = DecodeSession::new(&model);
        for &t in &tokens {
            session.step(t).unwrap();
        }
        let ctx = session.block_contexts(0);
        let spec = model.cfg.stage_spec(0).unwrap();
        assert_eq!(ctx.len(), spec.n);
        assert_eq!(ctx[0], tokens.len(), "shared block sees everything");
        let routed_total: usize = ctx[spec.s..].iter().sum();
        assert_eq!(routed_total, tokens.len() * spec.k);
        assert_eq!(session.block_contexts(1), vec![tokens.len()]);
    }

    #[test]
    fn test_decode_macs_scale_with_context_only_for_softmax() {
        let model = build_model::<f64>(&hybrid_cfg()).unwrap();
        let mut session = DecodeSession::new(&model);
        let mut rows = Vec::new();
        for i in 0..12 {
            rows.push(session.step((i * 7) % 256).unwrap().macs);
        }
        for w in rows.windows(2) {
            assert_eq!(w[0].delta, w[1].delta, "delta cost is context-free");
            assert_eq!(w[0].proj, w[1].proj);
            assert_eq!(w[0].head, w[1].head);
            assert!(w[0].attn < w[1].attn, "softmax cost grows with context");
        }
    }

    #[test]
    fn test_decode_rejects_bad_token_and_overflow() {
        let mut cfg = hybrid_cfg();
        cfg.t_max = 3;
        let model = build_model::<f64>(&cfg).unwrap();
        let mut session = DecodeSession::new(&model);
        assert!(session.step(999).is_err());
        for t in 0..3 {
            session.step(t).unwrap();
        }
        let err = match session.step(0) {
            Err(e) => e,
            Ok(_) => panic!("expected t_max overflow"),
        };
        assert!(err.to_string().contains("t_max"), "{err}");
    }
}
