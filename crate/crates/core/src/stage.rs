//! Split stages built from thin blocks.
//!
//! A thin block projects the model stream down to a narrow width, runs one
//! full pre-norm transformer block there, and projects the block's net
//! contribution back up: `W_up (block(W_down x) - W_down x)`. A split stage
//! keeps a few shared thin blocks that see every token and routes each token
//! to `k` of the remaining blocks picked by a softmax router:
//!
//! `y = x + sum_shared block_s(x) + (1/k) * sum_picked w_i * block_i(x_i)`
//!
//! The routed sum is computed three interchangeable ways: `Dense` runs every
//! block over the full sequence and masks non-members to zero (the training
//! form), `Sparse` gathers each block's tokens into a compact subsequence,
//! and `Batched` stacks all routed subsequences into one padded fused call
//! per mixing primitive. All three agree on the result; they differ only in
//! how the work is laid out.

use std::sync::Arc;

use crate::attention::{attention_sublayer, AttnParams, AttnVars, Visibility};
use crate::delta::{
    delta_features_padded, delta_sublayer, DeltaForm, DeltaParams, DeltaVars, NORM_EPS,
};
use crate::graph::{Graph, Var};
use crate::kernels::RopeTable;
use crate::router::{route_topk, se_gate, RoutingDecision, SeParams, SeVars};
use crate::tensor::{Error, Real, Result, Tensor};

pub const RMSNORM_EPS: f64 = 1e-6;

/// Sequence mixing a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Softmax,
    Delta,
}

/// Feed-forward a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    Dense,
    Rank1Moe { experts: usize, active: usize },
}

/// How the routed blocks are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchMode {
    Dense,
    Sparse,
    Batched,
}

/// Shape of one split stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// Total thin blocks, shared ones included.
    pub n: usize,
    /// Leading blocks that see every token.
    pub s: usize,
    /// Routed blocks each token picks.
    pub k: usize,
    pub d_thin: usize,
    pub d_ff: usize,
    /// Mixing used by the routed blocks; shared blocks always use softmax.
    pub routed_attn: AttnKind,
    pub ffn: FfnKind,
    pub se_gating: bool,
    /// Fold the shared contributions into the `1/k` average instead of
    /// adding them at full strength.
    pub shared_in_average: bool,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid { op: "stage", msg });
        if self.n == 0 || self.s >= self.n {
            return fail(format!("{} blocks with {} shared leaves none routed", self.n, self.s));
        }
        let routed = self.n - self.s;
        if self.k == 0 || self.k > routed {
            return fail(format!("top-{} of {} routed blocks", self.k, routed));
        }
        if self.d_thin == 0 || self.d_ff == 0 {
            return fail("zero-width block".into());
        }
        if let FfnKind::Rank1Moe { experts, active } = self.ffn {
            if experts == 0 || active == 0 || active > experts {
                return fail(format!("top-{active} of {experts} experts"));
            }
        }
        Ok(())
    }

    pub fn routed(&self) -> usize {
        self.n - self.s
    }
}

/// Everything a forward pass needs to know about the sequence besides the
/// activations themselves: the rope table, the original position of each
/// row, and how delta recurrences should be evaluated.
pub struct SeqCtx<'a, E: Real> {
    pub rope: &'a Arc<RopeTable<E>>,
    pub positions: &'a [usize],
    pub delta_form: DeltaForm,
    pub delta_rope: bool,
}

/// What the rows of a block input mean.
#[derive(Clone, Copy)]
pub enum InnerVis<'a> {
    /// The rows are themselves the (sub)sequence, in order.
    Rows,
    /// The rows span the full sequence; mixing is restricted to these rows
    /// and all other rows contribute nothing.
    Masked(&'a [usize]),
}

#[derive(Clone)]
pub enum FfnParams<E: Real> {
    Dense {
        /// `[d, d_ff]`
        w1: Tensor<E>,
        /// `[d_ff, d]`
        w2: Tensor<E>,
    },
    Rank1Moe {
        /// `[d, experts]` expert router.
        router: Tensor<E>,
        /// `[d, experts]`, column `i` is the read vector of expert `i`.
        w: Tensor<E>,
        /// `[experts, d]`, row `i` is the write vector of expert `i`.
        u: Tensor<E>,
        active: usize,
    },
}

impl<E: Real> FfnParams<E> {
    pub fn zeros(d: usize, d_ff: usize, kind: FfnKind) -> Self {
        match kind {
            FfnKind::Dense => FfnParams::Dense {
                w1: Tensor::zeros(&[d, d_ff]),
                w2: Tensor::zeros(&[d_ff, d]),
            },
            FfnKind::Rank1Moe { experts, active } => FfnParams::Rank1Moe {
                router: Tensor::zeros(&[d, experts]),
                w: Tensor::zeros(&[d, experts]),
                u: Tensor::zeros(&[experts, d]),
                active,
            },
        }
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> FfnVars {
        match self {
            FfnParams::Dense { w1, w2 } => FfnVars::Dense {
                w1: g.leaf(w1.clone(), trainable),
                w2: g.leaf(w2.clone(), trainable),
            },
            FfnParams::Rank1Moe { router, w, u, active } => FfnVars::Rank1Moe {
                router: g.leaf(router.clone(), trainable),
                w: g.leaf(w.clone(), trainable),
                u: g.leaf(u.clone(), trainable),
                active: *active,
            },
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        match self {
            FfnParams::Dense { w1, w2 } => {
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.w2"), w2);
            }
            FfnParams::Rank1Moe { router, w, u, .. } => {
                f(format!("{prefix}.router"), router);
                f(format!("{prefix}.w"), w);
                f(format!("{prefix}.u"), u);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        match self {
            FfnParams::Dense { w1, w2 } => {
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.w2"), w2);
            }
            FfnParams::Rank1Moe { router, w, u, .. } => {
                f(format!("{prefix}.router"), router);
                f(format!("{prefix}.w"), w);
                f(format!("{prefix}.u"), u);
            }
        }
    }
}

#[derive(Clone, Copy)]
pub enum FfnVars {
    Dense { w1: Var, w2: Var },
    Rank1Moe { router: Var, w: Var, u: Var, active: usize },
}

/// `W2 gelu(W1 h)`, no biases.
pub fn ffn_dense<E: Real>(g: &mut Graph<E>, h: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = g.matmul(h, w1)?;
    let act = g.gelu(a);
    g.matmul(act, w2)
}

/// Per-token mixture of rank-1 experts. Each token softmaxes its expert
/// router, keeps the top `active` experts with their unrenormalized
/// weights, and sums `g_i * u_i * gelu(w_i . h)` over the kept experts.
pub fn ffn_rank1_moe<E: Real>(
    g: &mut Graph<E>,
    h: Var,
    router: Var,
    w: Var,
    u: Var,
    active: usize,
) -> Result<Var> {
    let logits = g.matmul(h, router)?;
    let probs = g.softmax_lastdim(logits)?;
    let t = g.shape(probs)[0];
    let experts = g.shape(probs)[1];
    if active == 0 || active > experts {
        return Err(Error::Invalid {
            op: "ffn",
            msg: format!("top-{active} of {experts} experts"),
        });
    }
    let decision = route_topk(g.value(probs), active);
    let mut keep = vec![E::zero(); t * experts];
    for tok in 0..t {
        for &e in &decision.picks[tok * active..(tok + 1) * active] {
            keep[tok * experts + e] = E::one();
        }
    }
    let mask = Tensor::new(&[t, experts], keep)?;
    let gates = g.mul_mask(probs, &mask)?;
    let pre = g.matmul(h, w)?;
    let act = g.gelu(pre);
    let mix = g.mul(gates, act)?;
    g.matmul(mix, u)
}

pub fn ffn_forward<E: Real>(g: &mut Graph<E>, h: Var, p: &FfnVars) -> Result<Var> {
    match *p {
        FfnVars::Dense { w1, w2 } => ffn_dense(g, h, w1, w2),
        FfnVars::Rank1Moe { router, w, u, active } => ffn_rank1_moe(g, h, router, w, u, active),
    }
}

#[derive(Clone)]
pub enum AttnSubParams<E: Real> {
    Softmax(AttnParams<E>),
    Delta(DeltaParams<E>),
}

impl<E: Real> AttnSubParams<E> {
    pub fn zeros(d: usize, heads: usize, kind: AttnKind) -> Self {
        match kind {
            AttnKind::Softmax => AttnSubParams::Softmax(AttnParams::zeros(d, heads)),
            AttnKind::Delta => AttnSubParams::Delta(DeltaParams::zeros(d, heads)),
        }
    }

    pub fn kind(&self) -> AttnKind {
        match self {
            AttnSubParams::Softmax(_) => AttnKind::Softmax,
            AttnSubParams::Delta(_) => AttnKind::Delta,
        }
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> AttnSubVars {
        match self {
            AttnSubParams::Softmax(p) => AttnSubVars::Softmax(p.leaf(g, trainable)),
            AttnSubParams::Delta(p) => AttnSubVars::Delta(p.leaf(g, trainable)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        match self {
            AttnSubParams::Softmax(p) => p.visit(prefix, f),
            AttnSubParams::Delta(p) => p.visit(prefix, f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        match self {
            AttnSubParams::Softmax(p) => p.visit_mut(prefix, f),
            AttnSubParams::Delta(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Copy)]
pub enum AttnSubVars {
    Softmax(AttnVars),
    Delta(DeltaVars),
}

impl AttnSubVars {
    fn heads(&self) -> usize {
        match self {
            AttnSubVars::Softmax(a) => a.heads,
            AttnSubVars::Delta(d) => d.heads,
        }
    }
}

/// One pre-norm transformer block at some width, residuals included.
#[derive(Clone)]
pub struct InnerParams<E: Real> {
    pub norm1: Tensor<E>,
    pub norm2: Tensor<E>,
    pub attn: AttnSubParams<E>,
    pub ffn: FfnParams<E>,
}

impl<E: Real> InnerParams<E> {
    pub fn zeros(d: usize, heads: usize, attn: AttnKind, ffn: FfnKind, d_ff: usize) -> Self {
        InnerParams {
            norm1: Tensor::zeros(&[d]),
            norm2: Tensor::zeros(&[d]),
            attn: AttnSubParams::zeros(d, heads, attn),
            ffn: FfnParams::zeros(d, d_ff, ffn),
        }
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> InnerVars {
        InnerVars {
            norm1: g.leaf(self.norm1.clone(), trainable),
            norm2: g.leaf(self.norm2.clone(), trainable),
            attn: self.attn.leaf(g, trainable),
            ffn: self.ffn.leaf(g, trainable),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.norm1"), &self.norm1);
        f(format!("{prefix}.norm2"), &self.norm2);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.norm1"), &mut self.norm1);
        f(format!("{prefix}.norm2"), &mut self.norm2);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

#[derive(Clone, Copy)]
pub struct InnerVars {
    pub norm1: Var,
    pub norm2: Var,
    pub attn: AttnSubVars,
    pub ffn: FfnVars,
}

/// Pre-norm block: `h + attn(norm(h))`, then `z + ffn(norm(z))`. With
/// `InnerVis::Masked` the mixing step sees only the listed rows; every
/// pointwise step still runs on all rows, and masked-out rows receive a
/// zero mixing delta.
pub fn inner_block<E: Real>(
    g: &mut Graph<E>,
    h: Var,
    p: &InnerVars,
    ctx: &SeqCtx<'_, E>,
    vis: InnerVis<'_>,
) -> Result<Var> {
    let n1 = g.rmsnorm(h, p.norm1, RMSNORM_EPS)?;
    let attn = match (&p.attn, vis) {
        (AttnSubVars::Softmax(a), InnerVis::Rows) => {
            attention_sublayer(g, n1, a, ctx.rope, ctx.positions, Visibility::Full)?
        }
        (AttnSubVars::Softmax(a), InnerVis::Masked(sub)) => {
            attention_sublayer(g, n1, a, ctx.rope, ctx.positions, Visibility::Subset(sub))?
        }
        (AttnSubVars::Delta(dp), InnerVis::Rows) => {
            let rope = ctx.delta_rope.then(|| (ctx.rope, ctx.positions));
            delta_sublayer(g, n1, dp, ctx.delta_form, rope)?.0
        }
        (AttnSubVars::Delta(dp), InnerVis::Masked(sub)) => {
            // The recurrence runs over the compact subsequence, so gather
            // member rows, mix, and scatter the delta back among zeros.
            let gathered = g.gather_rows(n1, sub)?;
            let sub_pos: Vec<usize> = sub.iter().map(|&r| ctx.positions[r]).collect();
            let rope = ctx.delta_rope.then(|| (ctx.rope, sub_pos.as_slice()));
            let (o, _) = delta_sublayer(g, gathered, dp, ctx.delta_form, rope)?;
            let rows = g.shape(h)[0];
            g.scatter_rows(o, sub, rows)?
        }
    };
    let h1 = g.add(h, attn)?;
    let n2 = g.rmsnorm(h1, p.norm2, RMSNORM_EPS)?;
    let f = ffn_forward(g, n2, &p.ffn)?;
    g.add(h1, f)
}

/// Down-projection, inner block, and up-projection of the block's net
/// contribution: `W_up (inner(W_down x) - W_down x)`.
#[derive(Clone)]
pub struct ThinBlockParams<E: Real> {
    /// `[d_model, d_thin]`
    pub w_down: Tensor<E>,
    /// `[d_thin, d_model]`
    pub w_up: Tensor<E>,
    pub inner: InnerParams<E>,
}

impl<E: Real> ThinBlockParams<E> {
    pub fn zeros(
        d_model: usize,
        d_thin: usize,
        heads: usize,
        attn: AttnKind,
        ffn: FfnKind,
        d_ff: usize,
    ) -> Self {
        ThinBlockParams {
            w_down: Tensor::zeros(&[d_model, d_thin]),
            w_up: Tensor::zeros(&[d_thin, d_model]),
            inner: InnerParams::zeros(d_thin, heads, attn, ffn, d_ff),
        }
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> ThinVars {
        ThinVars {
            w_down: g.leaf(self.w_down.clone(), trainable),
            w_up: g.leaf(self.w_up.clone(), trainable),
            inner: self.inner.leaf(g, trainable),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.w_down"), &self.w_down);
        f(format!("{prefix}.w_up"), &self.w_up);
        self.inner.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.w_down"), &mut self.w_down);
        f(format!("{prefix}.w_up"), &mut self.w_up);
        self.inner.visit_mut(prefix, f);
    }
}

#[derive(Clone, Copy)]
pub struct ThinVars {
    pub w_down: Var,
    pub w_up: Var,
    pub inner: InnerVars,
}

pub fn thin_block<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    p: &ThinVars,
    ctx: &SeqCtx<'_, E>,
    vis: InnerVis<'_>,
) -> Result<Var> {
    let h = g.matmul(x, p.w_down)?;
    let y = inner_block(g, h, &p.inner, ctx, vis)?;
    let d = g.sub(y, h)?;
    g.matmul(d, p.w_up)
}

/// Weights of one split stage. Blocks `0..s` are shared, `s..n` routed.
#[derive(Clone)]
pub struct StageParams<E: Real> {
    pub spec: StageSpec,
    pub blocks: Vec<ThinBlockParams<E>>,
    /// `[d_model, n - s]` routing logits.
    pub router: Tensor<E>,
    pub se: Option<SeParams<E>>,
}

impl<E: Real> StageParams<E> {
    pub fn zeros(d_model: usize, heads: usize, spec: StageSpec) -> Self {
        let blocks = (0..spec.n)
            .map(|i| {
                let attn = if i < spec.s { AttnKind::Softmax } else { spec.routed_attn };
                ThinBlockParams::zeros(d_model, spec.d_thin, heads, attn, spec.ffn, spec.d_ff)
            })
            .collect();
        StageParams {
            spec,
            blocks,
            router: Tensor::zeros(&[d_model, spec.routed()]),
            se: spec.se_gating.then(|| SeParams::zeros(spec.k)),
        }
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> StageVars {
        StageVars {
            blocks: self.blocks.iter().map(|b| b.leaf(g, trainable)).collect(),
            router: g.leaf(self.router.clone(), trainable),
            se: self.se.as_ref().map(|p| p.leaf(g, trainable)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let name = if i < self.spec.s {
                format!("{prefix}.shared{i}")
            } else {
                format!("{prefix}.routed{}", i - self.spec.s)
            };
            b.visit(&name, f);
        }
        f(format!("{prefix}.router"), &self.router);
        if let Some(se) = &self.se {
            se.visit(&format!("{prefix}.se"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        let s = self.spec.s;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = if i < s {
                format!("{prefix}.shared{i}")
            } else {
                format!("{prefix}.routed{}", i - s)
            };
            b.visit_mut(&name, f);
        }
        f(format!("{prefix}.router"), &mut self.router);
        if let Some(se) = &mut self.se {
            se.visit_mut(&format!("{prefix}.se"), f);
        }
    }
}

pub struct StageVars {
    pub blocks: Vec<ThinVars>,
    pub router: Var,
    pub se: Option<SeVars>,
}

/// Run one split stage over `x: [t, d_model]`. Returns the stage output,
/// the router balance penalty (squared coefficient of variation of the
/// per-block softmax load), and the routing decision.
pub fn split_stage<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    spec: &StageSpec,
    vars: &StageVars,
    ctx: &SeqCtx<'_, E>,
    mode: DispatchMode,
) -> Result<(Var, Var, RoutingDecision<E>)> {
    spec.validate()?;
    let t = g.shape(x)[0];
    if ctx.positions.len() != t {
        return Err(Error::Invalid {
            op: "stage",
            msg: format!("{} positions for {t} rows", ctx.positions.len()),
        });
    }
    if vars.blocks.len() != spec.n {
        return Err(Error::Invalid {
            op: "stage",
            msg: format!("{} block params for n = {}", vars.blocks.len(), spec.n),
        });
    }
    if vars.se.is_some() && mode != DispatchMode::Dense {
        return Err(Error::Invalid {
            op: "stage",
            msg: "se gating runs under dense dispatch or decode only".into(),
        });
    }

    let logits = g.matmul(x, vars.router)?;
    let probs = g.softmax_lastdim(logits)?;
    let decision = route_topk(g.value(probs), spec.k);
    let load = g.sum_axis0(probs)?;
    let aux = g.cv2(load)?;

    let mut shared: Option<Var> = None;
    for i in 0..spec.s {
        let o = thin_block(g, x, &vars.blocks[i], ctx, InnerVis::Rows)?;
        shared = Some(match shared {
            Some(a) => g.add(a, o)?,
            None => o,
        });
    }

    let routed = match mode {
        DispatchMode::Dense => routed_dense(g, x, spec, vars, ctx, probs, &decision)?,
        DispatchMode::Sparse => routed_sparse(g, x, spec, vars, ctx, probs, &decision)?,
        DispatchMode::Batched => routed_batched(g, x, spec, vars, ctx, probs, &decision)?,
    };

    let inv_k = 1.0 / spec.k as f64;
    let mut y = x;
    if spec.shared_in_average {
        let mut acc = shared;
        if let Some(r) = routed {
            acc = Some(match acc {
                Some(a) => g.add(a, r)?,
                None => r,
            });
        }
        if let Some(a) = acc {
            let scaled = g.scale(a, inv_k);
            y = g.add(y, scaled)?;
        }
    } else {
        if let Some(s) = shared {
            y = g.add(y, s)?;
        }
        if let Some(r) = routed {
            let scaled = g.scale(r, inv_k);
            y = g.add(y, scaled)?;
        }
    }
    Ok((y, aux, decision))
}

fn member_mask<E: Real>(t: usize, toks: &[usize]) -> Result<Tensor<E>> {
    let mut m = vec![E::zero(); t];
    for &tok in toks {
        m[tok] = E::one();
    }
    Tensor::new(&[t], m)
}

/// Every routed block runs over the full sequence with mixing restricted to
/// its members; non-member rows are multiplied by a zero weight so only the
/// routed contributions survive. Weights flow from the router softmax.
fn routed_dense<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    spec: &StageSpec,
    vars: &StageVars,
    ctx: &SeqCtx<'_, E>,
    probs: Var,
    decision: &RoutingDecision<E>,
) -> Result<Option<Var>> {
    let t = g.shape(x)[0];
    let mut outs: Vec<Option<Var>> = vec![None; spec.routed()];
    let mut wsel: Vec<Option<Var>> = vec![None; spec.routed()];
    for i in 0..spec.routed() {
        let toks = decision.tokens_for(i);
        if toks.is_empty() {
            continue;
        }
        let o = thin_block(g, x, &vars.blocks[spec.s + i], ctx, InnerVis::Masked(&toks))?;
        let ci = g.col(probs, i)?;
        let mask = member_mask(t, &toks)?;
        outs[i] = Some(o);
        wsel[i] = Some(g.mul_mask(ci, &mask)?);
    }
    let gates = match &vars.se {
        Some(se) => Some(se_gates_dense(g, &outs, decision, se, t)?),
        None => None,
    };
    let mut acc: Option<Var> = None;
    for i in 0..spec.routed() {
        let (Some(o), Some(mut w)) = (outs[i], wsel[i]) else {
            continue;
        };
        if let Some(gv) = gates {
            let gi = gate_for_block(g, gv, decision, i, t)?;
            w = g.mul(w, gi)?;
        }
        let c = g.scale_rows(o, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, c)?,
            None => c,
        });
    }
    Ok(acc)
}

/// Gate magnitudes per pick slot: `mags[t, j]` is the row norm of the
/// contribution from token `t`'s `j`-th picked block.
fn se_gates_dense<E: Real>(
    g: &mut Graph<E>,
    outs: &[Option<Var>],
    decision: &RoutingDecision<E>,
    se: &SeVars,
    t: usize,
) -> Result<Var> {
    let k = decision.k;
    let mut norms: Vec<Option<Var>> = vec![None; outs.len()];
    for (i, o) in outs.iter().enumerate() {
        if let Some(o) = o {
            norms[i] = Some(g.rownorm(*o, NORM_EPS)?);
        }
    }
    let mut slots = Vec::with_capacity(k);
    for j in 0..k {
        let mut slot: Option<Var> = None;
        for (i, nv) in norms.iter().enumerate() {
            let Some(nv) = nv else { continue };
            let mut m = vec![E::zero(); t];
            let mut any = false;
            for tok in 0..t {
                if decision.picks[tok * k + j] == i {
                    m[tok] = E::one();
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let mask = Tensor::new(&[t], m)?;
            let part = g.mul_mask(*nv, &mask)?;
            slot = Some(match slot {
                Some(a) => g.add(a, part)?,
                None => part,
            });
        }
        slots.push(match slot {
            Some(s) => s,
            None => g.constant(Tensor::zeros(&[t])),
        });
    }
    let stacked = g.stack(&slots)?;
    let mags = g.transpose2(stacked)?;
    se_gate(g, mags, se)
}

/// Per-token gate for `block`: the gate of whichever pick slot selected it,
/// zero for tokens that did not pick it.
fn gate_for_block<E: Real>(
    g: &mut Graph<E>,
    gates: Var,
    decision: &RoutingDecision<E>,
    block: usize,
    t: usize,
) -> Result<Var> {
    let k = decision.k;
    let mut acc: Option<Var> = None;
    for j in 0..k {
        let mut m = vec![E::zero(); t];
        let mut any = false;
        for tok in 0..t {
            if decision.picks[tok * k + j] == block {
                m[tok] = E::one();
                any = true;
            }
        }
        if !any {
            continue;
        }
        let cj = g.col(gates, j)?;
        let mask = Tensor::new(&[t], m)?;
        let part = g.mul_mask(cj, &mask)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::zeros(&[t])),
    })
}

/// Each routed block gathers its tokens into a compact subsequence, runs
/// there, and scatter-adds its weighted contribution back, in ascending
/// block order.
fn routed_sparse<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    spec: &StageSpec,
    vars: &StageVars,
    ctx: &SeqCtx<'_, E>,
    probs: Var,
    decision: &RoutingDecision<E>,
) -> Result<Option<Var>> {
    let t = g.shape(x)[0];
    let mut acc: Option<Var> = None;
    for i in 0..spec.routed() {
        let toks = decision.tokens_for(i);
        if toks.is_empty() {
            continue;
        }
        let xi = g.gather_rows(x, &toks)?;
        let pos: Vec<usize> = toks.iter().map(|&r| ctx.positions[r]).collect();
        let sub_ctx = SeqCtx {
            rope: ctx.rope,
            positions: &pos,
            delta_form: ctx.delta_form,
            delta_rope: ctx.delta_rope,
        };
        let o = thin_block(g, xi, &vars.blocks[spec.s + i], &sub_ctx, InnerVis::Rows)?;
        let ci = g.col(probs, i)?;
        let w = g.gather_elems(ci, &toks)?;
        let weighted = g.scale_rows(o, w)?;
        let c = g.scatter_rows(weighted, &toks, t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, c)?,
            None => c,
        });
    }
    Ok(acc)
}

/// Like sparse, but every routed subsequence is padded to the longest one
/// and the mixing primitive runs once over all `blocks * heads` groups.
/// Padding rows carry zero queries and writes, so they neither contribute
/// to outputs nor disturb recurrent state, and they never touch the load
/// statistics, which come from the router softmax alone.
fn routed_batched<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    spec: &StageSpec,
    vars: &StageVars,
    ctx: &SeqCtx<'_, E>,
    probs: Var,
    decision: &RoutingDecision<E>,
) -> Result<Option<Var>> {
    let t = g.shape(x)[0];
    let mut ids = Vec::new();
    let mut toklists: Vec<Vec<usize>> = Vec::new();
    for i in 0..spec.routed() {
        let toks = decision.tokens_for(i);
        if !toks.is_empty() {
            ids.push(i);
            toklists.push(toks);
        }
    }
    if ids.is_empty() {
        return Ok(None);
    }
    let cap = toklists.iter().map(|l| l.len()).max().unwrap_or(0);
    let heads = vars.blocks[spec.s + ids[0]].inner.attn.heads();
    let kind = match &vars.blocks[spec.s + ids[0]].inner.attn {
        AttnSubVars::Softmax(_) => AttnKind::Softmax,
        AttnSubVars::Delta(_) => AttnKind::Delta,
    };
    for &i in &ids {
        let a = &vars.blocks[spec.s + i].inner.attn;
        let same = match (a, kind) {
            (AttnSubVars::Softmax(_), AttnKind::Softmax) => a.heads() == heads,
            (AttnSubVars::Delta(_), AttnKind::Delta) => a.heads() == heads,
            _ => false,
        };
        if !same {
            return Err(Error::Invalid {
                op: "stage",
                msg: "batched dispatch wants one mixing kind and head count across routed blocks"
                    .into(),
            });
        }
    }

    let mut hs = Vec::with_capacity(ids.len());
    let mut n1s = Vec::with_capacity(ids.len());
    for (bi, &i) in ids.iter().enumerate() {
        let blk = &vars.blocks[spec.s + i];
        let xi = g.gather_rows(x, &toklists[bi])?;
        let h = g.matmul(xi, blk.w_down)?;
        let n1 = g.rmsnorm(h, blk.inner.norm1, RMSNORM_EPS)?;
        hs.push(h);
        n1s.push(n1);
    }

    let attn_outs = match kind {
        AttnKind::Softmax => {
            batched_softmax_core(g, spec, vars, ctx, &ids, &toklists, &n1s, heads, cap)?
        }
        AttnKind::Delta => {
            batched_delta_core(g, spec, vars, ctx, &ids, &toklists, &n1s, heads, cap)?
        }
    };

    let mut acc: Option<Var> = None;
    for (bi, &i) in ids.iter().enumerate() {
        let blk = &vars.blocks[spec.s + i];
        let h1 = g.add(hs[bi], attn_outs[bi])?;
        let n2 = g.rmsnorm(h1, blk.inner.norm2, RMSNORM_EPS)?;
        let f = ffn_forward(g, n2, &blk.inner.ffn)?;
        let y = g.add(h1, f)?;
        let d = g.sub(y, hs[bi])?;
        let o = g.matmul(d, blk.w_up)?;
        let ci = g.col(probs, i)?;
        let w = g.gather_elems(ci, &toklists[bi])?;
        let weighted = g.scale_rows(o, w)?;
        let c = g.scatter_rows(weighted, &toklists[bi], t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, c)?,
            None => c,
        });
    }
    Ok(acc)
}

fn pad_rows<E: Real>(g: &mut Graph<E>, v: Var, cap: usize) -> Result<Var> {
    let rows = g.shape(v)[0];
    if rows == cap {
        return Ok(v);
    }
    let fill: Vec<usize> = (0..rows).collect();
    g.scatter_rows(v, &fill, cap)
}

/// Returns each block's attention output `[len_i, d_thin]` computed by a
/// single fused call over all `blocks * heads` groups.
#[allow(clippy::too_many_arguments)]
fn batched_softmax_core<E: Real>(
    g: &mut Graph<E>,
    spec: &StageSpec,
    vars: &StageVars,
    ctx: &SeqCtx<'_, E>,
    ids: &[usize],
    toklists: &[Vec<usize>],
    n1s: &[Var],
    heads: usize,
    cap: usize,
) -> Result<Vec<Var>> {
    let d = spec.d_thin;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut qs = Vec::with_capacity(ids.len());
    let mut ks = Vec::with_capacity(ids.len());
    let mut vs = Vec::with_capacity(ids.len());
    let mut lens = Vec::with_capacity(ids.len() * heads);
    for (bi, &i) in ids.iter().enumerate() {
        let a = match &vars.blocks[spec.s + i].inner.attn {
            AttnSubVars::Softmax(a) => *a,
            AttnSubVars::Delta(_) => unreachable!("checked by caller"),
        };
        let mut pos: Vec<usize> = toklists[bi].iter().map(|&r| ctx.positions[r]).collect();
        pos.resize(cap, 0);
        let q = g.matmul(n1s[bi], a.wq)?;
        let k = g.matmul(n1s[bi], a.wk)?;
        let v = g.matmul(n1s[bi], a.wv)?;
        let (q, k, v) = (pad_rows(g, q, cap)?, pad_rows(g, k, cap)?, pad_rows(g, v, cap)?);
        let qh = g.split_heads(q, heads)?;
        let kh = g.split_heads(k, heads)?;
        let vh = g.split_heads(v, heads)?;
        qs.push(g.rope(qh, ctx.rope, &pos)?);
        ks.push(g.rope(kh, ctx.rope, &pos)?);
        vs.push(vh);
        lens.extend(std::iter::repeat(toklists[bi].len()).take(heads));
    }
    let groups = ids.len() * heads;
    let qb = g.stack(&qs)?;
    let kb = g.stack(&ks)?;
    let vb = g.stack(&vs)?;
    let qb = g.reshape(qb, &[groups, cap, dh])?;
    let kb = g.reshape(kb, &[groups, cap, dh])?;
    let vb = g.reshape(vb, &[groups, cap, dh])?;
    let fused = g.causal_attention_lens(qb, kb, vb, scale, lens)?;

    let mut outs = Vec::with_capacity(ids.len());
    for (bi, &i) in ids.iter().enumerate() {
        let a = match &vars.blocks[spec.s + i].inner.attn {
            AttnSubVars::Softmax(a) => *a,
            AttnSubVars::Delta(_) => unreachable!("checked by caller"),
        };
        let rows: Vec<usize> = (bi * heads..(bi + 1) * heads).collect();
        let part = g.gather_rows(fused, &rows)?;
        let merged = g.merge_heads(part)?;
        let valid: Vec<usize> = (0..toklists[bi].len()).collect();
        let compact = g.gather_rows(merged, &valid)?;
        outs.push(g.matmul(compact, a.wo)?);
    }
    Ok(outs)
}

#[allow(clippy::too_many_arguments)]
fn batched_delta_core<E: Real>(
    g: &mut Graph<E>,
    spec: &StageSpec,
    vars: &StageVars,
    ctx: &SeqCtx<'_, E>,
    ids: &[usize],
    toklists: &[Vec<usize>],
    n1s: &[Var],
    heads: usize,
    cap: usize,
) -> Result<Vec<Var>> {
    let d = spec.d_thin;
    let dh = d / heads;
    let mut qs = Vec::with_capacity(ids.len());
    let mut ks = Vec::with_capacity(ids.len());
    let mut vs = Vec::with_capacity(ids.len());
    let mut betas = Vec::with_capacity(ids.len());
    let mut alphas = Vec::with_capacity(ids.len());
    for (bi, &i) in ids.iter().enumerate() {
        let dp = match &vars.blocks[spec.s + i].inner.attn {
            AttnSubVars::Delta(dp) => *dp,
            AttnSubVars::Softmax(_) => unreachable!("checked by caller"),
        };
        let mut pos: Vec<usize> = toklists[bi].iter().map(|&r| ctx.positions[r]).collect();
        pos.resize(cap, 0);
        let rope = ctx.delta_rope.then(|| (ctx.rope, pos.as_slice()));
        let (q, k, v, beta, alpha) = delta_features_padded(g, n1s[bi], &dp, cap, rope)?;
        qs.push(q);
        ks.push(k);
        vs.push(v);
        betas.push(beta);
        alphas.push(alpha);
    }
    let groups = ids.len() * heads;
    let qb = g.stack(&qs)?;
    let kb = g.stack(&ks)?;
    let vb = g.stack(&vs)?;
    let bb = g.stack(&betas)?;
    let ab = g.stack(&alphas)?;
    let qb = g.reshape(qb, &[groups, cap, dh])?;
    let kb = g.reshape(kb, &[groups, cap, dh])?;
    let vb = g.reshape(vb, &[groups, cap, dh])?;
    let bb = g.reshape(bb, &[groups, cap])?;
    let ab = g.reshape(ab, &[groups, cap])?;
    let (fused, _) = match ctx.delta_form {
        DeltaForm::Recurrent => g.delta_recurrent(qb, kb, vb, bb, ab)?,
        DeltaForm::Chunked(c) => g.delta_chunked(qb, kb, vb, bb, ab, c)?,
    };

    let mut outs = Vec::with_capacity(ids.len());
    for (bi, &i) in ids.iter().enumerate() {
        let dp = match &vars.blocks[spec.s + i].inner.attn {
            AttnSubVars::Delta(dp) => *dp,
            AttnSubVars::Softmax(_) => unreachable!("checked by caller"),
        };
        let rows: Vec<usize> = (bi * heads..(bi + 1) * heads).collect();
        let part = g.gather_rows(fused, &rows)?;
        let merged = g.merge_heads(part)?;
        let valid: Vec<usize> = (0..toklists[bi].len()).collect();
        let compact = g.gather_rows(merged, &valid)?;
        outs.push(g.matmul(compact, dp.wo)?);
    }
    Ok(outs)
}
