//! Token-to-block routing.
//!
//! The router scores every routed block with a linear layer, softmaxes over
//! all candidates, and keeps the top `k` by weight (ties broken toward the
//! lower block id, which keeps dispatch deterministic across runs). The
//! kept weights are used as-is, not renormalized, so a token that spreads
//! mass over many blocks contributes less to each. Per-block load is the
//! full softmax mass summed over tokens, and its squared coefficient of
//! variation is the balance penalty added to the training loss.

use crate::graph::{Graph, Var};
use crate::tensor::{Real, Result, Tensor};

pub const SE_HIDDEN: usize = 4;

/// Which blocks each token picked, in descending-weight order.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<E: Real> {
    pub n_blocks: usize,
    pub k: usize,
    /// `[t, k]` block ids, row-major.
    pub picks: Vec<usize>,
    /// `[t, k]` softmax weights matching `picks`.
    pub weights: Vec<E>,
}

impl<E: Real> RoutingDecision<E> {
    pub fn tokens(&self) -> usize {
        if self.k == 0 { 0 } else { self.picks.len() / self.k }
    }

    /// Tokens routed to `block`, ascending.
    pub fn tokens_for(&self, block: usize) -> Vec<usize> {
        (0..self.tokens())
            .filter(|&t| self.picks[t * self.k..(t + 1) * self.k].contains(&block))
            .collect()
    }

    /// The weight token `t` assigned to `block`, if it picked it.
    pub fn weight_of(&self, t: usize, block: usize) -> Option<E> {
        self.picks[t * self.k..(t + 1) * self.k]
            .iter()
            .position(|&b| b == block)
            .map(|i| self.weights[t * self.k + i])
    }
}

/// Pick the top `k` blocks per token from full softmax weights `[t, n]`.
pub fn route_topk<E: Real>(weights: &Tensor<E>, k: usize) -> RoutingDecision<E> {
    assert_eq!(weights.rank(), 2, "routing weights must be [tokens, blocks]");
    let (t, n) = (weights.shape()[0], weights.shape()[1]);
    assert!(k <= n, "top-{k} of {n} blocks");
    let mut picks = Vec::with_capacity(t * k);
    let mut kept = Vec::with_capacity(t * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for ti in 0..t {
        let row = &weights.data()[ti * n..(ti + 1) * n];
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("routing weight is NaN").then(a.cmp(&b))
        });
        for &b in &order[..k] {
            picks.push(b);
            kept.push(row[b]);
        }
    }
    RoutingDecision { n_blocks: n, k, picks, weights: kept }
}

/// Squeeze-excitation gate over per-block output magnitudes: a `k -> 4 -> k`
/// MLP with SiLU hidden and sigmoid output, biases included.
#[derive(Clone)]
pub struct SeParams<E: Real> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

impl<E: Real> SeParams<E> {
    pub fn zeros(k: usize) -> Self {
        SeParams {
            w1: Tensor::zeros(&[k, SE_HIDDEN]),
            b1: Tensor::zeros(&[SE_HIDDEN]),
            w2: Tensor::zeros(&[SE_HIDDEN, k]),
            b2: Tensor::zeros(&[k]),
        }
    }

    pub fn k(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> SeVars {
        SeVars {
            w1: g.leaf(self.w1.clone(), trainable),
            b1: g.leaf(self.b1.clone(), trainable),
            w2: g.leaf(self.w2.clone(), trainable),
            b2: g.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

#[derive(Clone, Copy)]
pub struct SeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn se_param_count(k: usize) -> usize {
    k * SE_HIDDEN + SE_HIDDEN + SE_HIDDEN * k + k
}

/// Gates `[t, k]` in (0, 1) from per-block magnitudes `[t, k]`.
pub fn se_gate<E: Real>(g: &mut Graph<E>, mags: Var, p: &SeVars) -> Result<Var> {
    let h = g.matmul(mags, p.w1)?;
    let hb = g.add_row_bcast(h, p.b1)?;
    let ha = g.silu(hb);
    let o = g.matmul(ha, p.w2)?;
    let ob = g.add_row_bcast(o, p.b2)?;
    Ok(g.sigmoid(ob))
}
