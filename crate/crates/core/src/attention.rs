//! Multi-head causal softmax attention with rotary positions.
//!
//! One [`RopeTable`] is shared across every attention sublayer of a model,
//! and positions are always the token's index in the original sequence, so
//! a block that sees a routed subset of tokens rotates them exactly as the
//! full sequence would. Prefill goes through the autodiff graph; decode
//! appends to a [`KvCache`] and works on plain slices.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::kernels::{self, RopeTable};
use crate::mac::{self, MacBreakdown};
use crate::tensor::{Error, Real, Result, Tensor};

pub const ROPE_BASE: f64 = 10000.0;

pub fn rope_table<E: Real>(d_head: usize, t_max: usize) -> Arc<RopeTable<E>> {
    Arc::new(RopeTable::new(d_head, t_max, ROPE_BASE))
}

/// Projection weights for one attention sublayer, stored `[d_in, d_out]`.
#[derive(Clone)]
pub struct AttnParams<E: Real> {
    pub heads: usize,
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
}

impl<E: Real> AttnParams<E> {
    pub fn zeros(d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible into {heads} heads");
        AttnParams {
            heads,
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d() / self.heads
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> AttnVars {
        AttnVars {
            heads: self.heads,
            wq: g.leaf(self.wq.clone(), trainable),
            wk: g.leaf(self.wk.clone(), trainable),
            wv: g.leaf(self.wv.clone(), trainable),
            wo: g.leaf(self.wo.clone(), trainable),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Graph handles to one sublayer's projections.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Which query rows attend, and to which keys.
#[derive(Clone, Copy)]
pub enum Visibility<'a> {
    /// Every row attends causally over all earlier rows.
    Full,
    /// Only the listed rows participate; they attend causally within the
    /// list and every other output row is exactly zero.
    Subset(&'a [usize]),
}

/// Full attention sublayer on `x: [t, d]`: project, split heads, rotate
/// queries and keys at `positions`, attend causally, merge, project out.
pub fn attention_sublayer<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    p: &AttnVars,
    rope: &Arc<RopeTable<E>>,
    positions: &[usize],
    vis: Visibility<'_>,
) -> Result<Var> {
    let d = g
        .shape(x)
        .last()
        .copied()
        .ok_or_else(|| Error::Invalid { op: "attention", msg: "rank-0 input".into() })?;
    if d % p.heads != 0 {
        return Err(Error::Invalid {
            op: "attention",
            msg: format!("width {d} not divisible into {} heads", p.heads),
        });
    }
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    let qh = g.split_heads(q, p.heads)?;
    let kh = g.split_heads(k, p.heads)?;
    let vh = g.split_heads(v, p.heads)?;
    let qr = g.rope(qh, rope, positions)?;
    let kr = g.rope(kh, rope, positions)?;
    let o = match vis {
        Visibility::Full => g.causal_attention(qr, kr, vh, scale)?,
        Visibility::Subset(sub) => g.masked_causal_attention(qr, kr, vh, scale, sub)?,
    };
    let m = g.merge_heads(o)?;
    g.matmul(m, p.wo)
}

/// Grown-per-token key/value store for incremental decode.
pub struct KvCache<E: Real> {
    heads: usize,
    d_head: usize,
    k: Vec<E>,
    v: Vec<E>,
    len: usize,
}

impl<E: Real> KvCache<E> {
    pub fn new(heads: usize, d_head: usize) -> Self {
        KvCache { heads, d_head, k: Vec::new(), v: Vec::new(), len: 0 }
    }

    /// Number of cached positions (including the one just pushed).
    pub fn context(&self) -> usize {
        self.len
    }

    /// Process one token `x: [d]` at original position `pos`: project,
    /// rotate, append to the cache, attend over everything cached.
    pub fn decode_step(
        &mut self,
        p: &AttnParams<E>,
        rope: &RopeTable<E>,
        x: &[E],
        pos: usize,
        macs: &mut MacBreakdown,
    ) -> Vec<E> {
        let (h, dh) = (self.heads, self.d_head);
        let d = h * dh;
        assert_eq!(x.len(), d, "decode input width");
        assert_eq!(p.d(), d, "projection width");
        let mut q = vec![E::zero(); d];
        let mut k = vec![E::zero(); d];
        let mut v = vec![E::zero(); d];
        kernels::matvec_t(p.wq.data(), x, d, d, &mut q);
        kernels::matvec_t(p.wk.data(), x, d, d, &mut k);
        kernels::matvec_t(p.wv.data(), x, d, d, &mut v);
        macs.proj += 3 * mac::linear_macs(1, d, d);
        let pos_slice = [pos];
        let mut qr = vec![E::zero(); d];
        let mut kr = vec![E::zero(); d];
        kernels::rope_apply(&q, rope, &pos_slice, h, 1, false, &mut qr);
        kernels::rope_apply(&k, rope, &pos_slice, h, 1, false, &mut kr);
        self.k.extend_from_slice(&kr);
        self.v.extend_from_slice(&v);
        self.len += 1;

        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut mixed = vec![E::zero(); d];
        let mut scores = vec![E::zero(); self.len];
        let mut probs = vec![E::zero(); self.len];
        for hi in 0..h {
            let qh = &qr[hi * dh..(hi + 1) * dh];
            for t in 0..self.len {
                let kh = &self.k[t * d + hi * dh..t * d + (hi + 1) * dh];
                scores[t] = kernels::dot(qh, kh) * scale;
            }
            kernels::softmax_row(&scores, &mut probs);
            let out = &mut mixed[hi * dh..(hi + 1) * dh];
            for t in 0..self.len {
                let vh = &self.v[t * d + hi * dh..t * d + (hi + 1) * dh];
                kernels::axpy(out, probs[t], vh);
            }
        }
        macs.attn += mac::attn_decode_macs(h, dh, self.len);

        let mut out = vec![E::zero(); d];
        kernels::matvec_t(p.wo.data(), &mixed, d, d, &mut out);
        macs.proj += mac::linear_macs(1, d, d);
        out
    }
}
