//! Gated delta-rule attention.
//!
//! Each head keeps a `[d_head, d_head]` fast-weight state updated once per
//! token: `S_t = a_t * S_{t-1} (I - b_t k_t k_t^T) + b_t v_t k_t^T`, read as
//! `out_t = S_t q_t`. The write strength `b` is a sigmoid gate, the decay
//! `a` is `exp(-softplus(a_head) * sigmoid(x w_a))`, both in (0, 1), so the
//! state stays bounded no matter how long the sequence runs. Queries and
//! keys pass through a linear layer, SiLU, a width-4 depthwise causal conv,
//! and per-head L2 normalization; values skip the normalization.
//!
//! The same function is computed three ways: a sequential recurrence, a
//! chunk-parallel form used for prefill, and a single-token decode step.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::kernels::{self, RopeTable};
use crate::mac::{self, MacBreakdown};
use crate::tensor::{Error, Real, Result, Tensor};

pub const CONV_WIDTH: usize = 4;
pub const NORM_EPS: f64 = 1e-12;

/// Weights for one delta sublayer, linears stored `[d_in, d_out]`, conv
/// taps stored `[CONV_WIDTH, d]` with tap `j` reaching `j` tokens back.
#[derive(Clone)]
pub struct DeltaParams<E: Real> {
    pub heads: usize,
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub conv_q: Tensor<E>,
    pub conv_k: Tensor<E>,
    pub conv_v: Tensor<E>,
    pub bias_q: Tensor<E>,
    pub bias_k: Tensor<E>,
    pub bias_v: Tensor<E>,
    pub w_beta: Tensor<E>,
    pub w_alpha: Tensor<E>,
    pub a_head: Tensor<E>,
    pub wo: Tensor<E>,
}

impl<E: Real> DeltaParams<E> {
    pub fn zeros(d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible into {heads} heads");
        DeltaParams {
            heads,
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            conv_q: Tensor::zeros(&[CONV_WIDTH, d]),
            conv_k: Tensor::zeros(&[CONV_WIDTH, d]),
            conv_v: Tensor::zeros(&[CONV_WIDTH, d]),
            bias_q: Tensor::zeros(&[d]),
            bias_k: Tensor::zeros(&[d]),
            bias_v: Tensor::zeros(&[d]),
            w_beta: Tensor::zeros(&[d, heads]),
            w_alpha: Tensor::zeros(&[d, heads]),
            a_head: Tensor::zeros(&[heads]),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d() / self.heads
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> DeltaVars {
        DeltaVars {
            heads: self.heads,
            wq: g.leaf(self.wq.clone(), trainable),
            wk: g.leaf(self.wk.clone(), trainable),
            wv: g.leaf(self.wv.clone(), trainable),
            conv_q: g.leaf(self.conv_q.clone(), trainable),
            conv_k: g.leaf(self.conv_k.clone(), trainable),
            conv_v: g.leaf(self.conv_v.clone(), trainable),
            bias_q: g.leaf(self.bias_q.clone(), trainable),
            bias_k: g.leaf(self.bias_k.clone(), trainable),
            bias_v: g.leaf(self.bias_v.clone(), trainable),
            w_beta: g.leaf(self.w_beta.clone(), trainable),
            w_alpha: g.leaf(self.w_alpha.clone(), trainable),
            a_head: g.leaf(self.a_head.clone(), trainable),
            wo: g.leaf(self.wo.clone(), trainable),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.conv_q"), &self.conv_q);
        f(format!("{prefix}.conv_k"), &self.conv_k);
        f(format!("{prefix}.conv_v"), &self.conv_v);
        f(format!("{prefix}.bias_q"), &self.bias_q);
        f(format!("{prefix}.bias_k"), &self.bias_k);
        f(format!("{prefix}.bias_v"), &self.bias_v);
        f(format!("{prefix}.w_beta"), &self.w_beta);
        f(format!("{prefix}.w_alpha"), &self.w_alpha);
        f(format!("{prefix}.a_head"), &self.a_head);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.conv_q"), &mut self.conv_q);
        f(format!("{prefix}.conv_k"), &mut self.conv_k);
        f(format!("{prefix}.conv_v"), &mut self.conv_v);
        f(format!("{prefix}.bias_q"), &mut self.bias_q);
        f(format!("{prefix}.bias_k"), &mut self.bias_k);
        f(format!("{prefix}.bias_v"), &mut self.bias_v);
        f(format!("{prefix}.w_beta"), &mut self.w_beta);
        f(format!("{prefix}.w_alpha"), &mut self.w_alpha);
        f(format!("{prefix}.a_head"), &mut self.a_head);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Graph handles to one sublayer's weights.
#[derive(Clone, Copy)]
pub struct DeltaVars {
    pub heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub conv_q: Var,
    pub conv_k: Var,
    pub conv_v: Var,
    pub bias_q: Var,
    pub bias_k: Var,
    pub bias_v: Var,
    pub w_beta: Var,
    pub w_alpha: Var,
    pub a_head: Var,
    pub wo: Var,
}

/// Which evaluation order the recurrence uses; both compute the same thing.
#[derive(Clone, Copy, Debug)]
pub enum DeltaForm {
    Recurrent,
    Chunked(usize),
}

/// Per-token features from `x: [t, d]`: q and k `[h, t, dh]` unit-normed
/// per head row, v `[h, t, dh]`, write gate and decay `[h, t]`.
pub fn delta_features<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    p: &DeltaVars,
    rope: Option<(&Arc<RopeTable<E>>, &[usize])>,
) -> Result<(Var, Var, Var, Var, Var)> {
    let h = p.heads;
    let feat = |g: &mut Graph<E>, w, cw, cb| -> Result<Var> {
        let lin = g.matmul(x, w)?;
        let act = g.silu(lin);
        g.conv_causal(act, cw, cb)
    };
    let fq = feat(g, p.wq, p.conv_q, p.bias_q)?;
    let fk = feat(g, p.wk, p.conv_k, p.bias_k)?;
    let fv = feat(g, p.wv, p.conv_v, p.bias_v)?;
    let qh = g.split_heads(fq, h)?;
    let kh = g.split_heads(fk, h)?;
    let vh = g.split_heads(fv, h)?;
    let mut qn = g.l2norm_lastdim(qh, NORM_EPS)?;
    let mut kn = g.l2norm_lastdim(kh, NORM_EPS)?;
    if let Some((table, positions)) = rope {
        qn = g.rope(qn, table, positions)?;
        kn = g.rope(kn, table, positions)?;
    }

    let transpose_cols = |g: &mut Graph<E>, m: Var| -> Result<Var> {
        let cols: Result<Vec<Var>> = (0..h).map(|j| g.col(m, j)).collect();
        g.stack(&cols?)
    };
    let beta_lin = g.matmul(x, p.w_beta)?;
    let beta_sig = g.sigmoid(beta_lin);
    let beta = transpose_cols(g, beta_sig)?;

    let alpha_lin = g.matmul(x, p.w_alpha)?;
    let alpha_sig = g.sigmoid(alpha_lin);
    let rate = g.softplus(p.a_head);
    let scaled = g.mul_row_bcast(alpha_sig, rate)?;
    let neg = g.scale(scaled, -1.0);
    let alpha_rows = g.exp(neg);
    let alpha = transpose_cols(g, alpha_rows)?;

    Ok((qn, kn, vh, beta, alpha))
}

/// Like [`delta_features`] but pads the time axis from `t` to `cap` rows so
/// several subsequences can stack into one fused call. Padding rows carry
/// q = k = v = 0, write gate 0, and decay 1, so they pass recurrent state
/// through unchanged. `rope` positions, when given, must cover `cap` rows.
pub fn delta_features_padded<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    p: &DeltaVars,
    cap: usize,
    rope: Option<(&Arc<RopeTable<E>>, &[usize])>,
) -> Result<(Var, Var, Var, Var, Var)> {
    let t = g.shape(x)[0];
    if cap < t {
        return Err(Error::Invalid {
            op: "delta",
            msg: format!("pad target {cap} below {t} rows"),
        });
    }
    let h = p.heads;
    let fill: Vec<usize> = (0..t).collect();
    let pad = |g: &mut Graph<E>, v: Var| -> Result<Var> {
        if cap == t {
            return Ok(v);
        }
        g.scatter_rows(v, &fill, cap)
    };

    let feat = |g: &mut Graph<E>, w, cw, cb| -> Result<Var> {
        let lin = g.matmul(x, w)?;
        let act = g.silu(lin);
        g.conv_causal(act, cw, cb)
    };
    let fq = feat(g, p.wq, p.conv_q, p.bias_q)?;
    let fk = feat(g, p.wk, p.conv_k, p.bias_k)?;
    let fv = feat(g, p.wv, p.conv_v, p.bias_v)?;
    let (fq, fk, fv) = (pad(g, fq)?, pad(g, fk)?, pad(g, fv)?);
    let qh = g.split_heads(fq, h)?;
    let kh = g.split_heads(fk, h)?;
    let vh = g.split_heads(fv, h)?;
    let mut qn = g.l2norm_lastdim(qh, NORM_EPS)?;
    let mut kn = g.l2norm_lastdim(kh, NORM_EPS)?;
    if let Some((table, positions)) = rope {
        qn = g.rope(qn, table, positions)?;
        kn = g.rope(kn, table, positions)?;
    }

    let transpose_cols = |g: &mut Graph<E>, m: Var| -> Result<Var> {
        let cols: Result<Vec<Var>> = (0..h).map(|j| g.col(m, j)).collect();
        g.stack(&cols?)
    };
    let beta_lin = g.matmul(x, p.w_beta)?;
    let beta_sig = g.sigmoid(beta_lin);
    let beta_pad = pad(g, beta_sig)?;
    let beta = transpose_cols(g, beta_pad)?;

    let alpha_lin = g.matmul(x, p.w_alpha)?;
    let alpha_sig = g.sigmoid(alpha_lin);
    let rate = g.softplus(p.a_head);
    let scaled = g.mul_row_bcast(alpha_sig, rate)?;
    let neg = g.scale(scaled, -1.0);
    let alpha_rows = g.exp(neg);
    let alpha_pad = pad(g, alpha_rows)?;
    let alpha = if cap == t {
        transpose_cols(g, alpha_pad)?
    } else {
        let mut tail = vec![E::zero(); cap * h];
        for row in tail.chunks_exact_mut(h).skip(t) {
            row.fill(E::one());
        }
        let ones_on_pad = g.constant(Tensor::new(&[cap, h], tail)?);
        let fixed = g.add(alpha_pad, ones_on_pad)?;
        transpose_cols(g, fixed)?
    };

    Ok((qn, kn, vh, beta, alpha))
}

/// Full delta sublayer on `x: [t, d]`. Returns the output `[t, d]` and the
/// final per-head state `[h, dh, dh]` as a plain tensor.
pub fn delta_sublayer<E: Real>(
    g: &mut Graph<E>,
    x: Var,
    p: &DeltaVars,
    form: DeltaForm,
    rope: Option<(&Arc<RopeTable<E>>, &[usize])>,
) -> Result<(Var, Tensor<E>)> {
    let (q, k, v, beta, alpha) = delta_features(g, x, p, rope)?;
    let (o, final_state) = match form {
        DeltaForm::Recurrent => g.delta_recurrent(q, k, v, beta, alpha)?,
        DeltaForm::Chunked(c) => g.delta_chunked(q, k, v, beta, alpha, c)?,
    };
    let m = g.merge_heads(o)?;
    Ok((g.matmul(m, p.wo)?, final_state))
}

/// Recurrent state plus conv history for incremental decode.
pub struct DeltaState<E: Real> {
    heads: usize,
    d_head: usize,
    state: Vec<E>,
    ring: [Vec<E>; 3],
    count: usize,
}

impl<E: Real> DeltaState<E> {
    pub fn new(heads: usize, d_head: usize) -> Self {
        let d = heads * d_head;
        DeltaState {
            heads,
            d_head,
            state: vec![E::zero(); heads * d_head * d_head],
            ring: [
                vec![E::zero(); CONV_WIDTH * d],
                vec![E::zero(); CONV_WIDTH * d],
                vec![E::zero(); CONV_WIDTH * d],
            ],
            count: 0,
        }
    }

    pub fn context(&self) -> usize {
        self.count
    }

    pub fn state(&self) -> &[E] {
        &self.state
    }

    /// Process one token `x: [d]`, mirroring a prefill row exactly.
    pub fn decode_step(
        &mut self,
        p: &DeltaParams<E>,
        rope: Option<(&RopeTable<E>, usize)>,
        x: &[E],
        macs: &mut MacBreakdown,
    ) -> Vec<E> {
        let (h, dh) = (self.heads, self.d_head);
        let d = h * dh;
        assert_eq!(x.len(), d, "decode input width");
        assert_eq!(p.d(), d, "projection width");

        let slot = self.count % CONV_WIDTH;
        let reach = CONV_WIDTH.min(self.count + 1);
        let pipeline = |w: &Tensor<E>, cw: &Tensor<E>, cb: &Tensor<E>, ring: usize, st: &mut Self| -> Vec<E> {
            let mut lin = vec![E::zero(); d];
            kernels::matvec_t(w.data(), x, d, d, &mut lin);
            for v in lin.iter_mut() {
                *v = kernels::silu(*v);
            }
            st.ring[ring][slot * d..(slot + 1) * d].copy_from_slice(&lin);
            let mut out = cb.data().to_vec();
            for j in 0..reach {
                let src = (st.count + CONV_WIDTH - j) % CONV_WIDTH;
                let taps = &cw.data()[j * d..(j + 1) * d];
                let hist = &st.ring[ring][src * d..(src + 1) * d];
                for ((o, &wj), &xv) in out.iter_mut().zip(taps).zip(hist) {
                    *o += wj * xv;
                }
            }
            out
        };
        let mut q = pipeline(&p.wq, &p.conv_q, &p.bias_q, 0, self);
        let mut k = pipeline(&p.wk, &p.conv_k, &p.bias_k, 1, self);
        let v = pipeline(&p.wv, &p.conv_v, &p.bias_v, 2, self);
        macs.proj += 3 * mac::linear_macs(1, d, d);
        macs.conv += 3 * mac::conv_macs(1, d, CONV_WIDTH);

        let eps = E::from_f64(NORM_EPS);
        for hi in 0..h {
            for vec in [&mut q, &mut k] {
                let row = &mut vec[hi * dh..(hi + 1) * dh];
                let inv = E::one() / (kernels::dot(row, row) + eps).sqrt();
                for r in row.iter_mut() {
                    *r = *r * inv;
                }
            }
        }
        macs.norm += 2 * mac::norm_macs(1, d);
        if let Some((table, pos)) = rope {
            let positions = [pos];
            let mut qr = vec![E::zero(); d];
            let mut kr = vec![E::zero(); d];
            kernels::rope_apply(&q, table, &positions, h, 1, false, &mut qr);
            kernels::rope_apply(&k, table, &positions, h, 1, false, &mut kr);
            q = qr;
            k = kr;
        }

        let mut beta_lin = vec![E::zero(); h];
        let mut alpha_lin = vec![E::zero(); h];
        kernels::matvec_t(p.w_beta.data(), x, d, h, &mut beta_lin);
        kernels::matvec_t(p.w_alpha.data(), x, d, h, &mut alpha_lin);
        macs.proj += 2 * mac::linear_macs(1, d, h);

        let mut mixed = vec![E::zero(); d];
        for hi in 0..h {
            let beta = kernels::sigmoid(beta_lin[hi]);
            let alpha =
                (-(kernels::softplus(p.a_head.data()[hi]) * kernels::sigmoid(alpha_lin[hi]))).exp();
            let st = &mut self.state[hi * dh * dh..(hi + 1) * dh * dh];
            kernels::delta_step(
                st,
                &q[hi * dh..(hi + 1) * dh],
                &k[hi * dh..(hi + 1) * dh],
                &v[hi * dh..(hi + 1) * dh],
                beta,
                alpha,
                dh,
                &mut mixed[hi * dh..(hi + 1) * dh],
            );
        }
        macs.delta += mac::delta_step_macs(h, dh);
        self.count += 1;

        let mut out = vec![E::zero(); d];
        kernels::matvec_t(p.wo.data(), &mixed, d, d, &mut out);
        macs.proj += mac::linear_macs(1, d, d);
        out
    }
}
