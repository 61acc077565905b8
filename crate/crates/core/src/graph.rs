//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a build-order tape: every operation appends a node holding
//! its forward value plus the information needed to push gradients back to
//! its inputs. `backward` walks the tape in reverse creation order (which is
//! already topological) and accumulates gradients additively, so calling it
//! twice doubles every gradient. Fused kernels (attention, delta rule,
//! norms) write their own backward rules instead of materializing
//! intermediate tensors.

use std::sync::Arc;

use crate::kernels::{self, RopeTable, Vis};
use crate::tensor::{Error, Real, Result, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Unary {
    Exp,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
}

#[derive(Clone, Debug)]
enum AttnVis {
    Full,
    Lens(Arc<Vec<usize>>),
    Subset(Arc<Vec<usize>>),
}

impl AttnVis {
    fn as_vis(&self) -> Vis<'_> {
        match self {
            AttnVis::Full => Vis::Full,
            AttnVis::Lens(l) => Vis::Lens(l),
            AttnVis::Subset(s) => Vis::Subset(s),
        }
    }
}

enum BackOp<E: Real> {
    None,
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, E),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        eps: E,
    },
    L2Norm {
        x: Var,
        eps: E,
    },
    RowNorm(Var),
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
    },
    Cv2(Var),
    SumAll(Var),
    SumAxis0(Var),
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScatterRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    GatherElems {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    MulMask {
        x: Var,
        mask: Tensor<E>,
    },
    Col {
        x: Var,
        j: usize,
    },
    MulRowBcast {
        x: Var,
        b: Var,
    },
    AddRowBcast {
        x: Var,
        b: Var,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    Transpose2(Var),
    SplitHeads {
        x: Var,
        h: usize,
    },
    MergeHeads {
        x: Var,
        h: usize,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable<E>>,
        positions: Arc<Vec<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: E,
        vis: AttnVis,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
    },
    DeltaSeq {
        q: Var,
        k: Var,
        v: Var,
        beta: Var,
        alpha: Var,
        states: Option<Arc<Vec<E>>>,
    },
    DeltaChunk {
        q: Var,
        k: Var,
        v: Var,
        beta: Var,
        alpha: Var,
        chunk: usize,
        boundaries: Option<Arc<Vec<E>>>,
    },
}

pub struct Graph<E: Real> {
    values: Vec<Tensor<E>>,
    needs: Vec<bool>,
    ops: Vec<BackOp<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, needs: bool, op: BackOp<E>) -> Var {
        self.values.push(value);
        self.needs.push(needs);
        self.ops.push(op);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, BackOp::None)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, BackOp::None)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    /// Total scalar count across every node held by the graph; a portable
    /// stand-in for peak live memory during a forward pass.
    pub fn live_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    // -- elementwise ------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Vec<E>, bool)> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((
            Vec::with_capacity(ta.len()),
            self.needs(a) || self.needs(b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, needs) = self.binary("add", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y));
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, needs, BackOp::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, needs) = self.binary("sub", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y));
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, needs, BackOp::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, needs) = self.binary("mul", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y));
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, needs, BackOp::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, needs) = self.binary("div", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| x / y));
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, needs, BackOp::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let tx = &self.values[x.0];
        let out: Vec<E> = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape(), out).unwrap();
        let needs = self.needs(x);
        self.push(t, needs, BackOp::Scale(x, c))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let tx = &self.values[x.0];
        let out: Vec<E> = tx
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Exp => v.exp(),
                Unary::Sigmoid => kernels::sigmoid(v),
                Unary::Silu => kernels::silu(v),
                Unary::Gelu => kernels::gelu(v),
                Unary::Softplus => kernels::softplus(v),
            })
            .collect();
        let t = Tensor::new(tx.shape(), out).unwrap();
        let needs = self.needs(x);
        self.push(t, needs, BackOp::Unary(kind, x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    // -- matmul -----------------------------------------------------------

    /// `a: [batch.., m, k] x b: [k, n]` or `[batch.., k, n]` -> `[batch.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![E::zero(); batch * m * n];
        kernels::mm_nn(ta.data(), tb.data(), batch, m, k, n, b_batched, &mut out);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, BackOp::MatMul { a, b, batch, m, k, n, b_batched }))
    }

    // -- reductions and norms ----------------------------------------------

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() == 0 {
            return Err(Error::Invalid {
                op: "softmax",
                msg: "needs at least one axis".into(),
            });
        }
        if !tx.all_finite() {
            return Err(Error::Invalid {
                op: "softmax",
                msg: "non-finite input".into(),
            });
        }
        let cols = *tx.shape().last().unwrap();
        let rows = tx.len() / cols;
        let mut out = vec![E::zero(); tx.len()];
        kernels::softmax_rows(tx.data(), rows, cols, &mut out);
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::Softmax(x)))
    }

    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (&self.values[x.0], &self.values[gamma.0]);
        let cols = *tx.shape().last().ok_or_else(|| Error::Invalid {
            op: "rmsnorm",
            msg: "rank-0 input".into(),
        })?;
        if tg.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.len() / cols;
        let mut out = vec![E::zero(); tx.len()];
        kernels::rmsnorm_rows(tx.data(), tg.data(), E::from_f64(eps), rows, cols, &mut out);
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(gamma);
        Ok(self.push(t, needs, BackOp::RmsNorm { x, gamma, eps: E::from_f64(eps) }))
    }

    pub fn l2norm_lastdim(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = &self.values[x.0];
        let cols = *tx.shape().last().ok_or_else(|| Error::Invalid {
            op: "l2norm",
            msg: "rank-0 input".into(),
        })?;
        let rows = tx.len() / cols;
        let mut out = vec![E::zero(); tx.len()];
        kernels::l2norm_rows(tx.data(), E::from_f64(eps), rows, cols, &mut out);
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::L2Norm { x, eps: E::from_f64(eps) }))
    }

    /// Row L2 magnitudes: `[n, d] -> [n]`.
    pub fn rownorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 2 {
            return Err(Error::Invalid {
                op: "rownorm",
                msg: format!("wants rank 2, got {:?}", tx.shape()),
            });
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let e = E::from_f64(eps);
        let out: Vec<E> = (0..n)
            .map(|i| (kernels::dot(&tx.data()[i * d..(i + 1) * d], &tx.data()[i * d..(i + 1) * d]) + e).sqrt())
            .collect();
        let t = Tensor::new(&[n], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::RowNorm(x)))
    }

    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.values[logits.0];
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Invalid {
                op: "cross_entropy",
                msg: format!(
                    "logits {:?} vs {} targets",
                    tl.shape(),
                    targets.len()
                ),
            });
        }
        let v = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Invalid {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for vocab {v}"),
            });
        }
        let loss = kernels::cross_entropy_rows(tl.data(), targets, v);
        let t = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(
            t,
            needs,
            BackOp::CrossEntropy { logits, targets: Arc::new(targets.to_vec()) },
        ))
    }

    /// Squared coefficient of variation of a rank-1 load vector.
    pub fn cv2(&mut self, load: Var) -> Result<Var> {
        let tl = &self.values[load.0];
        if tl.rank() != 1 || tl.is_empty() {
            return Err(Error::Invalid {
                op: "cv2",
                msg: format!("wants non-empty rank 1, got {:?}", tl.shape()),
            });
        }
        let t = Tensor::scalar(kernels::cv2(tl.data()));
        let needs = self.needs(load);
        Ok(self.push(t, needs, BackOp::Cv2(load)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let t = Tensor::scalar(tx.data().iter().copied().sum());
        let needs = self.needs(x);
        self.push(t, needs, BackOp::SumAll(x))
    }

    /// Column sums: `[n, m] -> [m]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 2 {
            return Err(Error::Invalid {
                op: "sum_axis0",
                msg: format!("wants rank 2, got {:?}", tx.shape()),
            });
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![E::zero(); m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&tx.data()[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        let t = Tensor::new(&[m], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::SumAxis0(x)))
    }

    // -- indexing ----------------------------------------------------------

    fn check_rows(&self, op: &'static str, x: Var, idx: &[usize]) -> Result<usize> {
        let tx = &self.values[x.0];
        if tx.rank() < 1 {
            return Err(Error::Invalid { op, msg: "rank-0 input".into() });
        }
        let n = tx.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid {
                op,
                msg: format!("index {bad} out of range for {n} rows"),
            });
        }
        Ok(tx.len() / n.max(1))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let row = self.check_rows("gather_rows", x, idx)?;
        let tx = &self.values[x.0];
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&tx.data()[i * row..(i + 1) * row]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::GatherRows { x, idx: Arc::new(idx.to_vec()) }))
    }

    /// Adds row `i` of `x` into row `idx[i]` of a zero tensor with `n_out`
    /// rows; duplicate targets accumulate.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() < 1 || tx.shape()[0] != idx.len() {
            return Err(Error::Invalid {
                op: "scatter_rows",
                msg: format!("{} rows vs {} indices", tx.shape().first().copied().unwrap_or(0), idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::Invalid {
                op: "scatter_rows",
                msg: format!("index {bad} out of range for {n_out} rows"),
            });
        }
        let row = if idx.is_empty() { 0 } else { tx.len() / idx.len() };
        let mut shape = tx.shape().to_vec();
        shape[0] = n_out;
        let mut out = vec![E::zero(); shape.iter().product()];
        for (i, &target) in idx.iter().enumerate() {
            let src = &tx.data()[i * row..(i + 1) * row];
            for (o, &s) in out[target * row..(target + 1) * row].iter_mut().zip(src) {
                *o += s;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::ScatterRows { x, idx: Arc::new(idx.to_vec()) }))
    }

    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 1 {
            return Err(Error::Invalid {
                op: "gather_elems",
                msg: format!("wants rank 1, got {:?}", tx.shape()),
            });
        }
        self.check_rows("gather_elems", x, idx)?;
        let tx = &self.values[x.0];
        let out: Vec<E> = idx.iter().map(|&i| tx.data()[i]).collect();
        let t = Tensor::new(&[idx.len()], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::GatherElems { x, idx: Arc::new(idx.to_vec()) }))
    }

    /// Multiply row `i` of `x: [n, d]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if tx.rank() != 2 || tw.shape() != [tx.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let wi = tw.data()[i];
            out.extend(tx.data()[i * d..(i + 1) * d].iter().map(|&v| v * wi));
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, needs, BackOp::ScaleRows { x, w }))
    }

    /// Elementwise multiply by a constant mask of the same shape.
    pub fn mul_mask(&mut self, x: Var, mask: &Tensor<E>) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_mask",
                lhs: tx.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let out: Vec<E> = tx.data().iter().zip(mask.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::MulMask { x, mask: mask.clone() }))
    }

    /// Column `j` of `x: [n, m]` as a rank-1 tensor.
    pub fn col(&mut self, x: Var, j: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 2 || j >= tx.shape()[1] {
            return Err(Error::Invalid {
                op: "col",
                msg: format!("column {j} of {:?}", tx.shape()),
            });
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let out: Vec<E> = (0..n).map(|i| tx.data()[i * m + j]).collect();
        let t = Tensor::new(&[n], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::Col { x, j }))
    }

    fn row_bcast_check(&self, op: &'static str, x: Var, b: Var) -> Result<(usize, usize)> {
        let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
        if tx.rank() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((tx.shape()[0], tx.shape()[1]))
    }

    /// `y[i, j] = x[i, j] * b[j]`.
    pub fn mul_row_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.row_bcast_check("mul_row_bcast", x, b)?;
        let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend(
                tx.data()[i * m..(i + 1) * m]
                    .iter()
                    .zip(tb.data())
                    .map(|(&v, &bb)| v * bb),
            );
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, needs, BackOp::MulRowBcast { x, b }))
    }

    /// `y[i, j] = x[i, j] + b[j]`.
    pub fn add_row_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.row_bcast_check("add_row_bcast", x, b)?;
        let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend(
                tx.data()[i * m..(i + 1) * m]
                    .iter()
                    .zip(tb.data())
                    .map(|(&v, &bb)| v + bb),
            );
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, needs, BackOp::AddRowBcast { x, b }))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Invalid { op: "stack", msg: "empty input list".into() });
        }
        let shape0 = self.values[xs[0].0].shape().to_vec();
        let mut out = Vec::with_capacity(self.values[xs[0].0].len() * xs.len());
        let mut needs = false;
        for &x in xs {
            let tx = &self.values[x.0];
            if tx.shape() != shape0 {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: shape0,
                    rhs: tx.shape().to_vec(),
                });
            }
            out.extend_from_slice(tx.data());
            needs |= self.needs(x);
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&shape0);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, needs, BackOp::Stack(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::Reshape(x)))
    }

    /// `[n, m] -> [m, n]`.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 2 {
            return Err(Error::Invalid {
                op: "transpose2",
                msg: format!("expects a rank-2 input, got {:?}", tx.shape()),
            });
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let xd = tx.data();
        let mut out = vec![E::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xd[i * m + j];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, BackOp::Transpose2(x)))
    }

    /// `[t, h*dh] -> [h, t, dh]`.
    pub fn split_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 2 || tx.shape()[1] % h != 0 {
            return Err(Error::Invalid {
                op: "split_heads",
                msg: format!("{:?} into {h} heads", tx.shape()),
            });
        }
        let (t, hd) = (tx.shape()[0], tx.shape()[1]);
        let dh = hd / h;
        let mut out = vec![E::zero(); t * hd];
        for hi in 0..h {
            for ti in 0..t {
                let src = &tx.data()[ti * hd + hi * dh..ti * hd + (hi + 1) * dh];
                out[(hi * t + ti) * dh..(hi * t + ti + 1) * dh].copy_from_slice(src);
            }
        }
        let tens = Tensor::new(&[h, t, dh], out)?;
        let needs = self.needs(x);
        Ok(self.push(tens, needs, BackOp::SplitHeads { x, h }))
    }

    /// `[h, t, dh] -> [t, h*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 3 {
            return Err(Error::Invalid {
                op: "merge_heads",
                msg: format!("wants rank 3, got {:?}", tx.shape()),
            });
        }
        let (h, t, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut out = vec![E::zero(); t * h * dh];
        for hi in 0..h {
            for ti in 0..t {
                let src = &tx.data()[(hi * t + ti) * dh..(hi * t + ti + 1) * dh];
                out[ti * h * dh + hi * dh..ti * h * dh + (hi + 1) * dh].copy_from_slice(src);
            }
        }
        let tens = Tensor::new(&[t, h * dh], out)?;
        let needs = self.needs(x);
        Ok(self.push(tens, needs, BackOp::MergeHeads { x, h }))
    }

    // -- position encoding and attention ------------------------------------

    /// Rotate `x: [g, t, dh]` with table rows chosen by `positions`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable<E>>, positions: &[usize]) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.rank() != 3 || tx.shape()[2] != table.d_head {
            return Err(Error::Invalid {
                op: "rope",
                msg: format!("input {:?} vs d_head {}", tx.shape(), table.d_head),
            });
        }
        let (g, t) = (tx.shape()[0], tx.shape()[1]);
        if positions.len() != t {
            return Err(Error::Invalid {
                op: "rope",
                msg: format!("{} positions for {t} rows", positions.len()),
            });
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= table.t_max) {
            return Err(Error::Invalid {
                op: "rope",
                msg: format!("position {bad} exceeds table length {}", table.t_max),
            });
        }
        let mut out = vec![E::zero(); tx.len()];
        kernels::rope_apply(tx.data(), table, positions, g, t, false, &mut out);
        let tens = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(
            tens,
            needs,
            BackOp::Rope { x, table: Arc::clone(table), positions: Arc::new(positions.to_vec()) },
        ))
    }

    fn attention_common(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        vis: AttnVis,
    ) -> Result<Var> {
        let (tq, tk, tv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        if tq.rank() != 3 || tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (g, t, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        match &vis {
            AttnVis::Lens(lens) => {
                if lens.len() != g || lens.iter().any(|&l| l > t) {
                    return Err(Error::Invalid {
                        op: "attention",
                        msg: "per-group lengths out of range".into(),
                    });
                }
            }
            AttnVis::Subset(sub) => {
                if sub.windows(2).any(|w| w[0] >= w[1]) || sub.last().is_some_and(|&s| s >= t) {
                    return Err(Error::Invalid {
                        op: "attention",
                        msg: "subset must be sorted, unique, in range".into(),
                    });
                }
            }
            AttnVis::Full => {}
        }
        let s = E::from_f64(scale);
        let mut out = vec![E::zero(); tq.len()];
        kernels::attention_forward(
            tq.data(),
            tk.data(),
            tv.data(),
            g,
            t,
            dh,
            s,
            &vis.as_vis(),
            &mut out,
        );
        let tens = Tensor::new(tq.shape(), out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(tens, needs, BackOp::Attention { q, k, v, scale: s, vis }))
    }

    /// Causal softmax attention over `[g, t, dh]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        self.attention_common(q, k, v, scale, AttnVis::Full)
    }

    /// Causal attention with a per-group valid length; padding rows output 0.
    pub fn causal_attention_lens(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        lens: Vec<usize>,
    ) -> Result<Var> {
        self.attention_common(q, k, v, scale, AttnVis::Lens(Arc::new(lens)))
    }

    /// Full-size masked restriction: rows in `subset` attend causally to
    /// subset members, everything else outputs zero.
    pub fn masked_causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        subset: &[usize],
    ) -> Result<Var> {
        self.attention_common(q, k, v, scale, AttnVis::Subset(Arc::new(subset.to_vec())))
    }

    /// Depthwise causal conv over `x: [t, ch]`, tap-major `w: [width, ch]`,
    /// bias `b: [ch]`.
    pub fn conv_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        if tx.rank() != 2 || tw.rank() != 2 || tw.shape()[1] != tx.shape()[1] || tb.shape() != [tx.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "conv_causal",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (t, ch) = (tx.shape()[0], tx.shape()[1]);
        let width = tw.shape()[0];
        let mut out = vec![E::zero(); t * ch];
        kernels::conv_causal(tx.data(), tw.data(), tb.data(), t, ch, width, &mut out);
        let tens = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(tens, needs, BackOp::Conv { x, w, b, width }))
    }

    // -- gated delta rule ----------------------------------------------------

    fn delta_check(&self, q: Var, k: Var, v: Var, beta: Var, alpha: Var) -> Result<(usize, usize, usize)> {
        let tq = &self.values[q.0];
        if tq.rank() != 3 {
            return Err(Error::Invalid {
                op: "delta",
                msg: format!("q wants rank 3, got {:?}", tq.shape()),
            });
        }
        let (g, t, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        for (name, var, want) in [
            ("k", k, vec![g, t, dh]),
            ("v", v, vec![g, t, dh]),
            ("beta", beta, vec![g, t]),
            ("alpha", alpha, vec![g, t]),
        ] {
            let tv = &self.values[var.0];
            if tv.shape() != want.as_slice() {
                return Err(Error::Invalid {
                    op: "delta",
                    msg: format!("{name} shape {:?}, want {:?}", tv.shape(), want),
                });
            }
        }
        Ok((g, t, dh))
    }

    /// Sequential gated delta rule; returns the per-step outputs and the
    /// final state `[g, dh, dh]` as a plain tensor (not differentiated).
    pub fn delta_recurrent(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        beta: Var,
        alpha: Var,
    ) -> Result<(Var, Tensor<E>)> {
        let (g, t, dh) = self.delta_check(q, k, v, beta, alpha)?;
        let needs = [q, k, v, beta, alpha].iter().any(|&x| self.needs(x));
        let res = kernels::delta_seq_forward(
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
            self.values[beta.0].data(),
            self.values[alpha.0].data(),
            None,
            g,
            t,
            dh,
            needs,
        );
        let out = Tensor::new(&[g, t, dh], res.out)?;
        let final_state = Tensor::new(&[g, dh, dh], res.final_state)?;
        let states = res.saved.map(Arc::new);
        let var = self.push(out, needs, BackOp::DeltaSeq { q, k, v, beta, alpha, states });
        Ok((var, final_state))
    }

    /// Chunk-parallel gated delta rule, same function as `delta_recurrent`.
    pub fn delta_chunked(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        beta: Var,
        alpha: Var,
        chunk: usize,
    ) -> Result<(Var, Tensor<E>)> {
        if chunk == 0 {
            return Err(Error::Invalid { op: "delta", msg: "chunk size 0".into() });
        }
        let (g, t, dh) = self.delta_check(q, k, v, beta, alpha)?;
        let needs = [q, k, v, beta, alpha].iter().any(|&x| self.needs(x));
        let res = kernels::delta_chunk_forward(
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
            self.values[beta.0].data(),
            self.values[alpha.0].data(),
            g,
            t,
            dh,
            chunk,
            needs,
        );
        let out = Tensor::new(&[g, t, dh], res.out)?;
        let final_state = Tensor::new(&[g, dh, dh], res.final_state)?;
        let boundaries = res.saved.map(Arc::new);
        let var = self.push(
            out,
            needs,
            BackOp::DeltaChunk { q, k, v, beta, alpha, chunk, boundaries },
        );
        Ok((var, final_state))
    }

    // -- backward ------------------------------------------------------------

    /// Accumulate gradients of a scalar `loss` into every reachable node
    /// that requires them. Additive across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            });
        }
        let n = self.values.len();
        let mut local: Vec<Option<Tensor<E>>> = vec![None; n];
        let seed_shape = self.values[loss.0].shape().to_vec();
        local[loss.0] = Some(Tensor::full(&seed_shape, E::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.needs[i] {
                continue;
            }
            self.propagate(i, &g, &mut local);
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accum(&self, local: &mut [Option<Tensor<E>>], v: Var, shape: &[usize], add: impl FnOnce(&mut [E])) {
        if !self.needs[v.0] {
            return;
        }
        let slot = &mut local[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        add(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor<E>, local: &mut [Option<Tensor<E>>]) {
        let gd = g.data();
        match &self.ops[i] {
            BackOp::None => {}
            BackOp::Unary(kind, x) => {
                let tx = &self.values[x.0];
                let y = &self.values[i];
                self.accum(local, *x, tx.shape(), |dx| {
                    for (((d, &gi), &xi), &yi) in
                        dx.iter_mut().zip(gd).zip(tx.data()).zip(y.data())
                    {
                        let der = match kind {
                            Unary::Exp => yi,
                            Unary::Sigmoid => yi * (E::one() - yi),
                            Unary::Silu => kernels::dsilu(xi),
                            Unary::Gelu => kernels::dgelu(xi),
                            Unary::Softplus => kernels::sigmoid(xi),
                        };
                        *d += gi * der;
                    }
                });
            }
            BackOp::Add(a, b) => {
                for v in [a, b] {
                    self.accum(local, *v, g.shape(), |dx| {
                        for (d, &gi) in dx.iter_mut().zip(gd) {
                            *d += gi;
                        }
                    });
                }
            }
            BackOp::Sub(a, b) => {
                self.accum(local, *a, g.shape(), |dx| {
                    for (d, &gi) in dx.iter_mut().zip(gd) {
                        *d += gi;
                    }
                });
                self.accum(local, *b, g.shape(), |dx| {
                    for (d, &gi) in dx.iter_mut().zip(gd) {
                        *d -= gi;
                    }
                });
            }
            BackOp::Mul(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                self.accum(local, *a, ta.shape(), |dx| {
                    for ((d, &gi), &bv) in dx.iter_mut().zip(gd).zip(tb.data()) {
                        *d += gi * bv;
                    }
                });
                self.accum(local, *b, tb.shape(), |dx| {
                    for ((d, &gi), &av) in dx.iter_mut().zip(gd).zip(ta.data()) {
                        *d += gi * av;
                    }
                });
            }
            BackOp::Div(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                self.accum(local, *a, ta.shape(), |dx| {
                    for ((d, &gi), &bv) in dx.iter_mut().zip(gd).zip(tb.data()) {
                        *d += gi / bv;
                    }
                });
                self.accum(local, *b, tb.shape(), |dx| {
                    for (((d, &gi), &av), &bv) in
                        dx.iter_mut().zip(gd).zip(ta.data()).zip(tb.data())
                    {
                        *d -= gi * av / (bv * bv);
                    }
                });
            }
            BackOp::Scale(x, c) => {
                self.accum(local, *x, g.shape(), |dx| {
                    for (d, &gi) in dx.iter_mut().zip(gd) {
                        *d += gi * *c;
                    }
                });
            }
            BackOp::MatMul { a, b, batch, m, k, n, b_batched } => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                if self.needs[a.0] {
                    let mut da = vec![E::zero(); ta.len()];
                    kernels::mm_nt(gd, tb.data(), *batch, *m, *n, *k, *b_batched, &mut da);
                    self.accum(local, *a, ta.shape(), |dx| {
                        for (d, &s) in dx.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                }
                if self.needs[b.0] {
                    let mut db = vec![E::zero(); tb.len()];
                    kernels::mm_tn(ta.data(), gd, *batch, *m, *k, *n, *b_batched, &mut db);
                    self.accum(local, *b, tb.shape(), |dx| {
                        for (d, &s) in dx.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }
            BackOp::Softmax(x) => {
                let p = &self.values[i];
                let cols = *p.shape().last().unwrap();
                let rows = p.len() / cols;
                let mut dx = vec![E::zero(); p.len()];
                kernels::softmax_rows_backward(p.data(), gd, rows, cols, &mut dx);
                self.accum(local, *x, p.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dx) {
                        *di += s;
                    }
                });
            }
            BackOp::RmsNorm { x, gamma, eps } => {
                let (tx, tg) = (&self.values[x.0], &self.values[gamma.0]);
                let cols = *tx.shape().last().unwrap();
                let rows = tx.len() / cols;
                let mut dx = vec![E::zero(); tx.len()];
                let mut dgamma = vec![E::zero(); cols];
                kernels::rmsnorm_rows_backward(
                    tx.data(),
                    tg.data(),
                    *eps,
                    gd,
                    rows,
                    cols,
                    &mut dx,
                    &mut dgamma,
                );
                self.accum(local, *x, tx.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dx) {
                        *di += s;
                    }
                });
                self.accum(local, *gamma, tg.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dgamma) {
                        *di += s;
                    }
                });
            }
            BackOp::L2Norm { x, eps } => {
                let tx = &self.values[x.0];
                let cols = *tx.shape().last().unwrap();
                let rows = tx.len() / cols;
                let mut dx = vec![E::zero(); tx.len()];
                kernels::l2norm_rows_backward(tx.data(), *eps, gd, rows, cols, &mut dx);
                self.accum(local, *x, tx.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dx) {
                        *di += s;
                    }
                });
            }
            BackOp::RowNorm(x) => {
                let tx = &self.values[x.0];
                let y = &self.values[i];
                let (n, dcols) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, tx.shape(), |d| {
                    for r in 0..n {
                        let scale = gd[r] / y.data()[r];
                        for c in 0..dcols {
                            d[r * dcols + c] += tx.data()[r * dcols + c] * scale;
                        }
                    }
                });
            }
            BackOp::CrossEntropy { logits, targets } => {
                let tl = &self.values[logits.0];
                let cols = tl.shape()[1];
                let mut dx = vec![E::zero(); tl.len()];
                kernels::cross_entropy_rows_backward(tl.data(), targets, cols, gd[0], &mut dx);
                self.accum(local, *logits, tl.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dx) {
                        *di += s;
                    }
                });
            }
            BackOp::Cv2(x) => {
                let tx = &self.values[x.0];
                let mut dx = vec![E::zero(); tx.len()];
                kernels::cv2_backward(tx.data(), gd[0], &mut dx);
                self.accum(local, *x, tx.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dx) {
                        *di += s;
                    }
                });
            }
            BackOp::SumAll(x) => {
                let tx = &self.values[x.0];
                self.accum(local, *x, tx.shape(), |d| {
                    for di in d.iter_mut() {
                        *di += gd[0];
                    }
                });
            }
            BackOp::SumAxis0(x) => {
                let tx = &self.values[x.0];
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, tx.shape(), |d| {
                    for r in 0..n {
                        for (di, &gi) in d[r * m..(r + 1) * m].iter_mut().zip(gd) {
                            *di += gi;
                        }
                    }
                });
            }
            BackOp::GatherRows { x, idx } => {
                let tx = &self.values[x.0];
                let row = tx.len() / tx.shape()[0];
                self.accum(local, *x, tx.shape(), |d| {
                    for (gi_row, &src) in idx.iter().enumerate() {
                        for (di, &gv) in d[src * row..(src + 1) * row]
                            .iter_mut()
                            .zip(&gd[gi_row * row..(gi_row + 1) * row])
                        {
                            *di += gv;
                        }
                    }
                });
            }
            BackOp::ScatterRows { x, idx } => {
                let tx = &self.values[x.0];
                let row = if idx.is_empty() { 0 } else { tx.len() / idx.len() };
                self.accum(local, *x, tx.shape(), |d| {
                    for (r, &target) in idx.iter().enumerate() {
                        for (di, &gv) in d[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(&gd[target * row..(target + 1) * row])
                        {
                            *di += gv;
                        }
                    }
                });
            }
            BackOp::GatherElems { x, idx } => {
                let tx = &self.values[x.0];
                self.accum(local, *x, tx.shape(), |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        d[src] += gd[r];
                    }
                });
            }
            BackOp::ScaleRows { x, w } => {
                let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
                let (n, dcols) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, tx.shape(), |d| {
                    for r in 0..n {
                        let wr = tw.data()[r];
                        for (di, &gv) in d[r * dcols..(r + 1) * dcols]
                            .iter_mut()
                            .zip(&gd[r * dcols..(r + 1) * dcols])
                        {
                            *di += gv * wr;
                        }
                    }
                });
                self.accum(local, *w, tw.shape(), |d| {
                    for (r, di) in d.iter_mut().enumerate() {
                        *di += kernels::dot(
                            &gd[r * dcols..(r + 1) * dcols],
                            &tx.data()[r * dcols..(r + 1) * dcols],
                        );
                    }
                });
            }
            BackOp::MulMask { x, mask } => {
                self.accum(local, *x, mask.shape(), |d| {
                    for ((di, &gi), &mi) in d.iter_mut().zip(gd).zip(mask.data()) {
                        *di += gi * mi;
                    }
                });
            }
            BackOp::Col { x, j } => {
                let tx = &self.values[x.0];
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, tx.shape(), |d| {
                    for r in 0..n {
                        d[r * m + j] += gd[r];
                    }
                });
            }
            BackOp::MulRowBcast { x, b } => {
                let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, tx.shape(), |d| {
                    for r in 0..n {
                        for ((di, &gi), &bv) in d[r * m..(r + 1) * m]
                            .iter_mut()
                            .zip(&gd[r * m..(r + 1) * m])
                            .zip(tb.data())
                        {
                            *di += gi * bv;
                        }
                    }
                });
                self.accum(local, *b, tb.shape(), |d| {
                    for r in 0..n {
                        for ((di, &gi), &xv) in d
                            .iter_mut()
                            .zip(&gd[r * m..(r + 1) * m])
                            .zip(&tx.data()[r * m..(r + 1) * m])
                        {
                            *di += gi * xv;
                        }
                    }
                });
            }
            BackOp::AddRowBcast { x, b } => {
                let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, tx.shape(), |d| {
                    for (di, &gi) in d.iter_mut().zip(gd) {
                        *di += gi;
                    }
                });
                self.accum(local, *b, tb.shape(), |d| {
                    for r in 0..n {
                        for (di, &gi) in d.iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                            *di += gi;
                        }
                    }
                });
            }
            BackOp::Stack(xs) => {
                let part = self.values[xs[0].0].len();
                for (r, &x) in xs.iter().enumerate() {
                    let tx = &self.values[x.0];
                    self.accum(local, x, tx.shape(), |d| {
                        for (di, &gi) in d.iter_mut().zip(&gd[r * part..(r + 1) * part]) {
                            *di += gi;
                        }
                    });
                }
            }
            BackOp::Transpose2(x) => {
                let tx = &self.values[x.0];
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                self.accum(local, *x, &[n, m], |d| {
                    for i in 0..n {
                        for j in 0..m {
                            d[i * m + j] += gd[j * n + i];
                        }
                    }
                });
            }
            BackOp::Reshape(x) => {
                let tx = &self.values[x.0];
                self.accum(local, *x, tx.shape(), |d| {
                    for (di, &gi) in d.iter_mut().zip(gd) {
                        *di += gi;
                    }
                });
            }
            BackOp::SplitHeads { x, h } => {
                let tx = &self.values[x.0];
                let (t, hd) = (tx.shape()[0], tx.shape()[1]);
                let dh = hd / h;
                self.accum(local, *x, tx.shape(), |d| {
                    for hi in 0..*h {
                        for ti in 0..t {
                            for c in 0..dh {
                                d[ti * hd + hi * dh + c] += gd[(hi * t + ti) * dh + c];
                            }
                        }
                    }
                });
            }
            BackOp::MergeHeads { x, h } => {
                let tx = &self.values[x.0];
                let (t, dh) = (tx.shape()[1], tx.shape()[2]);
                self.accum(local, *x, tx.shape(), |d| {
                    for hi in 0..*h {
                        for ti in 0..t {
                            for c in 0..dh {
                                d[(hi * t + ti) * dh + c] += gd[ti * h * dh + hi * dh + c];
                            }
                        }
                    }
                });
            }
            BackOp::Rope { x, table, positions } => {
                let tx = &self.values[x.0];
                let (gr, t) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![E::zero(); tx.len()];
                kernels::rope_apply(gd, table, positions, gr, t, true, &mut dx);
                self.accum(local, *x, tx.shape(), |d| {
                    for (di, &s) in d.iter_mut().zip(&dx) {
                        *di += s;
                    }
                });
            }
            BackOp::Attention { q, k, v, scale, vis } => {
                let (tq, tk, tv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
                let (gr, t, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                let mut dq = vec![E::zero(); tq.len()];
                let mut dk = vec![E::zero(); tk.len()];
                let mut dv = vec![E::zero(); tv.len()];
                kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    gd,
                    gr,
                    t,
                    dh,
                    *scale,
                    &vis.as_vis(),
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, src) in [(q, dq), (k, dk), (v, dv)] {
                    let shape = self.values[var.0].shape();
                    self.accum(local, *var, shape, |d| {
                        for (di, &s) in d.iter_mut().zip(&src) {
                            *di += s;
                        }
                    });
                }
            }
            BackOp::Conv { x, w, b, width } => {
                let (tx, tw, tb) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
                let (t, ch) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![E::zero(); tx.len()];
                let mut dw = vec![E::zero(); tw.len()];
                let mut db = vec![E::zero(); tb.len()];
                kernels::conv_causal_backward(
                    tx.data(),
                    tw.data(),
                    gd,
                    t,
                    ch,
                    *width,
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                for (var, src) in [(x, dx), (w, dw), (b, db)] {
                    let shape = self.values[var.0].shape();
                    self.accum(local, *var, shape, |d| {
                        for (di, &s) in d.iter_mut().zip(&src) {
                            *di += s;
                        }
                    });
                }
            }
            BackOp::DeltaSeq { q, k, v, beta, alpha, states } => {
                let (tq, _tk) = (&self.values[q.0], &self.values[k.0]);
                let (gr, t, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                let states = states.as_ref().expect("delta states recorded when grads needed");
                let grads = kernels::delta_seq_backward(
                    self.values[q.0].data(),
                    self.values[k.0].data(),
                    self.values[v.0].data(),
                    self.values[beta.0].data(),
                    self.values[alpha.0].data(),
                    states,
                    gd,
                    gr,
                    t,
                    dh,
                );
                self.delta_accum(local, (*q, *k, *v, *beta, *alpha), grads);
            }
            BackOp::DeltaChunk { q, k, v, beta, alpha, chunk, boundaries } => {
                let tq = &self.values[q.0];
                let (gr, t, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                let boundaries = boundaries.as_ref().expect("delta boundaries recorded when grads needed");
                let grads = kernels::delta_chunk_backward(
                    self.values[q.0].data(),
                    self.values[k.0].data(),
                    self.values[v.0].data(),
                    self.values[beta.0].data(),
                    self.values[alpha.0].data(),
                    boundaries,
                    gd,
                    gr,
                    t,
                    dh,
                    *chunk,
                );
                self.delta_accum(local, (*q, *k, *v, *beta, *alpha), grads);
            }
        }
    }

    fn delta_accum(
        &self,
        local: &mut [Option<Tensor<E>>],
        vars: (Var, Var, Var, Var, Var),
        grads: kernels::DeltaGrads<E>,
    ) {
        let (q, k, v, beta, alpha) = vars;
        for (var, src) in [
            (q, grads.dq),
            (k, grads.dk),
            (v, grads.dv),
            (beta, grads.dbeta),
            (alpha, grads.dalpha),
        ] {
            let shape = self.values[var.0].shape();
            self.accum(local, var, shape, |d| {
                for (di, &s) in d.iter_mut().zip(&src) {
                    *di += s;
                }
            });
        }
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking (64-bit only)

/// Max relative error between analytic and central-difference gradients,
/// `|a - n| / (|a| + |n| + 1e-12)`, over up to `max_coords` coordinates per
/// input tensor (deterministically strided when an input is larger).
pub fn gradcheck_multi<F>(
    build: F,
    points: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::<f64>::new();
    let vars: Vec<Var> = points.iter().map(|p| graph.leaf(p.clone(), true)).collect();
    let loss = build(&mut graph, &vars).expect("gradcheck forward failed");
    graph.backward(loss).expect("gradcheck backward failed");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |pts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let loss = build(&mut g, &vars).expect("gradcheck eval failed");
        g.value(loss).item()
    };

    let mut worst = 0.0f64;
    for ti in 0..points.len() {
        let len = points[ti].len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            let stride = len / max_coords;
            (0..max_coords).map(|c| c * stride).collect()
        };
        for c in coords {
            let mut plus = points.to_vec();
            plus[ti].data_mut()[c] += eps;
            let mut minus = points.to_vec();
            minus[ti].data_mut()[c] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[ti].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Single-input convenience wrapper over [`gradcheck_multi`].
pub fn gradcheck<F>(build: F, point: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_multi(
        |g, vars| build(g, vars[0]),
        std::slice::from_ref(point),
        eps,
        usize::MAX,
    )
}
