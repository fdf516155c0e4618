//! Reverse-mode autodiff on a linear tape.
//!
//! Operations are recorded in forward order into an arena of immutable
//! buffers, then replayed once in reverse to accumulate gradients. The op set
//! is exactly what recurrent Q-networks, GRU compensators and hypernetwork
//! mixers need; no broadcasting beyond that.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::config_err;
use crate::tensor::{Scalar, Tensor};
use crate::{CoreError, Result};

/// Handle to a buffer on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// out[r,c] = sum_i x[r,i] * w[i,c]
    Matmul { x: usize, w: usize, out: usize },
    /// out[r,c] = x[r,c] + b[c]
    AddBias { x: usize, b: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, k: f64, out: usize },
    /// out = 1 - x
    OneMinus { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Tanh { x: usize, out: usize },
    Relu { x: usize, out: usize },
    /// alpha = 1
    Elu { x: usize, out: usize },
    Abs { x: usize, out: usize },
    /// Full reduction to a scalar.
    Sum { x: usize, out: usize },
    /// out[r,0] = sum_c x[r,c]
    SumRows { x: usize, out: usize },
    /// out[r,0] = x[r, idx[r]]
    GatherCol { x: usize, idx: Vec<usize>, out: usize },
    /// out[r, cols[k]] = x[r,k]; all other columns zero.
    ScatterCols { x: usize, cols: Vec<usize>, out: usize },
    /// Per-row matrix-vector product: w rows hold [n,e] matrices,
    /// out[r,e] = sum_n x[r,n] * w[r, n*e_dim + e].
    BatchMatvec { w: usize, x: usize, n: usize, e: usize, out: usize },
    /// Same data, new shape.
    Reshape { x: usize, out: usize },
    /// out = sum_r sw[r] * nll(logits[r], target[r]) / norm  (0 if norm == 0)
    SoftmaxCe { logits: usize, targets: Vec<usize>, sample_w: Vec<f64>, norm: f64, out: usize },
}

struct Buf<F> {
    value: Tensor<F>,
    /// Gradients flow into this buffer (it is a parameter leaf or an op output).
    grad_tracked: bool,
}

/// A recording tape. One forward pass per tape; [`Tape::backward`] consumes it.
pub struct Tape<F> {
    bufs: Vec<Buf<F>>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<F>, grad_tracked: bool) -> Var {
        let id = self.bufs.len();
        self.bufs.push(Buf { value, grad_tracked });
        self.grads.push(None);
        Var(id)
    }

    /// Register a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor.clone(), tracked)
    }

    /// Register a constant leaf (no gradient).
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.push(tensor, false)
    }

    pub fn constant_scalar(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.bufs[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.bufs[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.bufs[v.0].value.shape()
    }

    fn tracked(&self, v: Var) -> bool {
        self.bufs[v.0].grad_tracked
    }

    // ── op recording ─────────────────────────────────────────────────

    fn unary_out(&mut self, x: Var, value: Tensor<F>, op: impl FnOnce(usize, usize) -> Op) -> Var {
        let tracked = self.tracked(x);
        let out = self.push(value, tracked);
        if tracked {
            let o = op(x.0, out.0);
            self.ops.push(o);
        }
        out
    }

    fn binary_out(
        &mut self,
        a: Var,
        b: Var,
        value: Tensor<F>,
        op: impl FnOnce(usize, usize, usize) -> Op,
    ) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        let out = self.push(value, tracked);
        if tracked {
            let o = op(a.0, b.0, out.0);
            self.ops.push(o);
        }
        out
    }

    /// out = x @ w, with x: [r, i] and w: [i, c].
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(config_err!("matmul shape mismatch: {xs:?} x {ws:?}"));
        }
        let (r, i, c) = (xs[0], xs[1], ws[1]);
        let mut out = vec![F::zero(); r * c];
        kernels::matmul(self.data(x), self.data(w), &mut out, r, i, c);
        let value = Tensor::from_vec(&[r, c], out)?;
        Ok(self.binary_out(x, w, value, |x, w, out| Op::Matmul { x, w, out }))
    }

    /// Broadcast-add a rank-1 bias over the rows of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(config_err!("add_bias shape mismatch: {xs:?} + {bs:?}"));
        }
        let cols = xs[1];
        let mut out = self.data(x).to_vec();
        let bd = self.data(b);
        for row in out.chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o = *o + bv;
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.binary_out(x, b, value, |x, b, out| Op::AddBias { x, b, out }))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: impl FnOnce(usize, usize, usize) -> Op,
        name: &str,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.binary_out(a, b, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out }, "mul")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kf = F::from_f64(k);
        let data = self.data(x).iter().map(|&v| v * kf).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        self.unary_out(x, value, |x, out| Op::Scale { x, k, out })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| F::one() - v).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        self.unary_out(x, value, |x, out| Op::OneMinus { x, out })
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(F) -> F, op: impl FnOnce(usize, usize) -> Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        self.unary_out(x, value, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| F::one() / (F::one() + (-v).exp()),
            |x, out| Op::Sigmoid { x, out },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.tanh(), |x, out| Op::Tanh { x, out })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(F::zero()), |x, out| Op::Relu { x, out })
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| if v > F::zero() { v } else { v.exp() - F::one() },
            |x, out| Op::Elu { x, out },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.abs(), |x, out| Op::Abs { x, out })
    }

    /// Reduce every element to one scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = kernels::sum(self.data(x));
        self.unary_out(x, Tensor::scalar(total), |x, out| Op::Sum { x, out })
    }

    /// Row-wise reduction of a rank-2 tensor to [rows, 1].
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(config_err!("sum_rows wants rank 2, got {xs:?}"));
        }
        let (r, c) = (xs[0], xs[1]);
        let data: Vec<F> = self.data(x).chunks_exact(c).map(kernels::sum).collect();
        let value = Tensor::from_vec(&[r, 1], data)?;
        Ok(self.unary_out(x, value, |x, out| Op::SumRows { x, out }))
    }

    /// Pick one column per row: out[r, 0] = x[r, idx[r]].
    pub fn gather_col(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || idx.len() != xs[0] {
            return Err(config_err!("gather_col wants rank 2 with one index per row"));
        }
        let c = xs[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(CoreError::Data(alloc::format!(
                "gather_col index {bad} out of range for {c} columns"
            )));
        }
        let data: Vec<F> =
            self.data(x).chunks_exact(c).zip(idx).map(|(row, &j)| row[j]).collect();
        let value = Tensor::from_vec(&[xs[0], 1], data)?;
        let idx = idx.to_vec();
        Ok(self.unary_out(x, value, |x, out| Op::GatherCol { x, idx, out }))
    }

    /// Spread the columns of x into a wider zero tensor at `cols`.
    pub fn scatter_cols(&mut self, x: Var, cols: &[usize], width: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != cols.len() {
            return Err(config_err!("scatter_cols wants rank 2 with one target per column"));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= width) {
            return Err(CoreError::Data(alloc::format!(
                "scatter_cols target {bad} out of range for width {width}"
            )));
        }
        let (r, k) = (xs[0], xs[1]);
        let mut data = vec![F::zero(); r * width];
        for (row_in, row_out) in self.data(x).chunks_exact(k).zip(data.chunks_exact_mut(width)) {
            for (&v, &j) in row_in.iter().zip(cols) {
                row_out[j] = v;
            }
        }
        let value = Tensor::from_vec(&[r, width], data)?;
        let cols = cols.to_vec();
        Ok(self.unary_out(x, value, |x, out| Op::ScatterCols { x, cols, out }))
    }

    /// Per-row matrix-vector product. `w` is [rows, n*e] (each row a row-major
    /// [n, e] matrix), `x` is [rows, n]; returns [rows, e].
    pub fn batch_matvec(&mut self, w: Var, x: Var, n: usize, e: usize) -> Result<Var> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 2 || ws[0] != xs[0] || ws[1] != n * e || xs[1] != n {
            return Err(config_err!(
                "batch_matvec shape mismatch: w {ws:?}, x {xs:?}, n={n}, e={e}"
            ));
        }
        let r = ws[0];
        let mut data = vec![F::zero(); r * e];
        for ((wrow, xrow), orow) in self
            .data(w)
            .chunks_exact(n * e)
            .zip(self.data(x).chunks_exact(n))
            .zip(data.chunks_exact_mut(e))
        {
            for (&xv, wmat) in xrow.iter().zip(wrow.chunks_exact(e)) {
                for (o, &wv) in orow.iter_mut().zip(wmat) {
                    *o = *o + xv * wv;
                }
            }
        }
        let value = Tensor::from_vec(&[r, e], data)?;
        Ok(self.binary_out(w, x, value, |w, x, out| Op::BatchMatvec { w, x, n, e, out }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::from_vec(shape, self.data(x).to_vec())?;
        Ok(self.unary_out(x, value, |x, out| Op::Reshape { x, out }))
    }

    /// Weighted softmax cross-entropy over rows of `logits`.
    ///
    /// loss = sum_r sample_w[r] * (-log softmax(logits[r])[targets[r]]) / norm.
    /// Callers fold class weights and masks into `sample_w`; `norm == 0`
    /// defines the loss as exactly zero.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        sample_w: &[f64],
        norm: f64,
    ) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || targets.len() != ls[0] || sample_w.len() != ls[0] {
            return Err(config_err!(
                "softmax_ce wants one target and weight per row: logits {ls:?}, {} targets",
                targets.len()
            ));
        }
        let c = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(CoreError::Data(alloc::format!(
                "softmax_ce target class {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0f64;
        if norm != 0.0 {
            for (row, (&t, &w)) in self.data(logits).chunks_exact(c).zip(targets.iter().zip(sample_w))
            {
                if w != 0.0 {
                    total += w * kernels::nll(row, t);
                }
            }
            total /= norm;
        }
        let value = Tensor::scalar(F::from_f64(total));
        let targets = targets.to_vec();
        let sample_w = sample_w.to_vec();
        Ok(self.unary_out(logits, value, |logits, out| Op::SoftmaxCe {
            logits,
            targets,
            sample_w,
            norm,
            out,
        }))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn grad_slice(&mut self, id: usize) -> &mut [F] {
        let numel = self.bufs[id].value.numel();
        self.grads[id].get_or_insert_with(|| vec![F::zero(); numel])
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's ability to run
    /// again; a second call without a fresh forward pass is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(CoreError::Usage(String::from(
                "backward called twice on the same tape; rebuild the forward pass first",
            )));
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(config_err!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for op_idx in (0..self.ops.len()).rev() {
            let op = self.ops[op_idx].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    /// Gradient of a buffer after [`Tape::backward`]; `None` if untracked or unreached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    fn backward_op(&mut self, op: &Op) {
        // Skip ops whose output never received gradient.
        let out_id = match op {
            Op::Matmul { out, .. }
            | Op::AddBias { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::OneMinus { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Tanh { out, .. }
            | Op::Relu { out, .. }
            | Op::Elu { out, .. }
            | Op::Abs { out, .. }
            | Op::Sum { out, .. }
            | Op::SumRows { out, .. }
            | Op::GatherCol { out, .. }
            | Op::ScatterCols { out, .. }
            | Op::BatchMatvec { out, .. }
            | Op::Reshape { out, .. }
            | Op::SoftmaxCe { out, .. } => *out,
        };
        let Some(dout) = self.grads[out_id].take() else { return };

        match op {
            Op::Matmul { x, w, out: _ } => {
                let (r, i) = {
                    let s = self.bufs[*x].value.shape();
                    (s[0], s[1])
                };
                let c = self.bufs[*w].value.shape()[1];
                if self.bufs[*x].grad_tracked {
                    let wdata: &Tensor<F> = &self.bufs[*w].value;
                    let mut dx = vec![F::zero(); r * i];
                    kernels::matmul_bt(&dout, wdata.data(), &mut dx, r, c, i);
                    kernels::axpy_into(self.grad_slice(*x), &dx);
                }
                if self.bufs[*w].grad_tracked {
                    let xdata = self.bufs[*x].value.data().to_vec();
                    let mut dw = vec![F::zero(); i * c];
                    kernels::matmul_at(&xdata, &dout, &mut dw, r, i, c);
                    kernels::axpy_into(self.grad_slice(*w), &dw);
                }
            }
            Op::AddBias { x, b, out: _ } => {
                let cols = self.bufs[*b].value.numel();
                if self.bufs[*x].grad_tracked {
                    kernels::axpy_into(self.grad_slice(*x), &dout);
                }
                if self.bufs[*b].grad_tracked {
                    let db = self.grad_slice(*b);
                    for row in dout.chunks_exact(cols) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Add { a, b, out: _ } => {
                if self.bufs[*a].grad_tracked {
                    kernels::axpy_into(self.grad_slice(*a), &dout);
                }
                if self.bufs[*b].grad_tracked {
                    kernels::axpy_into(self.grad_slice(*b), &dout);
                }
            }
            Op::Sub { a, b, out: _ } => {
                if self.bufs[*a].grad_tracked {
                    kernels::axpy_into(self.grad_slice(*a), &dout);
                }
                if self.bufs[*b].grad_tracked {
                    for (g, &d) in self.grad_slice(*b).iter_mut().zip(&dout) {
                        *g = *g - d;
                    }
                }
            }
            Op::Mul { a, b, out: _ } => {
                if self.bufs[*a].grad_tracked {
                    let bv = self.bufs[*b].value.data().to_vec();
                    for ((g, &d), &y) in self.grad_slice(*a).iter_mut().zip(&dout).zip(&bv) {
                        *g = *g + d * y;
                    }
                }
                if self.bufs[*b].grad_tracked {
                    let av = self.bufs[*a].value.data().to_vec();
                    for ((g, &d), &x) in self.grad_slice(*b).iter_mut().zip(&dout).zip(&av) {
                        *g = *g + d * x;
                    }
                }
            }
            Op::Scale { x, k, out: _ } => {
                let kf = F::from_f64(*k);
                for (g, &d) in self.grad_slice(*x).iter_mut().zip(&dout) {
                    *g = *g + d * kf;
                }
            }
            Op::OneMinus { x, out: _ } => {
                for (g, &d) in self.grad_slice(*x).iter_mut().zip(&dout) {
                    *g = *g - d;
                }
            }
            Op::Sigmoid { x, out } => {
                let ov = self.bufs[*out].value.data().to_vec();
                for ((g, &d), &o) in self.grad_slice(*x).iter_mut().zip(&dout).zip(&ov) {
                    *g = *g + d * o * (F::one() - o);
                }
            }
            Op::Tanh { x, out } => {
                let ov = self.bufs[*out].value.data().to_vec();
                for ((g, &d), &o) in self.grad_slice(*x).iter_mut().zip(&dout).zip(&ov) {
                    *g = *g + d * (F::one() - o * o);
                }
            }
            Op::Relu { x, out } => {
                let ov = self.bufs[*out].value.data().to_vec();
                for ((g, &d), &o) in self.grad_slice(*x).iter_mut().zip(&dout).zip(&ov) {
                    if o > F::zero() {
                        *g = *g + d;
                    }
                }
            }
            Op::Elu { x, out } => {
                let ov = self.bufs[*out].value.data().to_vec();
                for ((g, &d), &o) in self.grad_slice(*x).iter_mut().zip(&dout).zip(&ov) {
                    let slope = if o > F::zero() { F::one() } else { o + F::one() };
                    *g = *g + d * slope;
                }
            }
            Op::Abs { x, out: _ } => {
                let xv = self.bufs[*x].value.data().to_vec();
                for ((g, &d), &v) in self.grad_slice(*x).iter_mut().zip(&dout).zip(&xv) {
                    *g = *g + d * v.signum() * if v == F::zero() { F::zero() } else { F::one() };
                }
            }
            Op::Sum { x, out: _ } => {
                let d = dout[0];
                for g in self.grad_slice(*x).iter_mut() {
                    *g = *g + d;
                }
            }
            Op::SumRows { x, out: _ } => {
                let c = self.bufs[*x].value.shape()[1];
                for (row, &d) in self.grad_slice(*x).chunks_exact_mut(c).zip(&dout) {
                    for g in row {
                        *g = *g + d;
                    }
                }
            }
            Op::GatherCol { x, idx, out: _ } => {
                let c = self.bufs[*x].value.shape()[1];
                let dx = self.grad_slice(*x);
                for (r, (&j, &d)) in idx.iter().zip(&dout).enumerate() {
                    dx[r * c + j] = dx[r * c + j] + d;
                }
            }
            Op::ScatterCols { x, cols, out } => {
                let width = self.bufs[*out].value.shape()[1];
                let k = cols.len();
                let dx = self.grad_slice(*x);
                for (row, drow) in dx.chunks_exact_mut(k).zip(dout.chunks_exact(width)) {
                    for (g, &j) in row.iter_mut().zip(cols) {
                        *g = *g + drow[j];
                    }
                }
            }
            Op::BatchMatvec { w, x, n, e, out: _ } => {
                let (n, e) = (*n, *e);
                if self.bufs[*w].grad_tracked {
                    let xv = self.bufs[*x].value.data().to_vec();
                    let dw = self.grad_slice(*w);
                    for ((dwrow, xrow), drow) in
                        dw.chunks_exact_mut(n * e).zip(xv.chunks_exact(n)).zip(dout.chunks_exact(e))
                    {
                        for (&xv, dwmat) in xrow.iter().zip(dwrow.chunks_exact_mut(e)) {
                            for (g, &d) in dwmat.iter_mut().zip(drow) {
                                *g = *g + xv * d;
                            }
                        }
                    }
                }
                if self.bufs[*x].grad_tracked {
                    let wv = self.bufs[*w].value.data().to_vec();
                    let dx = self.grad_slice(*x);
                    for ((dxrow, wrow), drow) in
                        dx.chunks_exact_mut(n).zip(wv.chunks_exact(n * e)).zip(dout.chunks_exact(e))
                    {
                        for (g, wmat) in dxrow.iter_mut().zip(wrow.chunks_exact(e)) {
                            *g = *g + kernels::dot(wmat, drow);
                        }
                    }
                }
            }
            Op::Reshape { x, out: _ } => {
                kernels::axpy_into(self.grad_slice(*x), &dout);
            }
            Op::SoftmaxCe { logits, targets, sample_w, norm, out: _ } => {
                if *norm == 0.0 {
                    return;
                }
                let c = self.bufs[*logits].value.shape()[1];
                let d = dout[0].as_f64();
                let lv = self.bufs[*logits].value.data().to_vec();
                let dl = self.grad_slice(*logits);
                for ((row, drow), (&t, &w)) in lv
                    .chunks_exact(c)
                    .zip(dl.chunks_exact_mut(c))
                    .zip(targets.iter().zip(sample_w))
                {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = d * w / *norm;
                    let probs = kernels::softmax_f64(row);
                    for (j, (g, p)) in drow.iter_mut().zip(probs).enumerate() {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        *g = *g + F::from_f64(scale * (p - ind));
                    }
                }
            }
        }
    }
}

/// Hot numeric kernels, shared by forward and backward passes.
pub(crate) mod kernels {
    use super::Scalar;
    use alloc::vec::Vec;
    #[cfg(not(feature = "std"))]
    use num_traits::Float as _;

    /// out += x @ w  (x: [r,i], w: [i,c]); ikj order, rows stream through cache.
    pub fn matmul<F: Scalar>(x: &[F], w: &[F], out: &mut [F], r: usize, i_dim: usize, c: usize) {
        for row in 0..r {
            let xr = &x[row * i_dim..(row + 1) * i_dim];
            let or = &mut out[row * c..(row + 1) * c];
            for (i, &xv) in xr.iter().enumerate() {
                let wr = &w[i * c..(i + 1) * c];
                for (o, &wv) in or.iter_mut().zip(wr) {
                    *o = *o + xv * wv;
                }
            }
        }
    }

    /// out += a @ b^T  (a: [r,c], b: [i,c]) -> [r,i]; row dots.
    pub fn matmul_bt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], r: usize, c: usize, i_dim: usize) {
        for row in 0..r {
            let ar = &a[row * c..(row + 1) * c];
            let or = &mut out[row * i_dim..(row + 1) * i_dim];
            for (o, br) in or.iter_mut().zip(b.chunks_exact(c)) {
                *o = *o + dot(ar, br);
            }
        }
    }

    /// out += a^T @ b  (a: [r,i], b: [r,c]) -> [i,c].
    pub fn matmul_at<F: Scalar>(a: &[F], b: &[F], out: &mut [F], r: usize, i_dim: usize, c: usize) {
        for row in 0..r {
            let ar = &a[row * i_dim..(row + 1) * i_dim];
            let br = &b[row * c..(row + 1) * c];
            for (&av, orow) in ar.iter().zip(out.chunks_exact_mut(c)) {
                for (o, &bv) in orow.iter_mut().zip(br) {
                    *o = *o + av * bv;
                }
            }
        }
    }

    /// Dot product with 8 independent accumulators; fixed order, vectorizes.
    pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
        let mut acc = [F::zero(); 8];
        let chunks = a.len() / 8;
        for k in 0..chunks {
            let (ar, br) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
            for j in 0..8 {
                acc[j] = acc[j] + ar[j] * br[j];
            }
        }
        let mut tail = F::zero();
        for j in chunks * 8..a.len() {
            tail = tail + a[j] * b[j];
        }
        (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
    }

    pub fn sum<F: Scalar>(a: &[F]) -> F {
        let mut acc = [F::zero(); 8];
        let chunks = a.len() / 8;
        for k in 0..chunks {
            let ar = &a[k * 8..k * 8 + 8];
            for j in 0..8 {
                acc[j] = acc[j] + ar[j];
            }
        }
        let mut tail = F::zero();
        for &v in &a[chunks * 8..] {
            tail = tail + v;
        }
        (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
    }

    pub fn axpy_into<F: Scalar>(dst: &mut [F], src: &[F]) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d + s;
        }
    }

    /// -log softmax(row)[target], computed in f64 with max-shift.
    pub fn nll<F: Scalar>(row: &[F], target: usize) -> f64 {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let mut z = 0.0f64;
        for &v in row {
            z += (v.as_f64() - m).exp();
        }
        z.ln() - (row[target].as_f64() - m)
    }

    pub fn softmax_f64<F: Scalar>(row: &[F]) -> Vec<f64> {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let mut out: Vec<f64> = row.iter().map(|&v| (v.as_f64() - m).exp()).collect();
        let z: f64 = out.iter().sum();
        for p in &mut out {
            *p /= z;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t2([1, 2], &[1.0, 2.0]));
        let w = tape.constant(t2([2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.add_bias(y, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0]);

        let x0 = tape.constant(t2([1, 2], &[0.0, 0.0]));
        let w = tape.constant(t2([2, 2], &[0.3, -0.7, 2.0, 0.5]));
        let b = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(x0, w).unwrap();
        let y = tape.add_bias(y, b).unwrap();
        assert_eq!(tape.data(y), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2([1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t2([2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert!(matches!(tape.matmul(x, w), Err(CoreError::Config(_))));
    }

    #[test]
    fn softmax_ce_uniform_two_class_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t2([1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_ce(logits, &[0], &[1.0], 1.0).unwrap();
        assert!((tape.data(loss)[0] - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_confident_correct_is_tiny() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t2([1, 2], &[10.0, -10.0]));
        let loss = tape.softmax_ce(logits, &[0], &[1.0], 1.0).unwrap();
        assert!(tape.data(loss)[0] < 1e-4);
    }

    #[test]
    fn softmax_ce_bad_target_is_data_error() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t2([1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.softmax_ce(logits, &[2], &[1.0], 1.0),
            Err(CoreError::Data(_))
        ));
    }

    #[test]
    fn double_backward_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t2([1, 2], &[1.0, 2.0]).with_requires_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(CoreError::Usage(_))));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t2([2, 2], &[1.0, -2.0, 3.0, -4.0]).with_requires_grad());
        let before = tape.data(x).to_vec();
        let y = tape.tanh(x);
        let z = tape.abs(y);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.data(x), &before[..]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad());
        let g = tape.gather_col(x, &[2, 0]).unwrap();
        assert_eq!(tape.data(g), &[3.0, 4.0]);
        let sc = tape.scatter_cols(g, &[1], 4).unwrap();
        assert_eq!(tape.data(sc), &[0.0, 3.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        let s = tape.sum(sc);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
