//! Parameter storage and the small layer zoo: linear, GRU cell, masked MSE.
//!
//! Parameters live in a named [`ParamSet`] outside any tape; each forward
//! pass registers the ones it touches on a fresh [`Tape`] through a
//! [`ParamBinder`], and [`ParamBinder::backward`] collects gradients back
//! into a flat [`Grads`] aligned with the set.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand::Rng as _;

use crate::error::config_err;
use crate::rngs::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Names are stable and drive checkpoint manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Overwrite every tensor from `other` (a hard target-network update).
    pub fn copy_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        if self.names != other.names {
            return Err(config_err!("parameter sets have different layouts"));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor<F>>> {
        self.by_param.iter().map(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Sum elementwise with another gradient set of the same layout.
    pub fn accumulate(&mut self, other: &Grads<F>) {
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => {
                    for (a, &b) in d.data_mut().iter_mut().zip(s.data()) {
                        *a = *a + b;
                    }
                }
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }
}

/// Binds a [`ParamSet`] to one tape, registering each parameter at most once.
pub struct ParamBinder<'p, F> {
    pub params: &'p ParamSet<F>,
    vars: Vec<Option<Var>>,
}

impl<'p, F: Scalar> ParamBinder<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        ParamBinder { params, vars: vec![None; params.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape<F>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(self.params.get(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Run the reverse sweep and collect gradients for every bound parameter.
    pub fn backward(&self, tape: &mut Tape<F>, loss: Var) -> Result<Grads<F>> {
        tape.backward(loss)?;
        let by_param = self
            .vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| tape.grad(v)).map(|g| {
                    Tensor::from_vec(self.params.get(ParamId(i)).shape(), g.to_vec())
                        .expect("gradient is shape-congruent with its parameter")
                })
            })
            .collect();
        Ok(Grads { by_param })
    }
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, sampled in f64 for seed-stable
/// reproducibility across precisions.
pub fn uniform_init<F: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| F::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("numel matches shape")
}

/// A dense layer: y = x W + b.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.add(alloc::format!("{name}.w"), uniform_init(rng, &[in_dim, out_dim], in_dim));
        let b = ps.add(alloc::format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_, F>,
        x: Var,
    ) -> Result<Var> {
        let w = binder.var(tape, self.w);
        let b = binder.var(tape, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// GRU cell, gate convention:
///   r = sigmoid(x Wir + h Whr + br)
///   z = sigmoid(x Wiz + h Whz + bz)
///   n = tanh(x Win + bin + r * (h Whn + bhn))
///   h' = (1 - z) * n + z * h
/// so a saturated update gate (z -> 1) carries the hidden state through.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ir: ParamId,
    pub w_iz: ParamId,
    pub w_in: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_in: ParamId,
    pub b_hn: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let mut w = |suffix: &str, rows: usize| {
            ps.add(alloc::format!("{name}.{suffix}"), uniform_init(rng, &[rows, hidden], hidden))
        };
        let (w_ir, w_iz, w_in) = (w("w_ir", in_dim), w("w_iz", in_dim), w("w_in", in_dim));
        let (w_hr, w_hz, w_hn) = (w("w_hr", hidden), w("w_hz", hidden), w("w_hn", hidden));
        let mut b =
            |suffix: &str| ps.add(alloc::format!("{name}.{suffix}"), Tensor::zeros(&[hidden]));
        let (b_r, b_z, b_in, b_hn) = (b("b_r"), b("b_z"), b("b_in"), b("b_hn"));
        GruCell { w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_r, b_z, b_in, b_hn, hidden }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_, F>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let gate = |tape: &mut Tape<F>, binder: &mut ParamBinder<'_, F>, wi, wh, b| -> Result<Var> {
            let wi = binder.var(tape, wi);
            let wh = binder.var(tape, wh);
            let b = binder.var(tape, b);
            let xi = tape.matmul(x, wi)?;
            let hh = tape.matmul(h, wh)?;
            let s = tape.add(xi, hh)?;
            tape.add_bias(s, b)
        };
        let r_pre = gate(tape, binder, self.w_ir, self.w_hr, self.b_r)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = gate(tape, binder, self.w_iz, self.w_hz, self.b_z)?;
        let z = tape.sigmoid(z_pre);

        let w_in = binder.var(tape, self.w_in);
        let b_in = binder.var(tape, self.b_in);
        let w_hn = binder.var(tape, self.w_hn);
        let b_hn = binder.var(tape, self.b_hn);
        let xi = tape.matmul(x, w_in)?;
        let xi = tape.add_bias(xi, b_in)?;
        let hn = tape.matmul(h, w_hn)?;
        let hn = tape.add_bias(hn, b_hn)?;
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(xi, gated)?;
        let n = tape.tanh(n_pre);

        let keep = tape.mul(z, h)?;
        let zc = tape.one_minus(z);
        let update = tape.mul(zc, n)?;
        tape.add(update, keep)
    }
}

/// Mean squared error over unmasked elements; all-masked input is defined
/// as zero. `mask` entries are 0/1 multipliers with the same shape as `pred`.
pub fn mse<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    target: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let (diff, count) = match mask {
        Some(m) => {
            let masked = tape.mul(diff, m)?;
            let count = crate::tape::kernels::sum(tape.data(m)).as_f64();
            (masked, count)
        }
        None => {
            let count = tape.value(diff).numel() as f64;
            (diff, count)
        }
    };
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    if count == 0.0 {
        return Ok(tape.constant_scalar(F::zero()));
    }
    Ok(tape.scale(total, 1.0 / count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::{stream_rng, Stream};

    fn rng() -> Rng {
        stream_rng(11, Stream::ParamInit, 0)
    }

    #[test]
    fn gru_saturated_update_gate_carries_hidden_through() {
        let mut ps = ParamSet::<f64>::new();
        let gru = GruCell::new(&mut ps, &mut rng(), "gru", 3, 4);
        // Large positive update-gate bias saturates z to ~1.
        for v in ps.get_mut(gru.b_z).data_mut() {
            *v = 50.0;
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&ps);
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let h = tape.constant(Tensor::from_vec(&[1, 4], vec![0.5, -1.0, 0.25, 2.0]).unwrap());
        let h2 = gru.forward(&mut tape, &mut binder, x, h).unwrap();
        for (a, b) in tape.data(h2).iter().zip(tape.data(h)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gru_zero_hidden_and_zeroed_candidate_path_gives_zero() {
        let mut ps = ParamSet::<f64>::new();
        let gru = GruCell::new(&mut ps, &mut rng(), "gru", 3, 4);
        for v in ps.get_mut(gru.w_in).data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&ps);
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let h2 = gru.forward(&mut tape, &mut binder, x, h).unwrap();
        for &v in tape.data(h2) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap());
        let t = tape.constant(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        let l = mse(&mut tape, p, t, None).unwrap();
        assert_eq!(tape.data(l), &[4.0]);

        let same = mse(&mut tape, p, p, None).unwrap();
        assert_eq!(tape.data(same), &[0.0]);

        // All-masked input is defined as zero.
        let m = tape.constant(Tensor::zeros(&[1, 1]));
        let l = mse(&mut tape, p, t, Some(m)).unwrap();
        assert_eq!(tape.data(l), &[0.0]);
    }

    #[test]
    fn identical_init_for_identical_seeds() {
        let mut ps1 = ParamSet::<f32>::new();
        let mut ps2 = ParamSet::<f32>::new();
        let l1 = Linear::new(&mut ps1, &mut rng(), "l", 5, 7);
        let l2 = Linear::new(&mut ps2, &mut rng(), "l", 5, 7);
        assert_eq!(ps1.get(l1.w), ps2.get(l2.w));
    }
}
