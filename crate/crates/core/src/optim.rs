//! Adam with bias correction and optional global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use crate::nn::{Grads, ParamSet};
use crate::tensor::Scalar;

/// Adam state; moment buffers are allocated lazily to match the parameter set.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn ensure_state(&mut self, params: &ParamSet<F>) {
        if self.m.len() == params.len() {
            return;
        }
        self.m = (0..params.len())
            .map(|i| vec![F::zero(); params.get(crate::nn::ParamId(i)).numel()])
            .collect();
        self.v = self.m.clone();
    }

    /// Apply one update. Missing gradients are treated as zeros.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &Grads<F>) {
        self.ensure_state(params);
        self.step += 1;

        let clip_scale = match self.clip {
            Some(limit) if limit > 0.0 => {
                let mut sq = 0.0f64;
                for g in grads.iter().flatten() {
                    for &v in g.data() {
                        let v = v.as_f64();
                        sq += v * v;
                    }
                }
                let norm = sq.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let (ob1, ob2) = (F::from_f64(1.0 - self.beta1), F::from_f64(1.0 - self.beta2));
        let scale = F::from_f64(clip_scale);

        for i in 0..params.len() {
            let Some(g) = grads.get(crate::nn::ParamId(i)) else { continue };
            let p = params.get_mut(crate::nn::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                let gv = gv * scale;
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let mhat = mv.as_f64() / bc1;
                let vhat = vv.as_f64() / bc2;
                *pv = *pv - F::from_f64(self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamBinder, ParamSet};
    use crate::tape::Tape;
    use crate::Tensor;

    fn single_param(v: f64) -> (ParamSet<f64>, crate::nn::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::from_vec(&[1], alloc::vec![v]).unwrap());
        (ps, id)
    }

    fn grad_of(ps: &ParamSet<f64>, id: crate::nn::ParamId, g: f64) -> Grads<f64> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(ps);
        let p = binder.var(&mut tape, id);
        let scaled = tape.scale(p, g);
        let loss = tape.sum(scaled);
        binder.backward(&mut tape, loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged_and_counts_step() {
        let (mut ps, id) = single_param(0.7);
        let grads = grad_of(&ps, id, 0.0);
        let mut opt = Adam::new(1e-3, None);
        opt.step(&mut ps, &grads);
        assert_eq!(ps.get(id).data(), &[0.7]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        let (mut ps, id) = single_param(0.0);
        let grads = grad_of(&ps, id, 1.0);
        let mut opt = Adam::new(1e-3, None);
        opt.step(&mut ps, &grads);
        let delta = ps.get(id).data()[0].abs();
        assert!((delta - 1e-3).abs() < 1e-6, "first update {delta}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut ps, id) = single_param(0.3);
            let mut opt = Adam::new(1e-3, Some(10.0));
            for k in 0..50 {
                let grads = grad_of(&ps, id, (k as f64 * 0.37).sin());
                opt.step(&mut ps, &grads);
            }
            ps.get(id).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let (mut ps_a, id_a) = single_param(0.0);
        let (mut ps_b, id_b) = single_param(0.0);
        let big = grad_of(&ps_a, id_a, 1e6);
        let unit = grad_of(&ps_b, id_b, 1.0);
        let mut opt_a = Adam::new(1e-3, Some(1.0));
        let mut opt_b = Adam::new(1e-3, Some(1.0));
        opt_a.step(&mut ps_a, &big);
        opt_b.step(&mut ps_b, &unit);
        // After clipping to norm 1, both see the same effective gradient.
        assert_eq!(ps_a.get(id_a).data(), ps_b.get(id_b).data());
    }
}
