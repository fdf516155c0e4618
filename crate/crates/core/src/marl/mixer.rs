//! Team value mixers: plain summation (VDN) and the monotonic hypernetwork
//! mix (QMIX).
//!
//! QMIX generates per-sample mixing weights from the global state through
//! two-layer hypernetworks, takes their absolute value so every weight is
//! non-negative (hence dQ_total/dQ_i >= 0), applies an ELU between the two
//! mixing layers, and adds a state-conditioned bias from a two-layer value
//! head.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

use crate::nn::{Linear, ParamBinder, ParamSet};
use crate::rngs::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

#[derive(Debug, Clone)]
pub struct QmixMixer {
    pub hyper_w1_a: Linear,
    pub hyper_w1_b: Linear,
    pub hyper_w2_a: Linear,
    pub hyper_w2_b: Linear,
    pub hyper_b1: Linear,
    pub v_a: Linear,
    pub v_b: Linear,
    pub n_agents: usize,
    pub embed: usize,
    pub state_width: usize,
}

impl QmixMixer {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        n_agents: usize,
        state_width: usize,
        embed: usize,
        hypernet_embed: usize,
    ) -> Self {
        let mut lin = |name: &str, i: usize, o: usize| {
            Linear::new(ps, rng, &alloc::format!("mixer.{name}"), i, o)
        };
        QmixMixer {
            hyper_w1_a: lin("hyper_w1_a", state_width, hypernet_embed),
            hyper_w1_b: lin("hyper_w1_b", hypernet_embed, n_agents * embed),
            hyper_w2_a: lin("hyper_w2_a", state_width, hypernet_embed),
            hyper_w2_b: lin("hyper_w2_b", hypernet_embed, embed),
            hyper_b1: lin("hyper_b1", state_width, embed),
            v_a: lin("v_a", state_width, embed),
            v_b: lin("v_b", embed, 1),
            n_agents,
            embed,
            state_width,
        }
    }
}

/// Mixer output; `embed` is the post-ELU hidden layer (the critic embedding
/// distillation matches on), present for QMIX only.
pub struct MixOut {
    pub q_total: Var,
    pub embed: Option<Var>,
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Vdn,
    Qmix(QmixMixer),
}

impl Mixer {
    /// Mix per-agent chosen values [batch, n_agents] under the global state
    /// [batch, state_width] into Q_total [batch, 1].
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_, F>,
        qs: Var,
        state: Var,
    ) -> Result<MixOut> {
        match self {
            Mixer::Vdn => Ok(MixOut { q_total: tape.sum_rows(qs)?, embed: None }),
            Mixer::Qmix(m) => {
                let h1 = m.hyper_w1_a.forward(tape, binder, state)?;
                let h1 = tape.relu(h1);
                let w1 = m.hyper_w1_b.forward(tape, binder, h1)?;
                let w1 = tape.abs(w1);
                let b1 = m.hyper_b1.forward(tape, binder, state)?;
                let mixed = tape.batch_matvec(w1, qs, m.n_agents, m.embed)?;
                let mixed = tape.add(mixed, b1)?;
                let hidden = tape.elu(mixed);

                let h2 = m.hyper_w2_a.forward(tape, binder, state)?;
                let h2 = tape.relu(h2);
                let w2 = m.hyper_w2_b.forward(tape, binder, h2)?;
                let w2 = tape.abs(w2);
                let weighted = tape.mul(hidden, w2)?;
                let q = tape.sum_rows(weighted)?;

                let v = m.v_a.forward(tape, binder, state)?;
                let v = tape.relu(v);
                let v = m.v_b.forward(tape, binder, v)?;
                let q_total = tape.add(q, v)?;
                Ok(MixOut { q_total, embed: Some(hidden) })
            }
        }
    }
}

/// Numerically probe dQ_total/dQ_i over random (params, state, Q) draws via
/// central differences; returns the most negative derivative seen.
///
/// Monotonicity holds when the result is above a small negative tolerance.
pub fn qmix_monotonicity_min_derivative(n_draws: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let eps = 1e-4;
    for _ in 0..n_draws {
        let n_agents = rng.random_range(2..5usize);
        let state_width = rng.random_range(3..8usize);
        let mut ps = ParamSet::<f64>::new();
        let mixer = Mixer::Qmix(QmixMixer::new(&mut ps, &mut rng, n_agents, state_width, 8, 12));
        let state: Vec<f64> = (0..state_width).map(|_| rng.random_range(-2.0..2.0)).collect();
        let qs: Vec<f64> = (0..n_agents).map(|_| rng.random_range(-3.0..3.0)).collect();

        let eval = |qs: &[f64], ps: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(ps);
            let qv = tape.constant(Tensor::from_vec(&[1, n_agents], qs.to_vec()).unwrap());
            let sv = tape.constant(Tensor::from_vec(&[1, state_width], state.clone()).unwrap());
            let out = mixer.forward(&mut tape, &mut binder, qv, sv).unwrap();
            tape.data(out.q_total)[0]
        };

        for i in 0..n_agents {
            let mut up = qs.clone();
            up[i] += eps;
            let mut down = qs.clone();
            down[i] -= eps;
            let d = (eval(&up, &ps) - eval(&down, &ps)) / (2.0 * eps);
            worst = worst.min(d);
        }
    }
    worst
}
