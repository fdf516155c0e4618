//! Recurrent agent Q-network, shared across agents.

use crate::nn::{GruCell, Linear, ParamBinder, ParamSet};
use crate::rngs::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::Result;

/// fc + ReLU into a GRU cell into a linear action-value head. The hidden
/// state is threaded by the caller and reset at episode boundaries.
#[derive(Debug, Clone)]
pub struct AgentNet {
    pub fc1: Linear,
    pub gru: GruCell,
    pub fc2: Linear,
    pub hidden: usize,
    pub obs_width: usize,
    pub n_actions: usize,
}

impl AgentNet {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        obs_width: usize,
        n_actions: usize,
        hidden: usize,
    ) -> Self {
        let fc1 = Linear::new(ps, rng, "agent.fc1", obs_width, hidden);
        let gru = GruCell::new(ps, rng, "agent.gru", hidden, hidden);
        let fc2 = Linear::new(ps, rng, "agent.fc2", hidden, n_actions);
        AgentNet { fc1, gru, fc2, hidden, obs_width, n_actions }
    }

    /// One step: rows are (episode, agent) pairs. Returns action values and
    /// the next hidden state.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_, F>,
        obs: Var,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        if tape.value(obs).cols() != self.obs_width {
            return Err(crate::CoreError::Config(alloc::format!(
                "agent network wants observation width {}, got {}",
                self.obs_width,
                tape.value(obs).cols()
            )));
        }
        let x = self.fc1.forward(tape, binder, obs)?;
        let x = tape.relu(x);
        let h = self.gru.forward(tape, binder, x, hidden)?;
        let q = self.fc2.forward(tape, binder, h)?;
        Ok((q, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::{stream_rng, Stream};
    use crate::Tensor;
    use alloc::vec;

    #[test]
    fn zero_weights_give_zero_q_values() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = stream_rng(0, Stream::ParamInit, 0);
        let net = AgentNet::new(&mut ps, &mut rng, 4, 3, 8);
        for i in 0..ps.len() {
            for v in ps.get_mut(crate::nn::ParamId(i)).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&ps);
        let obs = tape.constant(Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap());
        let h = tape.constant(Tensor::zeros(&[2, 8]));
        let (q, _) = net.forward(&mut tape, &mut binder, obs, h).unwrap();
        assert!(tape.data(q).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_width() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = stream_rng(1, Stream::ParamInit, 0);
        let net = AgentNet::new(&mut ps, &mut rng, 4, 3, 8);
        let run = || {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(&ps);
            let obs = tape.constant(Tensor::from_vec(&[1, 4], vec![0.1, -0.2, 0.3, 0.7]).unwrap());
            let h = tape.constant(Tensor::zeros(&[1, 8]));
            let (q, _) = net.forward(&mut tape, &mut binder, obs, h).unwrap();
            tape.data(q).to_vec()
        };
        assert_eq!(run(), run());

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&ps);
        let obs = tape.constant(Tensor::zeros(&[1, 5]));
        let h = tape.constant(Tensor::zeros(&[1, 8]));
        assert!(net.forward(&mut tape, &mut binder, obs, h).is_err());
    }
}
