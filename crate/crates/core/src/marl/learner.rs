//! Batched TD and distillation losses over episodes.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{config_err, data_err};
use crate::marl::agent::AgentNet;
use crate::marl::mixer::Mixer;
use crate::marl::replay::EpisodeRecord;
use crate::nn::{mse, ParamBinder, ParamSet};
use crate::rngs::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Step-major training batch. Rows are (episode, agent) pairs ordered
/// episode-major, so row = b * n_agents + a.
pub struct Batch {
    pub n_episodes: usize,
    pub n_agents: usize,
    pub len: usize,
    pub n_actions: usize,
    /// Per step 0..=len: [rows, obs_width].
    pub obs: Vec<Tensor<f32>>,
    /// Per step 0..len: chosen action per row.
    pub actions: Vec<Vec<usize>>,
    /// Per step 0..=len: availability per row.
    pub avail: Vec<Vec<Vec<bool>>>,
    /// Per step 0..len: team reward per episode.
    pub rewards: Vec<Vec<f32>>,
    /// Per step 0..len: termination flag per episode.
    pub terminated: Vec<Vec<bool>>,
    /// Per step 0..=len: mixer state input [episodes, state_width]
    /// (delay-free when the critic is delay-reconciled, else delayed).
    pub states: Vec<Tensor<f32>>,
}

/// Assemble a batch; all episodes must share agent count and length.
pub fn build_batch(episodes: &[&EpisodeRecord], delay_reconciled: bool) -> Result<Batch> {
    let first = episodes.first().ok_or_else(|| config_err!("empty batch"))?;
    let (n_agents, len) = (first.n_agents, first.len);
    if episodes.iter().any(|e| e.n_agents != n_agents || e.len != len) {
        return Err(config_err!("episodes in a batch must share shape"));
    }
    let n_episodes = episodes.len();
    let rows = n_episodes * n_agents;
    let obs_width = first.actor_obs[0][0].len();
    let n_actions = first.avail[0][0].len();
    let state_width = first.state_delay_free(0).len();

    let mut obs = Vec::with_capacity(len + 1);
    let mut avail = Vec::with_capacity(len + 1);
    let mut states = Vec::with_capacity(len + 1);
    for t in 0..=len {
        let mut data = Vec::with_capacity(rows * obs_width);
        let mut av = Vec::with_capacity(rows);
        let mut st = Vec::with_capacity(n_episodes * state_width);
        for ep in episodes {
            for a in 0..n_agents {
                data.extend_from_slice(&ep.actor_obs[a][t]);
                av.push(ep.avail[a][t].clone());
            }
            st.extend(if delay_reconciled { ep.state_delay_free(t) } else { ep.state_delayed(t) });
        }
        obs.push(Tensor::from_vec(&[rows, obs_width], data)?);
        avail.push(av);
        states.push(Tensor::from_vec(&[n_episodes, state_width], st)?);
    }

    let mut actions = Vec::with_capacity(len);
    let mut rewards = Vec::with_capacity(len);
    let mut terminated = Vec::with_capacity(len);
    for t in 0..len {
        let mut acts = Vec::with_capacity(rows);
        let mut rs = Vec::with_capacity(n_episodes);
        let mut terms = Vec::with_capacity(n_episodes);
        for ep in episodes {
            for a in 0..n_agents {
                acts.push(ep.actions[a][t]);
            }
            rs.push(ep.rewards[t]);
            terms.push(ep.terminated[t]);
        }
        actions.push(acts);
        rewards.push(rs);
        terminated.push(terms);
    }

    Ok(Batch { n_episodes, n_agents, len, n_actions, obs, actions, avail, rewards, terminated, states })
}

/// Greedy action under an availability mask; ties go to the lowest index.
pub fn masked_argmax(q: &[f32], avail: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in q.iter().zip(avail).enumerate() {
        if !ok {
            continue;
        }
        if best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| data_err!("no available action"))
}

/// Epsilon-greedy selection per row of a [rows, n_actions] value table.
pub fn select_actions(
    q: &[f32],
    avail: &[Vec<bool>],
    n_actions: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(avail.len());
    for (row, av) in q.chunks_exact(n_actions).zip(avail) {
        if rng.random_range(0.0..1.0) < epsilon {
            let options: Vec<usize> =
                av.iter().enumerate().filter(|(_, &ok)| ok).map(|(i, _)| i).collect();
            if options.is_empty() {
                return Err(data_err!("no available action"));
            }
            out.push(options[rng.random_range(0..options.len())]);
        } else {
            out.push(masked_argmax(row, av)?);
        }
    }
    Ok(out)
}

/// Differentiable quantities the TD pass exposes for reuse by distillation.
pub struct TdOutputs {
    pub loss: Var,
    /// Per step 0..len: action values [rows, n_actions].
    pub q_steps: Vec<Var>,
    /// Per step 0..len: mixed team value [episodes, 1].
    pub qtot_steps: Vec<Var>,
    /// Per step 0..len: mixer hidden embedding (QMIX only).
    pub embed_steps: Vec<Var>,
    /// Per step: the scalar targets used.
    pub targets: Vec<Vec<f64>>,
}

/// Unroll the recurrent agent over the batch, returning per-step values.
fn unroll<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<'_, F>,
    agent: &AgentNet,
    batch: &Batch,
    steps: usize,
) -> Result<Vec<Var>> {
    let rows = batch.n_episodes * batch.n_agents;
    let mut hidden = tape.constant(Tensor::zeros(&[rows, agent.hidden]));
    let mut qs = Vec::with_capacity(steps);
    for t in 0..steps {
        let obs = tape.constant(batch.obs[t].cast::<F>());
        let (q, h) = agent.forward(tape, binder, obs, hidden)?;
        hidden = h;
        qs.push(q);
    }
    Ok(qs)
}

/// One-step TD loss with target networks:
/// mean over (episode, step) of (r + gamma * max_u' Q_total' - Q_total)^2.
/// Terminal steps drop the bootstrap term. The target-side max uses the
/// target agent values per agent, mixed by the target mixer.
#[allow(clippy::too_many_arguments)]
pub fn td_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<'_, F>,
    agent: &AgentNet,
    mixer: &Mixer,
    target_params: &ParamSet<F>,
    batch: &Batch,
    gamma: f64,
) -> Result<TdOutputs> {
    let rows = batch.n_episodes * batch.n_agents;
    let (b, n, len) = (batch.n_episodes, batch.n_agents, batch.len);

    // Target side: evaluated on its own tape, consumed as constants.
    let target_qtot: Vec<Vec<f64>> = {
        let mut ttape = Tape::<F>::new();
        let mut tbinder = ParamBinder::new(target_params);
        let tq = unroll(&mut ttape, &mut tbinder, agent, batch, len + 1)?;
        let mut per_step = Vec::with_capacity(len);
        for (t, &q) in tq.iter().enumerate().take(len + 1).skip(1) {
            let vals: Vec<f32> = ttape.data(q).iter().map(|v| v.as_f64() as f32).collect();
            let mut maxes = Vec::with_capacity(rows);
            for (row, av) in vals.chunks_exact(batch.n_actions).zip(&batch.avail[t]) {
                let idx = masked_argmax(row, av)?;
                maxes.push(F::from_f32(row[idx]));
            }
            let maxes = ttape.constant(Tensor::from_vec(&[b, n], maxes)?);
            let state = ttape.constant(batch.states[t].cast::<F>());
            let out = mixer.forward(&mut ttape, &mut tbinder, maxes, state)?;
            per_step.push(ttape.data(out.q_total).iter().map(|v| v.as_f64()).collect());
        }
        per_step
    };

    // Evaluation side: differentiable.
    let q_steps = unroll(tape, binder, agent, batch, len)?;
    let mut qtot_steps = Vec::with_capacity(len);
    let mut embed_steps = Vec::new();
    let mut targets = Vec::with_capacity(len);
    let mut loss_acc = tape.constant_scalar(F::zero());
    for t in 0..len {
        let chosen = tape.gather_col(q_steps[t], &batch.actions[t])?;
        let chosen = tape.reshape(chosen, &[b, n])?;
        let state = tape.constant(batch.states[t].cast::<F>());
        let out = mixer.forward(tape, binder, chosen, state)?;
        let qtot = out.q_total;

        let mut y = Vec::with_capacity(b);
        for e in 0..b {
            let bootstrap = if batch.terminated[t][e] {
                0.0
            } else {
                gamma * target_qtot[t][e]
            };
            y.push(batch.rewards[t][e] as f64 + bootstrap);
        }
        let yv: Vec<F> = y.iter().map(|&v| F::from_f64(v)).collect();
        let yv = tape.constant(Tensor::from_vec(&[b, 1], yv)?);
        let diff = tape.sub(qtot, yv)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        loss_acc = tape.add(loss_acc, s)?;

        qtot_steps.push(qtot);
        if let Some(embed) = out.embed {
            embed_steps.push(embed);
        }
        targets.push(y);
    }
    let loss = tape.scale(loss_acc, 1.0 / (b * len) as f64);
    Ok(TdOutputs { loss, q_steps, qtot_steps, embed_steps, targets })
}

/// Distillation loss (student side differentiable, teacher constant):
/// CE of student action values against the teacher's greedy actions, plus
/// beta1 * MSE of the team values and beta2 * MSE of the mixer embeddings
/// (zero for VDN, which has no critic parameters).
#[allow(clippy::too_many_arguments)]
pub fn kd_loss<F: Scalar>(
    tape: &mut Tape<F>,
    teacher_params: &ParamSet<F>,
    teacher_agent: &AgentNet,
    teacher_mixer: &Mixer,
    batch: &Batch,
    student: &TdOutputs,
    beta1: f64,
    beta2: f64,
) -> Result<Var> {
    let rows = batch.n_episodes * batch.n_agents;
    let (b, n, len) = (batch.n_episodes, batch.n_agents, batch.len);

    // Teacher pass on the same (compensated) observations, no gradients.
    let mut ttape = Tape::<F>::new();
    let mut tbinder = ParamBinder::new(teacher_params);
    let tq = unroll(&mut ttape, &mut tbinder, teacher_agent, batch, len)?;
    let mut teacher_actions: Vec<Vec<usize>> = Vec::with_capacity(len);
    let mut teacher_qtot: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut teacher_embed: Vec<Vec<f64>> = Vec::with_capacity(len);
    for t in 0..len {
        let vals: Vec<f32> = ttape.data(tq[t]).iter().map(|v| v.as_f64() as f32).collect();
        let mut greedy = Vec::with_capacity(rows);
        for (row, av) in vals.chunks_exact(batch.n_actions).zip(&batch.avail[t]) {
            greedy.push(masked_argmax(row, av)?);
        }
        // Teacher value of the episode's taken actions.
        let chosen = ttape.gather_col(tq[t], &batch.actions[t])?;
        let chosen = ttape.reshape(chosen, &[b, n])?;
        let state = ttape.constant(batch.states[t].cast::<F>());
        let out = teacher_mixer.forward(&mut ttape, &mut tbinder, chosen, state)?;
        teacher_qtot.push(ttape.data(out.q_total).iter().map(|v| v.as_f64()).collect());
        if let Some(embed) = out.embed {
            teacher_embed.push(ttape.data(embed).iter().map(|v| v.as_f64()).collect());
        }
        teacher_actions.push(greedy);
    }

    // Student side.
    let ce_norm = (rows * len) as f64;
    let mut loss = tape.constant_scalar(F::zero());
    for t in 0..len {
        let ce = tape.softmax_ce(
            student.q_steps[t],
            &teacher_actions[t],
            &vec![1.0; rows],
            ce_norm,
        )?;
        loss = tape.add(loss, ce)?;
    }
    if beta1 != 0.0 {
        let mut acc = tape.constant_scalar(F::zero());
        for t in 0..len {
            let tgt: Vec<F> = teacher_qtot[t].iter().map(|&v| F::from_f64(v)).collect();
            let tgt = tape.constant(Tensor::from_vec(&[b, 1], tgt)?);
            let m = mse(tape, student.qtot_steps[t], tgt, None)?;
            acc = tape.add(acc, m)?;
        }
        let acc = tape.scale(acc, beta1 / len as f64);
        loss = tape.add(loss, acc)?;
    }
    if beta2 != 0.0 && !student.embed_steps.is_empty() && !teacher_embed.is_empty() {
        let embed_w = teacher_embed[0].len() / b;
        let mut acc = tape.constant_scalar(F::zero());
        for t in 0..len {
            let tgt: Vec<F> = teacher_embed[t].iter().map(|&v| F::from_f64(v)).collect();
            let tgt = tape.constant(Tensor::from_vec(&[b, embed_w], tgt)?);
            let m = mse(tape, student.embed_steps[t], tgt, None)?;
            acc = tape.add(acc, m)?;
        }
        let acc = tape.scale(acc, beta2 / len as f64);
        loss = tape.add(loss, acc)?;
    }
    Ok(loss)
}

/// Loss blend of Eq-style schedules: alpha * rl + (1 - alpha) * kd.
pub fn combined_loss<F: Scalar>(
    tape: &mut Tape<F>,
    rl: Var,
    kd: Var,
    alpha: f64,
) -> Result<Var> {
    let a = tape.scale(rl, alpha);
    let b = tape.scale(kd, 1.0 - alpha);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::{stream_rng, Stream};

    #[test]
    fn masked_argmax_skips_unavailable_best() {
        let q = [5.0f32, 3.0, 4.0];
        assert_eq!(masked_argmax(&q, &[true, true, true]).unwrap(), 0);
        assert_eq!(masked_argmax(&q, &[false, true, true]).unwrap(), 2);
        assert!(masked_argmax(&q, &[false, false, false]).is_err());
    }

    #[test]
    fn epsilon_zero_is_greedy_and_ties_break_low() {
        let mut rng = stream_rng(0, Stream::Exploration, 0);
        let q = [1.0f32, 1.0, 0.0];
        let picked =
            select_actions(&q, &[vec![true, true, true]], 3, 0.0, &mut rng).unwrap();
        assert_eq!(picked, vec![0]);
    }

    #[test]
    fn epsilon_one_is_uniform_over_available() {
        let mut rng = stream_rng(1, Stream::Exploration, 0);
        let q = [0.0f32; 4];
        let avail = vec![vec![true, false, true, true]];
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let a = select_actions(&q, &avail, 4, 1.0, &mut rng).unwrap()[0];
            counts[a] += 1;
        }
        assert_eq!(counts[1], 0);
        for &i in &[0usize, 2, 3] {
            let freq = counts[i] as f64 / 10_000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "action {i} freq {freq}");
        }
    }

    #[test]
    fn combined_loss_endpoints_and_midpoint() {
        let mut tape = Tape::<f64>::new();
        let rl = tape.constant_scalar(2.0);
        let kd = tape.constant_scalar(4.0);
        let c0 = combined_loss(&mut tape, rl, kd, 1.0).unwrap();
        assert_eq!(tape.data(c0), &[2.0]);
        let c1 = combined_loss(&mut tape, rl, kd, 0.0).unwrap();
        assert_eq!(tape.data(c1), &[4.0]);
        let ch = combined_loss(&mut tape, rl, kd, 0.5).unwrap();
        assert_eq!(tape.data(ch), &[3.0]);
    }
}
