//! The online training loop: episode collection through the delay filter
//! and compensator, replay, TD + distillation updates, curriculum mixing,
//! target updates, periodic evaluation, and the greedy evaluator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

use crate::compensator::{
    batch_inputs, build_input, echo_loss, echo_rollout, flash_heads, flash_loss,
    make_flash_targets, make_targets, CompLayout, Compensator, CompensatorInput, CompensatorNet,
    Feedback, SampleView,
};
use crate::config::{
    delay_setting_label, Algo, CompensatorMode, EnvConfig, EnvName, LinearSchedule, TrainConfig,
};
use crate::delay::{
    delayed_joint_observation, sample_delay_vector, DelaySpec, DelayTopology, DelayVector,
    HistoryBuffer, ObservationSchema,
};
use crate::error::config_err;
use crate::marl::agent::AgentNet;
use crate::marl::learner::{
    build_batch, combined_loss, kd_loss, select_actions, td_loss,
};
use crate::marl::mixer::{Mixer, QmixMixer};
use crate::marl::replay::{EpisodeRecord, ReplayBuffer};
use crate::metrics::{MetricsRow, Phase};
use crate::nn::{ParamBinder, ParamSet};
use crate::optim::Adam;
use crate::rngs::{derive_seed, stream_rng, Rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{env::Env, env::GridSpreadEnv, env::GridTagEnv, env::GridWorld, Result};

/// Receives metrics rows, periodic checkpoints, and optional delay traces.
pub trait TrainSink {
    fn metrics(&mut self, row: &MetricsRow);
    fn checkpoint(&mut self, env_steps: u64, bundle: &PolicyBundle) {
        let _ = (env_steps, bundle);
    }
    fn delay_trace(&mut self, t: u32, d: &DelayVector, lookups: &[Vec<u32>]) {
        let _ = (t, d, lookups);
    }
}

/// Swallows everything (tests and teacher pre-training).
pub struct NullSink;

impl TrainSink for NullSink {
    fn metrics(&mut self, _row: &MetricsRow) {}
}

pub fn build_env(cfg: &EnvConfig) -> Result<Env> {
    cfg.validate()?;
    Ok(match cfg.name {
        EnvName::GridSpread => Env::Spread(GridSpreadEnv::new(cfg.grid, cfg.n_agents, cfg.time_limit)),
        EnvName::GridTag => Env::Tag(GridTagEnv::new(cfg.grid, cfg.n_agents, cfg.time_limit)),
    })
}

/// Everything needed to act, evaluate, and checkpoint a policy.
#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub config: TrainConfig,
    pub agent: AgentNet,
    pub mixer: Mixer,
    pub comp: Option<Compensator>,
    /// Agent network plus mixer parameters.
    pub rl_params: ParamSet<f32>,
    /// Compensator parameters (empty for mode `none`).
    pub comp_params: ParamSet<f32>,
    pub schemas: Vec<ObservationSchema>,
    pub topology: DelayTopology,
    pub obs_width: usize,
    pub state_width: usize,
    pub n_agents: usize,
    pub n_actions: usize,
}

impl PolicyBundle {
    /// Build networks deterministically from the config seed. The parameter
    /// layout depends only on the config, which is what lets checkpoints be
    /// restored by name.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env = build_env(&cfg.env)?;
        let schemas = env.schemas();
        let obs_width = schemas[0].width();
        if schemas.iter().any(|s| s.width() != obs_width) {
            return Err(config_err!("agent observation widths differ"));
        }
        let topology = DelayTopology::from_schemas(&schemas)?;
        let n_agents = env.n_agents();
        let n_actions = env.n_actions();
        let state_width = obs_width * n_agents;

        let mut rng = stream_rng(cfg.train.seed, Stream::ParamInit, 0);
        let mut rl_params = ParamSet::new();
        let agent =
            AgentNet::new(&mut rl_params, &mut rng, obs_width, n_actions, cfg.algo.agent_hidden_dim);
        let mixer = match cfg.algo.name {
            Algo::Vdn => Mixer::Vdn,
            Algo::Qmix => Mixer::Qmix(QmixMixer::new(
                &mut rl_params,
                &mut rng,
                n_agents,
                state_width,
                cfg.algo.mixing_embed_dim,
                cfg.algo.hypernet_embed,
            )),
        };

        let mut comp_params = ParamSet::new();
        let comp = match cfg.compensator.mode {
            CompensatorMode::None => None,
            mode => {
                let layouts: Result<Vec<CompLayout>> =
                    schemas.iter().map(|s| CompLayout::new(s, n_actions)).collect();
                let layouts = layouts?;
                let net = CompensatorNet::new(
                    &mut comp_params,
                    &mut rng,
                    "comp",
                    &layouts[0],
                    cfg.compensator.hidden_dim,
                );
                Some(Compensator {
                    mode,
                    net,
                    layouts,
                    t_model: cfg.delay.max_delay,
                    history_len: cfg.history_length(),
                    ce_weight: cfg.compensator.ce_weight,
                })
            }
        };

        Ok(PolicyBundle {
            config: cfg.clone(),
            agent,
            mixer,
            comp,
            rl_params,
            comp_params,
            schemas,
            topology,
            obs_width,
            state_width,
            n_agents,
            n_actions,
        })
    }

    /// Actor inputs for step `t` of an in-progress episode: delay-free when
    /// the curriculum says so, otherwise the compensated (or raw delayed)
    /// observations.
    fn actor_inputs(&self, record: &EpisodeRecord, t: usize, use_delay_free: bool) -> Result<Vec<Vec<f32>>> {
        if use_delay_free {
            return Ok((0..self.n_agents).map(|a| record.delay_free[a][t].flatten()).collect());
        }
        match &self.comp {
            None => Ok((0..self.n_agents).map(|a| record.delayed[a][t].flatten()).collect()),
            Some(c) => {
                let views: Vec<SampleView<'_>> =
                    (0..self.n_agents).map(|a| record.view(a, t)).collect();
                c.reconstruct(&self.comp_params, &views)
            }
        }
    }

    /// One batched greedy/exploratory action step over all agents.
    fn act(
        &self,
        actor_obs: &[Vec<f32>],
        hidden: &Tensor<f32>,
        avail: &[Vec<bool>],
        epsilon: f64,
        rng: &mut Rng,
    ) -> Result<(Vec<usize>, Tensor<f32>)> {
        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new(&self.rl_params);
        let flat: Vec<f32> = actor_obs.iter().flatten().copied().collect();
        let obs = tape.constant(Tensor::from_vec(&[self.n_agents, self.obs_width], flat)?);
        let h = tape.constant(hidden.clone());
        let (q, h2) = self.agent.forward(&mut tape, &mut binder, obs, h)?;
        let actions = select_actions(tape.data(q), avail, self.n_actions, epsilon, rng)?;
        let hidden = tape.value(h2).clone();
        Ok((actions, hidden))
    }
}

/// Structural compatibility for teacher loading: same environment and
/// network dimensions, so the student can evaluate the teacher's nets.
pub fn check_teacher_compatible(student: &TrainConfig, teacher: &TrainConfig) -> Result<()> {
    if student.env != teacher.env {
        return Err(config_err!("teacher was trained on a different environment"));
    }
    if student.algo != teacher.algo {
        return Err(config_err!("teacher algo block differs from the student's"));
    }
    Ok(())
}

/// Per-episode curriculum draw: with probability `p_cl` the actor consumes
/// delay-free observations for the whole episode.
pub fn curriculum_use_delay_free(p_cl: f64, rng: &mut Rng) -> bool {
    p_cl > 0.0 && rng.random_range(0.0..1.0) < p_cl
}

/// Knobs for one episode of interaction.
pub struct CollectSettings<'a> {
    pub delay: &'a DelaySpec,
    pub epsilon: f64,
    pub use_delay_free: bool,
    pub env_seed: u64,
    pub delay_seed: u64,
    pub explore_seed: u64,
}

pub struct CollectOutcome {
    pub record: EpisodeRecord,
    pub ret: f64,
    /// Steps with positive reward (pursuit contact steps).
    pub contact_steps: u32,
}

/// Roll one episode through the delay filter and the policy.
pub fn collect_episode<S: TrainSink>(
    env: &mut Env,
    bundle: &PolicyBundle,
    settings: &CollectSettings<'_>,
    sink: Option<&mut S>,
) -> Result<CollectOutcome> {
    let mut rng_delay = Rng::seed_from_u64(settings.delay_seed);
    let mut rng_explore = Rng::seed_from_u64(settings.explore_seed);
    let limit = env.time_limit() as usize;
    let n = bundle.n_agents;
    let mut record = EpisodeRecord::new(n, limit);
    let mut trace_sink = sink;

    let first = env.reset(settings.env_seed);
    let mut histories: Vec<HistoryBuffer> =
        first.obs.iter().cloned().map(HistoryBuffer::begin).collect();
    let mut d = sample_delay_vector(settings.delay, &bundle.topology, None, 0, &mut rng_delay)?;
    let delayed = delayed_joint_observation(&histories, &d, &bundle.schemas, 0)?;
    record.push_frame(first.obs, delayed, vec![Vec::new(); n], d.clone(), first.avail);
    let actor0 = bundle.actor_inputs(&record, 0, settings.use_delay_free)?;
    for (a, obs) in actor0.into_iter().enumerate() {
        record.actor_obs[a][0] = obs;
    }
    if let Some(s) = trace_sink.as_deref_mut() {
        s.delay_trace(0, &d, &lookup_indices(&d, 0));
    }

    let mut hidden = Tensor::zeros(&[n, bundle.agent.hidden]);
    let mut ret = 0.0f64;
    let mut contact_steps = 0u32;
    for t in 0..limit {
        let actor_obs: Vec<Vec<f32>> =
            (0..n).map(|a| record.actor_obs[a][t].clone()).collect();
        let avail: Vec<Vec<bool>> = (0..n).map(|a| record.avail[a][t].clone()).collect();
        let (actions, h2) =
            bundle.act(&actor_obs, &hidden, &avail, settings.epsilon, &mut rng_explore)?;
        hidden = h2;
        let sr = env.step(&actions)?;
        ret += sr.reward as f64;
        if sr.reward > 0.0 {
            contact_steps += 1;
        }
        record.push_transition(&actions, sr.reward, sr.terminated);

        for (h, obs) in histories.iter_mut().zip(&sr.obs) {
            h.push(obs.clone());
        }
        let t1 = (t + 1) as u32;
        d = sample_delay_vector(settings.delay, &bundle.topology, Some(&d), t1, &mut rng_delay)?;
        let delayed = delayed_joint_observation(&histories, &d, &bundle.schemas, t1)?;
        record.push_frame(sr.obs, delayed, vec![Vec::new(); n], d.clone(), sr.avail);
        let actor = bundle.actor_inputs(&record, t + 1, settings.use_delay_free)?;
        for (a, obs) in actor.into_iter().enumerate() {
            record.actor_obs[a][t + 1] = obs;
        }
        if let Some(s) = trace_sink.as_deref_mut() {
            s.delay_trace(t1, &d, &lookup_indices(&d, t1));
        }
    }
    Ok(CollectOutcome { record, ret, contact_steps })
}

fn lookup_indices(d: &DelayVector, t: u32) -> Vec<Vec<u32>> {
    (0..d.n_agents)
        .map(|i| d.row(i).iter().map(|&v| t - v).collect())
        .collect()
}

/// Greedy evaluation statistics over independent episodes.
#[derive(Debug, Clone)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_contact_steps: f64,
}

impl EvalStats {
    fn from_returns(returns: Vec<f64>, contacts: &[u32]) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = if returns.len() > 1 {
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mean_contacts = contacts.iter().map(|&c| c as f64).sum::<f64>() / n;
        EvalStats {
            returns,
            mean_return: mean,
            std_return: var.sqrt(),
            mean_contact_steps: mean_contacts,
        }
    }
}

/// Evaluate a policy greedily (epsilon = 0, curriculum off) under a delay
/// setting. `eval_index` separates the RNG streams of different sweeps.
pub fn evaluate(
    bundle: &PolicyBundle,
    delay: &DelaySpec,
    n_episodes: usize,
    base_seed: u64,
    eval_index: u64,
) -> Result<EvalStats> {
    delay.validate()?;
    let mut env = build_env(&bundle.config.env)?;
    let mut returns = Vec::with_capacity(n_episodes);
    let mut contacts = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let uid = eval_index.wrapping_mul(1_000_003).wrapping_add(e as u64);
        let settings = CollectSettings {
            delay,
            epsilon: 0.0,
            use_delay_free: false,
            env_seed: derive_seed(base_seed, Stream::Eval, uid.wrapping_mul(3)),
            delay_seed: derive_seed(base_seed, Stream::Eval, uid.wrapping_mul(3) + 1),
            explore_seed: derive_seed(base_seed, Stream::Eval, uid.wrapping_mul(3) + 2),
        };
        let out = collect_episode::<NullSink>(&mut env, bundle, &settings, None)?;
        returns.push(out.ret);
        contacts.push(out.contact_steps);
    }
    Ok(EvalStats::from_returns(returns, &contacts))
}

struct LossReport {
    rl: f64,
    comp: f64,
    kd: f64,
}

/// One optimizer iteration over a sampled batch: TD (plus distillation)
/// update of the agent and mixer, then a compensator update on sampled
/// (episode, step, agent) triples.
#[allow(clippy::too_many_arguments)]
fn train_step(
    bundle: &mut PolicyBundle,
    target_params: &ParamSet<f32>,
    teacher: Option<&PolicyBundle>,
    buffer: &ReplayBuffer,
    rl_opt: &mut Adam<f32>,
    comp_opt: &mut Adam<f32>,
    alpha: f64,
    tf_prob: f64,
    iter_index: u64,
) -> Result<LossReport> {
    let cfg = bundle.config.clone();
    let seed = cfg.train.seed;
    let mut rng_sample = stream_rng(seed, Stream::ReplaySample, iter_index);
    let episodes = buffer.sample(cfg.train.batch, &mut rng_sample)?;
    let batch = build_batch(&episodes, cfg.algo.delay_reconciled)?;

    // RL + distillation update.
    let mut tape = Tape::<f32>::new();
    let mut binder = ParamBinder::new(&bundle.rl_params);
    let td = td_loss(
        &mut tape,
        &mut binder,
        &bundle.agent,
        &bundle.mixer,
        target_params,
        &batch,
        cfg.train.gamma,
    )?;
    let rl_value = tape.data(td.loss)[0] as f64;
    let mut kd_value = 0.0;
    let loss = match teacher {
        Some(t) if alpha < 1.0 => {
            let kd = kd_loss(
                &mut tape,
                &t.rl_params,
                &t.agent,
                &t.mixer,
                &batch,
                &td,
                cfg.distill.beta1,
                cfg.distill.beta2,
            )?;
            kd_value = tape.data(kd)[0] as f64;
            combined_loss(&mut tape, td.loss, kd, alpha)?
        }
        _ => td.loss,
    };
    let grads = binder.backward(&mut tape, loss)?;
    drop(tape);
    rl_opt.step(&mut bundle.rl_params, &grads);

    // Compensator update.
    let mut comp_value = 0.0;
    if let Some(comp) = &bundle.comp {
        let mut rng = stream_rng(seed, Stream::CompensatorBatch, iter_index);
        let n_samples = cfg.compensator.train_samples.max(1);
        let len = episodes[0].len;
        let views: Vec<SampleView<'_>> = (0..n_samples)
            .map(|_| {
                let ep = episodes[rng.random_range(0..episodes.len())];
                let t = rng.random_range(0..=len);
                let agent = rng.random_range(0..bundle.n_agents);
                ep.view(agent, t)
            })
            .collect();
        let inputs: Vec<CompensatorInput> = views
            .iter()
            .map(|v| build_input(v, &comp.layouts[v.agent], comp.history_len, comp.mode, comp.t_model))
            .collect();
        let batched = batch_inputs(&inputs, comp.structural())?;
        let targets = make_targets(&views, &comp.layouts, comp.t_model)?;

        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new(&bundle.comp_params);
        let loss = match comp.mode {
            CompensatorMode::Flash => {
                let (float_res, disc_logits) =
                    flash_heads(&mut tape, &mut binder, &comp.net, &batched)?;
                let flash_targets = make_flash_targets(&targets);
                flash_loss(&mut tape, float_res, disc_logits, &flash_targets, comp.ce_weight)?
            }
            CompensatorMode::Echo => {
                let feedback = if tf_prob > 0.0 {
                    Feedback::TeacherForced { targets: &targets, p: tf_prob, rng: &mut rng }
                } else {
                    Feedback::OwnOutputs
                };
                let out = echo_rollout(
                    &mut tape,
                    &mut binder,
                    &comp.net,
                    comp.structural(),
                    &batched,
                    comp.t_model,
                    feedback,
                )?;
                echo_loss(&mut tape, &out.steps, &targets, comp.ce_weight)?
            }
            CompensatorMode::None => unreachable!("comp is Some only for flash/echo"),
        };
        comp_value = tape.data(loss)[0] as f64;
        let grads = binder.backward(&mut tape, loss)?;
        drop(tape);
        comp_opt.step(&mut bundle.comp_params, &grads);
    }

    Ok(LossReport { rl: rl_value, comp: comp_value, kd: kd_value })
}

/// Train a policy under the configured delay setting.
///
/// Per collected episode: store the delay-free, delayed, and actor-consumed
/// observations with the delay matrices; once the buffer holds a batch, run
/// one TD (+ distillation) update and one compensator update; hard-copy the
/// target networks on the configured interval; evaluate greedily on the
/// training delay setting every `eval_interval` environment steps.
pub fn train<S: TrainSink>(
    cfg: &TrainConfig,
    teacher: Option<&PolicyBundle>,
    sink: &mut S,
) -> Result<PolicyBundle> {
    cfg.validate()?;
    if cfg.distill.enabled() && teacher.is_none() {
        return Err(config_err!(
            "distill schedule is nonzero but no teacher checkpoint was provided"
        ));
    }
    if let Some(t) = teacher {
        check_teacher_compatible(cfg, &t.config)?;
    }

    let mut bundle = PolicyBundle::build(cfg)?;
    let mut target_params = bundle.rl_params.clone();
    let clip = if cfg.train.grad_clip > 0.0 { Some(cfg.train.grad_clip) } else { None };
    let mut rl_opt = Adam::new(cfg.train.lr, clip);
    let mut comp_opt = Adam::new(cfg.compensator.lr, clip);
    let mut buffer = ReplayBuffer::new(cfg.train.buffer);
    let mut env = build_env(&cfg.env)?;

    let seed = cfg.train.seed;
    let eps_sched =
        LinearSchedule::new(cfg.train.eps_start, cfg.train.eps_end, 0, cfg.train.eps_anneal);
    let kd_sched = cfg.distill.schedule();
    let tf_sched = LinearSchedule::new(cfg.compensator.teacher_forcing, 0.0, 0, cfg.train.t_max);
    let label = delay_setting_label(&cfg.delay);

    let mut env_steps: u64 = 0;
    let mut episode_idx: u64 = 0;
    let mut train_steps: u64 = 0;
    let mut next_eval = cfg.train.eval_interval;
    let mut next_ckpt = 50_000u64;

    while env_steps < cfg.train.t_max {
        let p_cl = cfg.curriculum.value(env_steps);
        let use_delay_free = curriculum_use_delay_free(
            p_cl,
            &mut stream_rng(seed, Stream::Curriculum, episode_idx),
        );
        let epsilon = eps_sched.value(env_steps);
        let settings = CollectSettings {
            delay: &cfg.delay,
            epsilon,
            use_delay_free,
            env_seed: derive_seed(seed, Stream::EnvReset, episode_idx),
            delay_seed: derive_seed(seed, Stream::Delays, episode_idx),
            explore_seed: derive_seed(seed, Stream::Exploration, episode_idx),
        };
        let out = collect_episode(&mut env, &bundle, &settings, Some(sink))?;
        env_steps += out.record.len as u64;
        buffer.push(out.record);
        episode_idx += 1;

        let alpha = 1.0 - kd_sched.value(env_steps);
        let mut report = LossReport { rl: 0.0, comp: 0.0, kd: 0.0 };
        if buffer.len() >= cfg.train.batch {
            report = train_step(
                &mut bundle,
                &target_params,
                teacher,
                &buffer,
                &mut rl_opt,
                &mut comp_opt,
                alpha,
                tf_sched.value(env_steps),
                episode_idx,
            )?;
            train_steps += 1;
            if train_steps % cfg.train.target_interval == 0 {
                target_params.copy_from(&bundle.rl_params)?;
            }
        }

        sink.metrics(&MetricsRow {
            step: env_steps,
            phase: Phase::Train,
            delay_setting: label.clone(),
            mean_return: out.ret,
            std_return: 0.0,
            compensator_loss: report.comp,
            rl_loss: report.rl,
            kd_loss: report.kd,
            epsilon,
            p_cl,
            alpha,
        });

        if env_steps >= next_eval {
            let stats =
                evaluate(&bundle, &cfg.delay, cfg.train.eval_episodes, seed, next_eval)?;
            sink.metrics(&MetricsRow {
                step: env_steps,
                phase: Phase::Eval,
                delay_setting: label.clone(),
                mean_return: stats.mean_return,
                std_return: stats.std_return,
                compensator_loss: report.comp,
                rl_loss: report.rl,
                kd_loss: report.kd,
                epsilon: 0.0,
                p_cl,
                alpha,
            });
            next_eval += cfg.train.eval_interval;
        }
        if env_steps >= next_ckpt {
            sink.checkpoint(env_steps, &bundle);
            next_ckpt += 50_000;
        }
    }
    Ok(bundle)
}

/// A short name for ready-made variant configs used by suites and tests.
pub fn variant_label(cfg: &TrainConfig) -> String {
    let mut parts: Vec<&str> = Vec::new();
    match cfg.compensator.mode {
        CompensatorMode::None => parts.push("base"),
        CompensatorMode::Flash => parts.push("flash"),
        CompensatorMode::Echo => parts.push("echo"),
    }
    if matches!(cfg.delay.mode, crate::delay::DelayMode::None) {
        parts = vec!["oracle"];
    }
    let mut label = String::from(parts[0]);
    if cfg.algo.delay_reconciled {
        label.push_str("_dr");
    }
    if cfg.compensator.use_history && !matches!(cfg.compensator.mode, CompensatorMode::None) {
        label.push_str("_h");
    }
    if cfg.distill.enabled() {
        label.push_str("_kd");
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AlgoConfig, CompensatorConfig, DistillConfig, TrainParams};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            env: EnvConfig { name: EnvName::GridSpread, grid: 5, n_agents: 2, time_limit: 5 },
            delay: DelaySpec::unfixed_uniform(1, 1, 2),
            compensator: CompensatorConfig {
                mode: CompensatorMode::Echo,
                hidden_dim: 8,
                train_samples: 8,
                ..Default::default()
            },
            algo: AlgoConfig {
                name: Algo::Qmix,
                mixing_embed_dim: 4,
                hypernet_embed: 6,
                agent_hidden_dim: 8,
                ..Default::default()
            },
            curriculum: LinearSchedule::default(),
            distill: DistillConfig::default(),
            train: TrainParams {
                t_max: 60,
                batch: 2,
                buffer: 8,
                eval_interval: 50,
                eval_episodes: 2,
                eps_anneal: 40,
                seed: 7,
                ..Default::default()
            },
        }
    }

    struct CountingSink {
        rows: Vec<MetricsRow>,
    }

    impl TrainSink for CountingSink {
        fn metrics(&mut self, row: &MetricsRow) {
            self.rows.push(row.clone());
        }
    }

    #[test]
    fn train_runs_and_metrics_steps_are_monotone() {
        let cfg = tiny_config();
        let mut sink = CountingSink { rows: Vec::new() };
        train(&cfg, None, &mut sink).unwrap();
        assert!(!sink.rows.is_empty());
        let mut last = 0;
        for row in &sink.rows {
            assert!(row.step >= last);
            last = row.step;
        }
        assert!(sink.rows.iter().any(|r| r.phase == Phase::Eval));
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let cfg = tiny_config();
        let run = || {
            let mut sink = CountingSink { rows: Vec::new() };
            train(&cfg, None, &mut sink).unwrap();
            sink.rows
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn distillation_without_teacher_is_a_config_error() {
        let mut cfg = tiny_config();
        cfg.distill.start_value = 1.0;
        let mut sink = NullSink;
        assert!(matches!(
            train(&cfg, None, &mut sink),
            Err(crate::CoreError::Config(_))
        ));
    }

    #[test]
    fn curriculum_pick_frequencies() {
        let mut rng = stream_rng(3, Stream::Curriculum, 0);
        assert!(!(0..500).any(|_| curriculum_use_delay_free(0.0, &mut rng)));
        assert!((0..500).all(|_| curriculum_use_delay_free(1.0, &mut rng)));
        let hits = (0..10_000).filter(|_| curriculum_use_delay_free(0.5, &mut rng)).count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn zero_delay_mode_matches_underlying_env_observations() {
        let mut cfg = tiny_config();
        cfg.delay = DelaySpec::none();
        cfg.compensator.mode = CompensatorMode::None;
        let bundle = PolicyBundle::build(&cfg).unwrap();
        let mut env = build_env(&cfg.env).unwrap();
        let settings = CollectSettings {
            delay: &cfg.delay,
            epsilon: 1.0,
            use_delay_free: false,
            env_seed: 3,
            delay_seed: 4,
            explore_seed: 5,
        };
        let out = collect_episode::<NullSink>(&mut env, &bundle, &settings, None).unwrap();
        // Delayed observations equal delay-free ones bit-exactly.
        assert_eq!(out.record.delayed, out.record.delay_free);
    }
}
