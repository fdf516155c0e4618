//! Training configuration, shared between the core and the CLI harness.
//!
//! Every field has a desk-scale default so partial JSON configs resolve to a
//! complete, serializable effective config.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::delay::{DelayDistribution, DelayMode, DelaySpec};
use crate::error::config_err;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    GridSpread,
    GridTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub name: EnvName,
    #[serde(default = "d_grid")]
    pub grid: u32,
    #[serde(default = "d_n_agents")]
    pub n_agents: usize,
    #[serde(default = "d_time_limit")]
    pub time_limit: u32,
}

fn d_grid() -> u32 {
    7
}
fn d_n_agents() -> usize {
    3
}
fn d_time_limit() -> u32 {
    25
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(config_err!("env.grid must be positive"));
        }
        if self.n_agents == 0 {
            return Err(config_err!("env.n_agents must be positive"));
        }
        if self.time_limit == 0 {
            return Err(config_err!("env.time_limit must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensatorMode {
    None,
    Flash,
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensatorConfig {
    #[serde(default = "d_comp_mode")]
    pub mode: CompensatorMode,
    #[serde(default = "d_true")]
    pub use_history: bool,
    /// History window length; `None` means the delay bound `max_delay`.
    #[serde(default)]
    pub history_length: Option<u32>,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Initial teacher-forcing probability, annealed linearly to zero over
    /// the run; 0 disables it (the default).
    #[serde(default)]
    pub teacher_forcing: f64,
    /// (sample, step, agent) triples drawn per training iteration.
    #[serde(default = "d_comp_samples")]
    pub train_samples: usize,
    /// Relative weight of the discrete (CE) head against the float (MSE) head.
    #[serde(default = "d_one")]
    pub ce_weight: f64,
}

fn d_comp_mode() -> CompensatorMode {
    CompensatorMode::None
}
fn d_true() -> bool {
    true
}
fn d_hidden() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-3
}
fn d_comp_samples() -> usize {
    128
}
fn d_one() -> f64 {
    1.0
}

impl Default for CompensatorConfig {
    fn default() -> Self {
        CompensatorConfig {
            mode: d_comp_mode(),
            use_history: true,
            history_length: None,
            hidden_dim: d_hidden(),
            lr: d_lr(),
            teacher_forcing: 0.0,
            train_samples: d_comp_samples(),
            ce_weight: 1.0,
        }
    }
}

impl CompensatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(config_err!("compensator.hidden_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(config_err!("compensator.teacher_forcing must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err!("compensator.lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Vdn,
    Qmix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    #[serde(default = "d_algo")]
    pub name: Algo,
    /// Condition the mixer on the delay-free global state during training.
    #[serde(default)]
    pub delay_reconciled: bool,
    #[serde(default = "d_mixing_embed")]
    pub mixing_embed_dim: usize,
    #[serde(default = "d_hidden")]
    pub hypernet_embed: usize,
    #[serde(default = "d_hidden")]
    pub agent_hidden_dim: usize,
}

fn d_algo() -> Algo {
    Algo::Qmix
}
fn d_mixing_embed() -> usize {
    32
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            name: d_algo(),
            delay_reconciled: false,
            mixing_embed_dim: d_mixing_embed(),
            hypernet_embed: d_hidden(),
            agent_hidden_dim: d_hidden(),
        }
    }
}

/// Linear interpolation between two endpoints, clamped outside the span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LinearSchedule {
    pub start_value: f64,
    pub end_value: f64,
    pub start_step: u64,
    pub end_step: u64,
}

impl LinearSchedule {
    pub fn new(start_value: f64, end_value: f64, start_step: u64, end_step: u64) -> Self {
        LinearSchedule { start_value, end_value, start_step, end_step }
    }

    pub fn value(&self, step: u64) -> f64 {
        if step <= self.start_step {
            return self.start_value;
        }
        if step >= self.end_step {
            return self.end_value;
        }
        let frac = (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
        self.start_value + frac * (self.end_value - self.start_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Schedule of the distillation weight (1 - alpha). All-zero disables
    /// distillation.
    #[serde(default)]
    pub start_value: f64,
    #[serde(default)]
    pub end_value: f64,
    #[serde(default)]
    pub start_step: u64,
    #[serde(default)]
    pub end_step: u64,
}

fn d_beta1() -> f64 {
    1.0
}
fn d_beta2() -> f64 {
    0.1
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta1: d_beta1(),
            beta2: d_beta2(),
            start_value: 0.0,
            end_value: 0.0,
            start_step: 0,
            end_step: 0,
        }
    }
}

impl DistillConfig {
    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule::new(self.start_value, self.end_value, self.start_step, self.end_step)
    }

    /// Distillation is active if the weight schedule is ever nonzero.
    pub fn enabled(&self) -> bool {
        self.start_value != 0.0 || self.end_value != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    #[serde(default = "d_t_max")]
    pub t_max: u64,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_buffer")]
    pub buffer: usize,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_eps_anneal")]
    pub eps_anneal: u64,
    #[serde(default = "d_eps_start")]
    pub eps_start: f64,
    #[serde(default = "d_eps_end")]
    pub eps_end: f64,
    #[serde(default = "d_target_interval")]
    pub target_interval: u64,
    /// Global-norm gradient clip; values <= 0 disable clipping.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_t_max() -> u64 {
    200_000
}
fn d_batch() -> usize {
    32
}
fn d_buffer() -> usize {
    5_000
}
fn d_gamma() -> f64 {
    0.99
}
fn d_eps_anneal() -> u64 {
    50_000
}
fn d_eps_start() -> f64 {
    1.0
}
fn d_eps_end() -> f64 {
    0.05
}
fn d_target_interval() -> u64 {
    200
}
fn d_grad_clip() -> f64 {
    10.0
}
fn d_eval_interval() -> u64 {
    10_000
}
fn d_eval_episodes() -> usize {
    32
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            t_max: d_t_max(),
            batch: d_batch(),
            buffer: d_buffer(),
            gamma: d_gamma(),
            lr: d_lr(),
            eps_anneal: d_eps_anneal(),
            eps_start: d_eps_start(),
            eps_end: d_eps_end(),
            target_interval: d_target_interval(),
            grad_clip: d_grad_clip(),
            eval_interval: d_eval_interval(),
            eval_episodes: d_eval_episodes(),
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.buffer < self.batch {
            return Err(config_err!(
                "train.buffer ({}) must hold at least train.batch ({}) episodes",
                self.buffer,
                self.batch
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err!("train.gamma must lie in [0, 1]"));
        }
        if self.target_interval == 0 {
            return Err(config_err!("train.target_interval must be positive"));
        }
        Ok(())
    }
}

/// Complete training configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    #[serde(default = "DelaySpec::none")]
    pub delay: DelaySpec,
    #[serde(default)]
    pub compensator: CompensatorConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
    #[serde(default)]
    pub curriculum: LinearSchedule,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub train: TrainParams,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.delay.validate()?;
        self.compensator.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.curriculum.start_value)
            || !(0.0..=1.0).contains(&self.curriculum.end_value)
        {
            return Err(config_err!("curriculum values are probabilities in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.distill.start_value)
            || !(0.0..=1.0).contains(&self.distill.end_value)
        {
            return Err(config_err!("distill weight values lie in [0, 1]"));
        }
        Ok(())
    }

    /// Compensator history window length (the delay bound unless overridden).
    pub fn history_length(&self) -> u32 {
        if !self.compensator.use_history {
            return 0;
        }
        self.compensator.history_length.unwrap_or(self.delay.max_delay)
    }
}

/// Compact human-readable descriptor, used in metrics rows and CSV cells.
pub fn delay_setting_label(spec: &DelaySpec) -> String {
    let (lo, hi) = spec.range();
    match spec.mode {
        DelayMode::None => String::from("none"),
        DelayMode::Fixed => format!("fixed:{}", spec.value),
        DelayMode::PartiallyFixed => format!("pf:{}@{:.2}", spec.value, spec.pf_fraction),
        DelayMode::Unfixed => match spec.distribution {
            DelayDistribution::Uniform => format!("uniform:{lo}-{hi}"),
            DelayDistribution::Binomial { n, p } => format!("binomial:{n},{p}@{lo}-{hi}"),
            DelayDistribution::Poisson { lambda } => format!("poisson:{lambda}@{lo}-{hi}"),
            DelayDistribution::Normal { mu, sigma } => format!("normal:{mu},{sigma}@{lo}-{hi}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_clamps_outside_span() {
        let s = LinearSchedule::new(1.0, 0.05, 0, 100);
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(50), 0.525);
        assert_eq!(s.value(100), 0.05);
        assert_eq!(s.value(10_000), 0.05);

        let delayed = LinearSchedule::new(0.8, 0.0, 100, 200);
        assert_eq!(delayed.value(0), 0.8);
        assert_eq!(delayed.value(100), 0.8);
        assert_eq!(delayed.value(200), 0.0);
    }

    #[test]
    fn degenerate_schedule_is_constant() {
        let s = LinearSchedule::new(0.3, 0.9, 50, 50);
        assert_eq!(s.value(0), 0.3);
        assert_eq!(s.value(50), 0.3);
        assert_eq!(s.value(51), 0.9);
    }

    #[test]
    fn labels_are_compact() {
        assert_eq!(delay_setting_label(&DelaySpec::none()), "none");
        assert_eq!(delay_setting_label(&DelaySpec::fixed(2, 3)), "fixed:2");
        assert_eq!(delay_setting_label(&DelaySpec::unfixed_uniform(2, 1, 3)), "uniform:1-3");
    }
}
