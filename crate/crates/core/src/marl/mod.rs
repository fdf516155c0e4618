//! Value-decomposition training under observation delays: recurrent agent
//! Q-networks, VDN/QMIX mixers, episodic replay, TD learning with a
//! delay-reconciled critic option, curriculum observation mixing, and
//! teacher-student distillation.

pub mod agent;
pub mod learner;
pub mod mixer;
pub mod replay;
pub mod trainer;

pub use agent::AgentNet;
pub use learner::{build_batch, kd_loss, select_actions, td_loss, Batch, TdOutputs};
pub use mixer::{Mixer, QmixMixer};
pub use replay::{EpisodeRecord, ReplayBuffer};
pub use trainer::{
    collect_episode, curriculum_use_delay_free, evaluate, train, CollectSettings, EvalStats,
    NullSink, PolicyBundle, TrainSink,
};
