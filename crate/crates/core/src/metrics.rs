//! Plain-data metrics rows emitted by training; serialization and file I/O
//! belong to the CLI crate.

use alloc::string::String;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// One metrics line. `step` is the environment-step counter and rows are
/// emitted in non-decreasing step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub delay_setting: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub compensator_loss: f64,
    pub rl_loss: f64,
    pub kd_loss: f64,
    pub epsilon: f64,
    pub p_cl: f64,
    pub alpha: f64,
}
