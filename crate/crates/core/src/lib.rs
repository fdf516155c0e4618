//! Core library for training cooperative multi-agent Q-learners under
//! stochastic per-entity observation delays.
//!
//! The crate is organized around six pieces:
//!
//! - [`tape`] / [`nn`] / [`optim`]: a minimal reverse-mode autodiff engine
//!   with a finite-difference oracle ([`gradcheck`]) for every operator.
//! - [`delay`]: the delayed-observation model — extended state windows,
//!   per-(agent, entity) delay sampling under age consistency, and the
//!   analytic observation probability used as a verification oracle.
//! - [`env`]: deterministic, seedable grid environments with entity-factored
//!   observations.
//! - [`compensator`]: Flash (single-shot) and Echo (autoregressive, masked)
//!   delay compensators with dual-head residual losses.
//! - [`marl`]: recurrent agent Q-networks, VDN/QMIX mixers, episodic replay,
//!   TD training with a delay-reconciled critic option, curriculum mixing,
//!   and teacher-student distillation.
//! - [`config`] / [`metrics`]: plain-data configuration and metrics types;
//!   all file I/O lives in the companion CLI crate.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only switches float intrinsics and enables nothing else.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod compensator;
pub mod config;
pub mod delay;
pub mod env;
mod error;
pub mod gradcheck;
pub mod marl;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rngs;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
