//! Deterministic, seedable grid environments with entity-factored
//! observations, standing in for the usual particle/combat benchmarks at
//! desk scale.
//!
//! Both environments share the action set {stay, up, down, left, right},
//! integer Manhattan geometry, a hard episode limit, and an observation
//! layout of one non-delayable self group (own position one-hots plus agent
//! id) followed by delayable per-entity groups (relative position plus a
//! discrete visibility flag). Visibility flips when an entity crosses half
//! the grid width away, which gives the discrete compensation head moving
//! targets.

mod spread;
mod tag;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::delay::{FactoredObservation, FeatureGroup, FeatureKind, ObservationSchema};
use crate::Result;

pub use spread::GridSpreadEnv;
pub use tag::GridTagEnv;

pub const N_ACTIONS: usize = 5;

/// Action indices; order is load-bearing for tie-breaks.
pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    /// Apply a move, staying put if it would leave the grid.
    pub fn step(self, action: usize, side: i32) -> Cell {
        let (dx, dy) = match action {
            STAY => (0, 0),
            UP => (0, 1),
            DOWN => (0, -1),
            LEFT => (-1, 0),
            RIGHT => (1, 0),
            _ => (0, 0),
        };
        let next = Cell { x: self.x + dx, y: self.y + dy };
        if next.x < 0 || next.y < 0 || next.x >= side || next.y >= side {
            self
        } else {
            next
        }
    }
}

/// Everything an environment returns from `reset` and `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<FactoredObservation>,
    pub reward: f32,
    pub terminated: bool,
    /// Delay-free global state: concatenation of all agents' observations.
    pub state: Vec<f32>,
    pub avail: Vec<Vec<bool>>,
}

/// Grid environment interface shared by the training loop and evaluators.
pub trait GridWorld {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize {
        N_ACTIONS
    }
    fn time_limit(&self) -> u32;
    fn schema(&self, agent: usize) -> &ObservationSchema;
    fn schemas(&self) -> Vec<ObservationSchema> {
        (0..self.n_agents()).map(|i| self.schema(i).clone()).collect()
    }
    fn reset(&mut self, seed: u64) -> StepResult;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
}

/// Static dispatch over the two environments.
#[derive(Debug, Clone)]
pub enum Env {
    Spread(GridSpreadEnv),
    Tag(GridTagEnv),
}

impl GridWorld for Env {
    fn n_agents(&self) -> usize {
        match self {
            Env::Spread(e) => e.n_agents(),
            Env::Tag(e) => e.n_agents(),
        }
    }

    fn time_limit(&self) -> u32 {
        match self {
            Env::Spread(e) => e.time_limit(),
            Env::Tag(e) => e.time_limit(),
        }
    }

    fn schema(&self, agent: usize) -> &ObservationSchema {
        match self {
            Env::Spread(e) => e.schema(agent),
            Env::Tag(e) => e.schema(agent),
        }
    }

    fn reset(&mut self, seed: u64) -> StepResult {
        match self {
            Env::Spread(e) => e.reset(seed),
            Env::Tag(e) => e.reset(seed),
        }
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        match self {
            Env::Spread(e) => e.step(actions),
            Env::Tag(e) => e.step(actions),
        }
    }
}

/// Visibility radius: an entity is marked visible iff its Manhattan distance
/// is at most half the grid side (2 * dist <= side).
pub(crate) fn visible_flag(dist: i32, side: i32) -> f32 {
    if 2 * dist <= side {
        1.0
    } else {
        0.0
    }
}

/// Build one agent's schema for `n_agents` agents plus `n_objects` extra
/// entities (landmarks or prey). Entities 0..n_agents are the agents.
pub(crate) fn grid_schema(
    agent: usize,
    n_agents: usize,
    n_objects: usize,
    side: i32,
    object_label: &str,
) -> ObservationSchema {
    let mut groups = Vec::new();
    let self_width = 2 * side as usize + n_agents;
    groups.push(FeatureGroup {
        name: String::from("self"),
        owner: agent,
        kinds: vec![FeatureKind::Continuous; self_width],
        delayable: false,
    });
    for other in 0..n_agents {
        if other == agent {
            continue;
        }
        groups.push(FeatureGroup {
            name: alloc::format!("ally{other}"),
            owner: other,
            kinds: vec![
                FeatureKind::Continuous,
                FeatureKind::Continuous,
                FeatureKind::Discrete { classes: 2 },
            ],
            delayable: true,
        });
    }
    for obj in 0..n_objects {
        groups.push(FeatureGroup {
            name: alloc::format!("{object_label}{obj}"),
            owner: n_agents + obj,
            kinds: vec![
                FeatureKind::Continuous,
                FeatureKind::Continuous,
                FeatureKind::Discrete { classes: 2 },
            ],
            delayable: true,
        });
    }
    ObservationSchema { groups, n_entities: n_agents + n_objects }
}

/// Self group content: one-hot x, one-hot y, one-hot agent id.
pub(crate) fn self_features(pos: Cell, agent: usize, n_agents: usize, side: i32) -> Vec<f32> {
    let side = side as usize;
    let mut v = vec![0.0f32; 2 * side + n_agents];
    v[pos.x as usize] = 1.0;
    v[side + pos.y as usize] = 1.0;
    v[2 * side + agent] = 1.0;
    v
}

/// Delayable group content: relative position plus visibility flag.
pub(crate) fn entity_features(me: Cell, other: Cell, side: i32) -> Vec<f32> {
    vec![
        (other.x - me.x) as f32,
        (other.y - me.y) as f32,
        visible_flag(me.manhattan(other), side),
    ]
}

/// Concatenation of all agents' delay-free observations.
pub(crate) fn concat_state(obs: &[FactoredObservation]) -> Vec<f32> {
    obs.iter().flat_map(|o| o.flatten()).collect()
}

pub(crate) fn full_avail(n_agents: usize) -> Vec<Vec<bool>> {
    vec![vec![true; N_ACTIONS]; n_agents]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_off_grid_stay_put() {
        let side = 3;
        let c = Cell { x: 0, y: 0 };
        assert_eq!(c.step(LEFT, side), c);
        assert_eq!(c.step(DOWN, side), c);
        assert_eq!(c.step(RIGHT, side), Cell { x: 1, y: 0 });
        assert_eq!(c.step(UP, side), Cell { x: 0, y: 1 });
        let edge = Cell { x: 2, y: 2 };
        assert_eq!(edge.step(RIGHT, side), edge);
        assert_eq!(edge.step(UP, side), edge);
    }

    #[test]
    fn schema_counts_for_three_agent_spread() {
        // 1 self group + 2 ally groups + 3 landmark groups.
        let s = grid_schema(0, 3, 3, 7, "landmark");
        assert_eq!(s.groups.len(), 6);
        assert_eq!(s.groups.iter().filter(|g| !g.delayable).count(), 1);
        s.validate().unwrap();
        let total: usize = s.groups.iter().map(|g| g.width()).sum();
        assert_eq!(total, s.width());
        // Owners unique per validation; width = self (14 + 3) + 5 * 3.
        assert_eq!(s.width(), 17 + 15);
    }
}
