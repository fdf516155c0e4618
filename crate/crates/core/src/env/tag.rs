//! Pursuit: P pursuers chase one scripted prey on a grid with obstacles.
//!
//! The prey is a pure function of state: it picks the move maximizing its
//! Manhattan distance to the nearest pursuer, ties broken by fixed action
//! order (stay, up, down, left, right). Pursuers move first, then the prey
//! responds; the team earns +1 per pursuer within Manhattan distance 1 of
//! the prey after both have moved.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

use super::{
    concat_state, entity_features, full_avail, grid_schema, self_features, Cell, GridWorld,
    StepResult, N_ACTIONS,
};
use crate::delay::{FactoredObservation, ObservationSchema};
use crate::error::data_err;
use crate::rngs::Rng;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GridTagEnv {
    side: i32,
    n_pursuers: usize,
    n_obstacles: usize,
    time_limit: u32,
    schemas: Vec<ObservationSchema>,
    pursuers: Vec<Cell>,
    prey: Cell,
    obstacles: Vec<Cell>,
    t: u32,
}

impl GridTagEnv {
    pub fn new(side: u32, n_pursuers: usize, time_limit: u32) -> Self {
        let side = side as i32;
        let schemas =
            (0..n_pursuers).map(|i| grid_schema(i, n_pursuers, 1, side, "prey")).collect();
        GridTagEnv {
            side,
            n_pursuers,
            n_obstacles: 2,
            time_limit,
            schemas,
            pursuers: Vec::new(),
            prey: Cell { x: 0, y: 0 },
            obstacles: Vec::new(),
            t: 0,
        }
    }

    pub fn prey(&self) -> Cell {
        self.prey
    }

    pub fn pursuers(&self) -> &[Cell] {
        &self.pursuers
    }

    pub fn obstacles(&self) -> &[Cell] {
        &self.obstacles
    }

    /// Place pursuers and prey directly (tests drive exact configurations).
    pub fn place(&mut self, pursuers: Vec<Cell>, prey: Cell, obstacles: Vec<Cell>) {
        self.pursuers = pursuers;
        self.prey = prey;
        self.obstacles = obstacles;
    }

    fn blocked(&self, c: Cell) -> bool {
        self.obstacles.contains(&c)
    }

    /// Deterministic prey rule: argmax over legal moves of the squared
    /// Euclidean distance to the nearest pursuer (fleeing straight away
    /// beats sidestepping), first maximizer in action order wins.
    pub fn prey_move(&self) -> Cell {
        let sq = |a: Cell, b: Cell| {
            let (dx, dy) = ((a.x - b.x) as i64, (a.y - b.y) as i64);
            dx * dx + dy * dy
        };
        let mut best = self.prey;
        let mut best_dist = i64::MIN;
        for action in 0..N_ACTIONS {
            let next = self.prey.step(action, self.side);
            if next != self.prey && self.blocked(next) {
                continue;
            }
            let dist = self.pursuers.iter().map(|p| sq(*p, next)).min().unwrap_or(0);
            if dist > best_dist {
                best_dist = dist;
                best = next;
            }
        }
        best
    }

    fn captures(&self) -> u32 {
        self.pursuers.iter().filter(|p| p.manhattan(self.prey) <= 1).count() as u32
    }

    fn observe(&self, agent: usize) -> FactoredObservation {
        let me = self.pursuers[agent];
        let mut groups = Vec::with_capacity(self.schemas[agent].groups.len());
        groups.push(self_features(me, agent, self.n_pursuers, self.side));
        for other in 0..self.n_pursuers {
            if other != agent {
                groups.push(entity_features(me, self.pursuers[other], self.side));
            }
        }
        groups.push(entity_features(me, self.prey, self.side));
        FactoredObservation { groups }
    }

    fn result(&self, reward: f32, terminated: bool) -> StepResult {
        let obs: Vec<FactoredObservation> =
            (0..self.n_pursuers).map(|i| self.observe(i)).collect();
        let state = concat_state(&obs);
        StepResult { obs, reward, terminated, state, avail: full_avail(self.n_pursuers) }
    }
}

impl GridWorld for GridTagEnv {
    fn n_agents(&self) -> usize {
        self.n_pursuers
    }

    fn time_limit(&self) -> u32 {
        self.time_limit
    }

    fn schema(&self, agent: usize) -> &ObservationSchema {
        &self.schemas[agent]
    }

    fn reset(&mut self, seed: u64) -> StepResult {
        let mut rng = Rng::seed_from_u64(seed);
        let free = |obstacles: &[Cell], rng: &mut Rng| loop {
            let c = Cell { x: rng.random_range(0..self.side), y: rng.random_range(0..self.side) };
            if !obstacles.contains(&c) {
                return c;
            }
        };
        self.obstacles = Vec::new();
        let max_obstacles = self.n_obstacles.min((self.side * self.side) as usize / 4);
        while self.obstacles.len() < max_obstacles {
            let c = Cell { x: rng.random_range(0..self.side), y: rng.random_range(0..self.side) };
            if !self.obstacles.contains(&c) {
                self.obstacles.push(c);
            }
        }
        self.prey = free(&self.obstacles, &mut rng);
        self.pursuers = (0..self.n_pursuers).map(|_| free(&self.obstacles, &mut rng)).collect();
        self.t = 0;
        self.result(0.0, false)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if actions.len() != self.n_pursuers {
            return Err(data_err!("want {} actions, got {}", self.n_pursuers, actions.len()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(data_err!("action {bad} out of range"));
        }
        for (p, &action) in self.pursuers.iter_mut().zip(actions) {
            let next = p.step(action, self.side);
            if !self.obstacles.contains(&next) {
                *p = next;
            }
        }
        self.prey = self.prey_move();
        self.t += 1;
        let reward = self.captures() as f32;
        Ok(self.result(reward, self.t >= self.time_limit))
    }
}
