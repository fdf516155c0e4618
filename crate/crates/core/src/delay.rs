//! The delayed-observation model.
//!
//! Observations are factored into per-entity feature groups. At every
//! environment step each (agent, entity) pair draws a delay from a
//! configurable distribution, subject to age consistency — information can
//! grow at most one step older per environment step — and to the episode
//! start (a delay can never reference pre-episode states). Delayed
//! observations are then verbatim lookups into per-agent history buffers.
//!
//! For tiny discrete instances the module also provides the analytic
//! observation probability (a product over agents and entities of delay-mass
//! times an indicator), used as a Monte-Carlo-verified oracle.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err};
use crate::rngs::Rng;
use crate::{CoreError, Result};

// ── observation schema ───────────────────────────────────────────────

/// Per-scalar typing inside a feature group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Discrete { classes: u32 },
}

/// One entity's slice of an agent's observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    /// Index of the entity this group describes, in the global entity set.
    pub owner: usize,
    pub kinds: Vec<FeatureKind>,
    pub delayable: bool,
}

impl FeatureGroup {
    pub fn width(&self) -> usize {
        self.kinds.len()
    }
}

/// An agent's observation layout: one group per observed entity plus exactly
/// one non-delayable self/movement group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSchema {
    pub groups: Vec<FeatureGroup>,
    /// Size of the global entity set (agents plus environment entities).
    pub n_entities: usize,
}

impl ObservationSchema {
    pub fn validate(&self) -> Result<()> {
        let mut owners: Vec<usize> = self.groups.iter().map(|g| g.owner).collect();
        owners.sort_unstable();
        owners.dedup();
        if owners.len() != self.groups.len() {
            return Err(config_err!("schema has duplicate group owners"));
        }
        if let Some(&bad) = owners.iter().find(|&&o| o >= self.n_entities) {
            return Err(config_err!(
                "group owner {bad} out of range for {} entities",
                self.n_entities
            ));
        }
        let non_delayable = self.groups.iter().filter(|g| !g.delayable).count();
        if non_delayable != 1 {
            return Err(config_err!(
                "schema wants exactly one non-delayable self/movement group, found {non_delayable}"
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.groups.iter().map(|g| g.width()).sum()
    }

    /// Flat [start, end) column range of each group.
    pub fn group_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.groups.len());
        let mut start = 0;
        for g in &self.groups {
            out.push((start, start + g.width()));
            start += g.width();
        }
        out
    }
}

/// One agent's observation, split per feature group in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredObservation {
    pub groups: Vec<Vec<f32>>,
}

impl FactoredObservation {
    pub fn flatten(&self) -> Vec<f32> {
        self.groups.iter().flatten().copied().collect()
    }

    pub fn width(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

// ── delay specification ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    None,
    Fixed,
    PartiallyFixed,
    Unfixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDistribution {
    Uniform,
    Binomial { n: u32, p: f64 },
    Poisson { lambda: f64 },
    Normal { mu: f64, sigma: f64 },
}

impl Default for DelayDistribution {
    fn default() -> Self {
        DelayDistribution::Uniform
    }
}

/// How delays are drawn for every delayable (agent, entity) pair.
///
/// Unfixed draws live on `[value - scope, value + scope]`; binomial samples
/// are shifted up by the range minimum, Poisson and normal samples are
/// truncated into the range, and normal samples are then rounded half to
/// even. All modes afterwards clamp each entry to `min(prev + 1, max_delay)`
/// and to the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    pub mode: DelayMode,
    #[serde(default)]
    pub value: u32,
    #[serde(default)]
    pub scope: u32,
    #[serde(default = "default_max_delay")]
    pub max_delay: u32,
    #[serde(default = "default_pf_fraction")]
    pub pf_fraction: f64,
    #[serde(default)]
    pub distribution: DelayDistribution,
}

fn default_max_delay() -> u32 {
    1
}

fn default_pf_fraction() -> f64 {
    0.5
}

impl DelaySpec {
    pub fn none() -> Self {
        DelaySpec {
            mode: DelayMode::None,
            value: 0,
            scope: 0,
            max_delay: 1,
            pf_fraction: default_pf_fraction(),
            distribution: DelayDistribution::Uniform,
        }
    }

    pub fn fixed(value: u32, max_delay: u32) -> Self {
        DelaySpec { mode: DelayMode::Fixed, value, max_delay, ..Self::none() }
    }

    pub fn unfixed_uniform(value: u32, scope: u32, max_delay: u32) -> Self {
        DelaySpec { mode: DelayMode::Unfixed, value, scope, max_delay, ..Self::none() }
    }

    pub fn range(&self) -> (u32, u32) {
        (self.value - self.scope, self.value + self.scope)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_delay == 0 {
            return Err(config_err!("delay.max_delay must be positive"));
        }
        match self.mode {
            DelayMode::None => {}
            DelayMode::Fixed | DelayMode::PartiallyFixed => {
                if self.value > self.max_delay {
                    return Err(config_err!(
                        "delay.value {} exceeds max_delay {}",
                        self.value,
                        self.max_delay
                    ));
                }
            }
            DelayMode::Unfixed => {
                if self.scope > self.value {
                    return Err(config_err!(
                        "delay range needs value >= scope, got value {} scope {}",
                        self.value,
                        self.scope
                    ));
                }
                if self.value + self.scope > self.max_delay {
                    return Err(config_err!(
                        "delay range top {} exceeds max_delay {}",
                        self.value + self.scope,
                        self.max_delay
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.pf_fraction) {
            return Err(config_err!("delay.pf_fraction must lie in [0, 1]"));
        }
        match self.distribution {
            DelayDistribution::Uniform => {}
            DelayDistribution::Binomial { n: _, p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(config_err!("binomial p must lie in [0, 1]"));
                }
            }
            DelayDistribution::Poisson { lambda } => {
                if !(lambda > 0.0) {
                    return Err(config_err!("poisson lambda must be positive"));
                }
            }
            DelayDistribution::Normal { mu: _, sigma } => {
                if !(sigma > 0.0) {
                    return Err(config_err!("normal sigma must be positive"));
                }
            }
        }
        Ok(())
    }
}

// ── delay vector ─────────────────────────────────────────────────────

/// Current delay of every (agent, entity) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayVector {
    pub n_agents: usize,
    pub n_entities: usize,
    d: Vec<u32>,
}

impl DelayVector {
    pub fn zeros(n_agents: usize, n_entities: usize) -> Self {
        DelayVector { n_agents, n_entities, d: vec![0; n_agents * n_entities] }
    }

    pub fn get(&self, agent: usize, entity: usize) -> u32 {
        self.d[agent * self.n_entities + entity]
    }

    pub fn set(&mut self, agent: usize, entity: usize, v: u32) {
        self.d[agent * self.n_entities + entity] = v;
    }

    pub fn row(&self, agent: usize) -> &[u32] {
        &self.d[agent * self.n_entities..(agent + 1) * self.n_entities]
    }

    pub fn entries(&self) -> &[u32] {
        &self.d
    }
}

/// Which (agent, entity) pairs may be delayed, derived from the schemas.
/// Entities not observed by an agent are marked non-delayable.
#[derive(Debug, Clone)]
pub struct DelayTopology {
    pub n_agents: usize,
    pub n_entities: usize,
    delayable: Vec<bool>,
}

impl DelayTopology {
    pub fn from_schemas(schemas: &[ObservationSchema]) -> Result<Self> {
        let n_agents = schemas.len();
        let n_entities = schemas
            .first()
            .map(|s| s.n_entities)
            .ok_or_else(|| config_err!("need at least one agent schema"))?;
        let mut delayable = vec![false; n_agents * n_entities];
        for (i, schema) in schemas.iter().enumerate() {
            schema.validate()?;
            if schema.n_entities != n_entities {
                return Err(config_err!("schemas disagree on the entity count"));
            }
            for g in &schema.groups {
                delayable[i * n_entities + g.owner] = g.delayable;
            }
        }
        Ok(DelayTopology { n_agents, n_entities, delayable })
    }

    pub fn is_delayable(&self, agent: usize, entity: usize) -> bool {
        self.delayable[agent * self.n_entities + entity]
    }
}

// ── sampling ─────────────────────────────────────────────────────────

/// Round half to even, spelled out so behavior is platform-independent.
pub fn round_half_even(x: f64) -> f64 {
    let f = libm::floor(x);
    let d = x - f;
    if d > 0.5 {
        f + 1.0
    } else if d < 0.5 {
        f
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    }
}

/// One draw from the configured distribution on `[lo, hi]`, before any
/// age-consistency or episode-start clamping.
pub fn sample_raw_delay(spec: &DelaySpec, rng: &mut Rng) -> u32 {
    let (lo, hi) = spec.range();
    match spec.distribution {
        DelayDistribution::Uniform => rng.random_range(lo..=hi),
        DelayDistribution::Binomial { n, p } => {
            let dist = rand_distr::Binomial::new(n as u64, p).expect("validated");
            let x = rand::Rng::sample(rng, dist) as u32;
            (lo + x).min(hi)
        }
        DelayDistribution::Poisson { lambda } => {
            let dist = rand_distr::Poisson::new(lambda).expect("validated");
            let x: f64 = rand::Rng::sample(rng, dist);
            (x as u32).clamp(lo, hi)
        }
        DelayDistribution::Normal { mu, sigma } => {
            let dist = rand_distr::Normal::new(mu, sigma).expect("validated");
            let x: f64 = rand::Rng::sample(rng, dist);
            round_half_even(x.clamp(lo as f64, hi as f64)) as u32
        }
    }
}

/// Sample the full delay matrix for step `t`.
///
/// Entries for non-delayable pairs are zero. Every other entry is drawn per
/// the mode, then clamped to `min(prev + 1, max_delay)` and to `t`.
pub fn sample_delay_vector(
    spec: &DelaySpec,
    topology: &DelayTopology,
    prev: Option<&DelayVector>,
    t: u32,
    rng: &mut Rng,
) -> Result<DelayVector> {
    spec.validate()?;
    if prev.is_none() != (t == 0) {
        return Err(config_err!("prev delay vector must be given exactly when t > 0"));
    }
    let mut out = DelayVector::zeros(topology.n_agents, topology.n_entities);
    for i in 0..topology.n_agents {
        for j in 0..topology.n_entities {
            if !topology.is_delayable(i, j) {
                continue;
            }
            let raw = match spec.mode {
                DelayMode::None => 0,
                DelayMode::Fixed => spec.value,
                DelayMode::PartiallyFixed => {
                    if rng.random_range(0.0..1.0) < spec.pf_fraction {
                        spec.value
                    } else {
                        0
                    }
                }
                DelayMode::Unfixed => sample_raw_delay(spec, rng),
            };
            let age_cap = match prev {
                Some(p) => (p.get(i, j) + 1).min(spec.max_delay),
                None => 0,
            };
            out.set(i, j, raw.min(spec.max_delay).min(age_cap).min(t));
        }
    }
    Ok(out)
}

// ── history and lookup ───────────────────────────────────────────────

/// Per-agent record of delay-free observations, one entry per episode step.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    steps: Vec<FactoredObservation>,
}

impl HistoryBuffer {
    /// Start a new episode with the step-0 observation.
    pub fn begin(initial: FactoredObservation) -> Self {
        HistoryBuffer { steps: vec![initial] }
    }

    pub fn push(&mut self, obs: FactoredObservation) {
        self.steps.push(obs);
    }

    /// Steps elapsed this episode plus one.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn at(&self, step: usize) -> Option<&FactoredObservation> {
        self.steps.get(step)
    }
}

/// Look up one agent's delayed observation at step `t`.
///
/// Delayable groups come verbatim from `history` at `t - d[owner]`;
/// non-delayable groups from step `t`.
pub fn apply_delay(
    history: &HistoryBuffer,
    d_row: &[u32],
    schema: &ObservationSchema,
    t: u32,
) -> Result<FactoredObservation> {
    if let Some(&bad) = d_row.iter().find(|&&d| d > t) {
        return Err(data_err!("delay {bad} exceeds step index {t}"));
    }
    let mut groups = Vec::with_capacity(schema.groups.len());
    for (g_idx, g) in schema.groups.iter().enumerate() {
        let source = if g.delayable { t - d_row[g.owner] } else { t };
        let obs = history.at(source as usize).ok_or_else(|| {
            CoreError::Invariant(alloc::format!(
                "history has {} steps but lookup wants step {source}",
                history.len()
            ))
        })?;
        groups.push(obs.groups[g_idx].clone());
    }
    Ok(FactoredObservation { groups })
}

/// Delayed observations for all agents; each agent reads only its own buffer.
pub fn delayed_joint_observation(
    histories: &[HistoryBuffer],
    d: &DelayVector,
    schemas: &[ObservationSchema],
    t: u32,
) -> Result<Vec<FactoredObservation>> {
    histories
        .iter()
        .zip(schemas)
        .enumerate()
        .map(|(i, (h, s))| apply_delay(h, d.row(i), s, t))
        .collect()
}

// ── extended state ───────────────────────────────────────────────────

/// Entity-factored global state: one feature vector per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredState {
    pub entities: Vec<Vec<f32>>,
}

/// Shift register of the last `max_delay + 1` factored states; index 0 is
/// the newest. Pushing shifts every state one lag older and drops the oldest.
#[derive(Debug, Clone)]
pub struct ExtendedState {
    window: VecDeque<FactoredState>,
    cap: usize,
}

impl ExtendedState {
    /// Fresh window at episode start: all slots hold the initial state.
    pub fn filled(max_delay: u32, initial: FactoredState) -> Self {
        let cap = max_delay as usize + 1;
        let mut window = VecDeque::with_capacity(cap);
        for _ in 0..cap {
            window.push_back(initial.clone());
        }
        ExtendedState { window, cap }
    }

    pub fn push(&mut self, s_new: FactoredState) {
        if self.window.len() == self.cap {
            self.window.pop_back();
        }
        self.window.push_front(s_new);
    }

    /// State at lag `k` (0 = newest).
    pub fn at_lag(&self, k: u32) -> &FactoredState {
        &self.window[k as usize]
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

// ── analytic observation probability ─────────────────────────────────

/// Exact delay pmf over 0..=max_delay implied by a spec, before any
/// age-consistency clamping (item 5 of the extended model definition).
pub fn delay_pmf(spec: &DelaySpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let t_max = spec.max_delay as usize;
    let mut pmf = vec![0.0f64; t_max + 1];
    let (lo, hi) = spec.range();
    match spec.mode {
        DelayMode::None => pmf[0] = 1.0,
        DelayMode::Fixed => pmf[spec.value as usize] = 1.0,
        DelayMode::PartiallyFixed => {
            pmf[0] += 1.0 - spec.pf_fraction;
            pmf[spec.value as usize] += spec.pf_fraction;
        }
        DelayMode::Unfixed => match spec.distribution {
            DelayDistribution::Uniform => {
                let mass = 1.0 / (hi - lo + 1) as f64;
                for p in &mut pmf[lo as usize..=hi as usize] {
                    *p = mass;
                }
            }
            DelayDistribution::Binomial { n, p } => {
                for k in 0..=n {
                    let val = (lo + k).min(hi) as usize;
                    pmf[val] += binomial_pmf(n, p, k);
                }
            }
            DelayDistribution::Poisson { lambda } => {
                let mut below = 0.0;
                for k in 0..=hi {
                    let pk = poisson_pmf(lambda, k);
                    pmf[k.clamp(lo, hi) as usize] += pk;
                    below += pk;
                }
                pmf[hi as usize] += (1.0 - below).max(0.0);
            }
            DelayDistribution::Normal { mu, sigma } => {
                for k in lo..=hi {
                    let upper = if k == hi { f64::INFINITY } else { k as f64 + 0.5 };
                    let lower = if k == lo { f64::NEG_INFINITY } else { k as f64 - 0.5 };
                    pmf[k as usize] += normal_cdf(upper, mu, sigma) - normal_cdf(lower, mu, sigma);
                }
            }
        },
    }
    Ok(pmf)
}

fn binomial_pmf(n: u32, p: f64, k: u32) -> f64 {
    let mut log_c = 0.0f64;
    for j in 0..k {
        log_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
    }
    (log_c + k as f64 * p.max(1e-300).ln() + (n - k) as f64 * (1.0 - p).max(1e-300).ln()).exp()
}

fn poisson_pmf(lambda: f64, k: u32) -> f64 {
    let mut log_fact = 0.0f64;
    for j in 1..=k {
        log_fact += (j as f64).ln();
    }
    (-lambda + k as f64 * lambda.ln() - log_fact).exp()
}

fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * (1.0 + libm::erf((x - mu) / (sigma * core::f64::consts::SQRT_2)))
}

/// Probability of the joint observation `z` given the state window, under
/// a deterministic inner observation function (content equals the entity's
/// state features), from pmfs indexed per entity.
///
/// Every delayable scalar must be discrete-typed; continuous scalars make
/// the instance non-enumerable.
pub fn analytic_observation_prob_pmf(
    window: &ExtendedState,
    z: &[FactoredObservation],
    schemas: &[ObservationSchema],
    entity_pmfs: &[Vec<f64>],
) -> Result<f64> {
    let mut prob = 1.0f64;
    for (obs, schema) in z.iter().zip(schemas) {
        for (g_idx, g) in schema.groups.iter().enumerate() {
            let content = &obs.groups[g_idx];
            if !g.delayable {
                // Non-delayable groups always show the newest state.
                if content != &window.at_lag(0).entities[g.owner] {
                    return Ok(0.0);
                }
                continue;
            }
            if g.kinds.iter().any(|k| matches!(k, FeatureKind::Continuous)) {
                return Err(CoreError::Unsupported(String::from(
                    "analytic observation probability wants an enumerable (all-discrete) schema",
                )));
            }
            let pmf = &entity_pmfs[g.owner];
            let mut mass = 0.0f64;
            for (t, &p) in pmf.iter().enumerate() {
                if t < window.window_len() && content == &window.at_lag(t as u32).entities[g.owner]
                {
                    mass += p;
                }
            }
            prob *= mass;
        }
    }
    Ok(prob)
}

/// [`analytic_observation_prob_pmf`] with per-entity delay specs.
pub fn analytic_observation_prob(
    window: &ExtendedState,
    z: &[FactoredObservation],
    schemas: &[ObservationSchema],
    entity_specs: &[DelaySpec],
) -> Result<f64> {
    let pmfs: Result<Vec<Vec<f64>>> = entity_specs.iter().map(delay_pmf).collect();
    analytic_observation_prob_pmf(window, z, schemas, &pmfs?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::{stream_rng, Stream};

    fn two_entity_schema() -> ObservationSchema {
        ObservationSchema {
            groups: vec![
                FeatureGroup {
                    name: String::from("self"),
                    owner: 0,
                    kinds: vec![FeatureKind::Discrete { classes: 4 }],
                    delayable: false,
                },
                FeatureGroup {
                    name: String::from("other"),
                    owner: 1,
                    kinds: vec![FeatureKind::Discrete { classes: 4 }],
                    delayable: true,
                },
            ],
            n_entities: 2,
        }
    }

    #[test]
    fn schema_validation_catches_duplicates_and_multiple_self_groups() {
        let mut s = two_entity_schema();
        assert!(s.validate().is_ok());
        s.groups[1].owner = 0;
        assert!(s.validate().is_err());
        let mut s = two_entity_schema();
        s.groups[1].delayable = false;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mode_none_gives_all_zeros() {
        let topo = DelayTopology::from_schemas(&[two_entity_schema()]).unwrap();
        let mut rng = stream_rng(0, Stream::Delays, 0);
        let d = sample_delay_vector(&DelaySpec::none(), &topo, None, 0, &mut rng).unwrap();
        assert!(d.entries().iter().all(|&v| v == 0));
    }

    #[test]
    fn fixed_delay_ramps_with_episode_start_clamp() {
        let topo = DelayTopology::from_schemas(&[two_entity_schema()]).unwrap();
        let spec = DelaySpec::fixed(2, 4);
        let mut rng = stream_rng(0, Stream::Delays, 0);
        let d0 = sample_delay_vector(&spec, &topo, None, 0, &mut rng).unwrap();
        assert_eq!(d0.get(0, 1), 0);
        let d1 = sample_delay_vector(&spec, &topo, Some(&d0), 1, &mut rng).unwrap();
        assert_eq!(d1.get(0, 1), 1);
        let d2 = sample_delay_vector(&spec, &topo, Some(&d1), 2, &mut rng).unwrap();
        assert_eq!(d2.get(0, 1), 2);
        let d3 = sample_delay_vector(&spec, &topo, Some(&d2), 3, &mut rng).unwrap();
        assert_eq!(d3.get(0, 1), 2);
        // Self entry is never delayed.
        assert_eq!(d3.get(0, 0), 0);
    }

    #[test]
    fn age_consistency_pins_feasible_set_to_prev_plus_one() {
        // Sampled in {1,2,3}, but prev = 0 caps it at 1: frequency of 1 is 1.0.
        let topo = DelayTopology::from_schemas(&[two_entity_schema()]).unwrap();
        let spec = DelaySpec::unfixed_uniform(2, 1, 4);
        let mut rng = stream_rng(1, Stream::Delays, 0);
        let prev = DelayVector::zeros(1, 2);
        for _ in 0..10_000 {
            let d = sample_delay_vector(&spec, &topo, Some(&prev), 10, &mut rng).unwrap();
            assert_eq!(d.get(0, 1), 1);
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut spec = DelaySpec::unfixed_uniform(2, 3, 9);
        assert!(matches!(spec.validate(), Err(CoreError::Config(_))));
        spec = DelaySpec::unfixed_uniform(6, 3, 5);
        assert!(matches!(spec.validate(), Err(CoreError::Config(_))));
        spec = DelaySpec::fixed(7, 5);
        assert!(matches!(spec.validate(), Err(CoreError::Config(_))));
        spec = DelaySpec::none();
        spec.pf_fraction = 1.5;
        assert!(matches!(spec.validate(), Err(CoreError::Config(_))));
    }

    fn obs1(v: f32, w: f32) -> FactoredObservation {
        FactoredObservation { groups: vec![vec![v], vec![w]] }
    }

    #[test]
    fn apply_delay_zero_is_identity_and_lookup_is_verbatim() {
        let schema = two_entity_schema();
        let mut history = HistoryBuffer::begin(obs1(0.0, 10.0));
        history.push(obs1(1.0, 11.0));
        history.push(obs1(2.0, 12.0));

        let fresh = apply_delay(&history, &[0, 0], &schema, 2).unwrap();
        assert_eq!(fresh, obs1(2.0, 12.0));

        let delayed = apply_delay(&history, &[0, 2], &schema, 2).unwrap();
        assert_eq!(delayed, obs1(2.0, 10.0));

        assert!(apply_delay(&history, &[0, 3], &schema, 2).is_err());
    }

    #[test]
    fn push_state_shift_register_semantics() {
        let s = |v: f32| FactoredState { entities: vec![vec![v]] };
        let mut x = ExtendedState::filled(2, s(0.0));
        x.push(s(1.0));
        x.push(s(2.0));
        x.push(s(3.0));
        assert_eq!(x.at_lag(0).entities[0][0], 3.0);
        assert_eq!(x.at_lag(1).entities[0][0], 2.0);
        assert_eq!(x.at_lag(2).entities[0][0], 1.0);
    }

    #[test]
    fn pmf_matches_degenerate_and_uniform_cases() {
        assert_eq!(delay_pmf(&DelaySpec::none()).unwrap(), vec![1.0, 0.0]);
        assert_eq!(delay_pmf(&DelaySpec::fixed(2, 3)).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let pmf = delay_pmf(&DelaySpec::unfixed_uniform(2, 1, 4)).unwrap();
        assert_eq!(pmf, vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn pmfs_sum_to_one_for_all_distributions() {
        let mut spec = DelaySpec::unfixed_uniform(6, 3, 12);
        for dist in [
            DelayDistribution::Binomial { n: 6, p: 0.5 },
            DelayDistribution::Poisson { lambda: 6.0 },
            DelayDistribution::Normal { mu: 6.0, sigma: 2.0 },
        ] {
            spec.distribution = dist;
            let pmf = delay_pmf(&spec).unwrap();
            let total: f64 = pmf.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "{dist:?} sums to {total}");
            let (lo, hi) = spec.range();
            for (k, &p) in pmf.iter().enumerate() {
                if (k as u32) < lo || (k as u32) > hi {
                    assert_eq!(p, 0.0, "{dist:?} leaks mass to {k}");
                }
            }
        }
    }

    #[test]
    fn plugin_samplers_stay_inside_the_range() {
        let mut spec = DelaySpec::unfixed_uniform(6, 3, 12);
        let mut rng = stream_rng(5, Stream::Delays, 0);
        for dist in [
            DelayDistribution::Uniform,
            DelayDistribution::Binomial { n: 6, p: 0.5 },
            DelayDistribution::Poisson { lambda: 6.0 },
            DelayDistribution::Normal { mu: 9.0, sigma: 2.0 },
        ] {
            spec.distribution = dist;
            for _ in 0..5_000 {
                let v = sample_raw_delay(&spec, &mut rng);
                assert!((3..=9).contains(&v), "{dist:?} produced {v}");
            }
        }
    }

    #[test]
    fn round_half_even_ties() {
        assert_eq!(round_half_even(0.5), 0.0);
        assert_eq!(round_half_even(1.5), 2.0);
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(2.4), 2.0);
        assert_eq!(round_half_even(2.6), 3.0);
    }

    #[test]
    fn analytic_prob_degenerate_window_and_two_point_support() {
        let schema = two_entity_schema();
        let s = |a: f32, b: f32| FactoredState { entities: vec![vec![a], vec![b]] };

        // All states identical: the only consistent z has probability 1.
        let window = ExtendedState::filled(2, s(1.0, 7.0));
        let pmfs = vec![vec![1.0, 0.0, 0.0], vec![0.2, 0.5, 0.3]];
        let z = vec![obs1(1.0, 7.0)];
        let p = analytic_observation_prob_pmf(&window, &z, &[schema.clone()], &pmfs).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        let z = vec![obs1(1.0, 8.0)];
        let p = analytic_observation_prob_pmf(&window, &z, &[schema.clone()], &pmfs).unwrap();
        assert_eq!(p, 0.0);

        // T=1, p(0)=p(1)=0.5, differing entity values: each value has prob 0.5.
        let mut window = ExtendedState::filled(1, s(1.0, 7.0));
        window.push(s(1.0, 9.0));
        let pmfs = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        for want in [7.0f32, 9.0] {
            let z = vec![obs1(1.0, want)];
            let p = analytic_observation_prob_pmf(&window, &z, &[schema.clone()], &pmfs).unwrap();
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_prob_rejects_continuous_delayable_scalars() {
        let mut schema = two_entity_schema();
        schema.groups[1].kinds = vec![FeatureKind::Continuous];
        let window =
            ExtendedState::filled(1, FactoredState { entities: vec![vec![0.0], vec![0.0]] });
        let z = vec![obs1(0.0, 0.0)];
        let pmfs = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        assert!(matches!(
            analytic_observation_prob_pmf(&window, &z, &[schema], &pmfs),
            Err(CoreError::Unsupported(_))
        ));
    }
}
