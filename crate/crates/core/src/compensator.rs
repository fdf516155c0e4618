//! Flash and Echo delay compensators.
//!
//! Both reconstruct a delay-free observation from the delayed one. Flash is
//! single-shot: it encodes a fixed window of past delayed observations,
//! actions and normalized delay values, then emits one dual-head residual.
//! Echo is autoregressive: after the same warmup encoding (with binary
//! delay markers), it refines the observation for exactly `max_delay` steps,
//! advancing only the entities whose delay is still pending and copying
//! already-compensated content through unchanged.
//!
//! The dual heads split the delayable content by type: continuous scalars
//! get an additive residual trained with MSE, discrete scalars get 3-class
//! difference logits over {-1, 0, +1} trained with weighted cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::config::CompensatorMode;
use crate::delay::{DelayVector, FactoredObservation, FeatureKind, ObservationSchema};
use crate::error::config_err;
use crate::nn::{mse, GruCell, Linear, ParamBinder, ParamSet};
use crate::rngs::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

// ── io layout ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscSlot {
    /// Flat observation column.
    pub col: usize,
    pub classes: u32,
    /// Index into `delayable_entities`.
    pub entity: usize,
}

/// Mapping from an observation schema to compensator inputs and outputs.
#[derive(Debug, Clone)]
pub struct CompLayout {
    pub obs_width: usize,
    pub n_actions: usize,
    /// Entity ids with a delayable group, in schema group order.
    pub delayable_entities: Vec<usize>,
    /// Flat columns of continuous delayable scalars.
    pub float_slots: Vec<usize>,
    /// Index into `delayable_entities` per float slot.
    pub float_entity: Vec<usize>,
    pub disc_slots: Vec<DiscSlot>,
}

impl CompLayout {
    pub fn new(schema: &ObservationSchema, n_actions: usize) -> Result<Self> {
        schema.validate()?;
        let ranges = schema.group_ranges();
        let mut delayable_entities = Vec::new();
        let mut float_slots = Vec::new();
        let mut float_entity = Vec::new();
        let mut disc_slots = Vec::new();
        for (g, (start, _)) in schema.groups.iter().zip(ranges) {
            if !g.delayable {
                continue;
            }
            let entity_idx = delayable_entities.len();
            delayable_entities.push(g.owner);
            for (k, kind) in g.kinds.iter().enumerate() {
                match kind {
                    FeatureKind::Continuous => {
                        float_slots.push(start + k);
                        float_entity.push(entity_idx);
                    }
                    FeatureKind::Discrete { classes } => {
                        disc_slots.push(DiscSlot {
                            col: start + k,
                            classes: *classes,
                            entity: entity_idx,
                        });
                    }
                }
            }
        }
        Ok(CompLayout {
            obs_width: schema.width(),
            n_actions,
            delayable_entities,
            float_slots,
            float_entity,
            disc_slots,
        })
    }

    pub fn n_float(&self) -> usize {
        self.float_slots.len()
    }

    pub fn n_disc(&self) -> usize {
        self.disc_slots.len()
    }

    pub fn n_delayable(&self) -> usize {
        self.delayable_entities.len()
    }

    /// obs, one-hot own action, per-entity delay code, validity bit.
    pub fn token_width(&self) -> usize {
        self.obs_width + self.n_actions + self.n_delayable() + 1
    }
}

// ── model ────────────────────────────────────────────────────────────

/// One GRU layer framed by three linear layers: an input embedding and the
/// two residual heads.
#[derive(Debug, Clone)]
pub struct CompensatorNet {
    pub embed: Linear,
    pub gru: GruCell,
    pub head_float: Linear,
    pub head_disc: Linear,
    pub hidden: usize,
}

impl CompensatorNet {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        name: &str,
        layout: &CompLayout,
        hidden: usize,
    ) -> Self {
        let embed =
            Linear::new(ps, rng, &alloc::format!("{name}.embed"), layout.token_width(), hidden);
        let gru = GruCell::new(ps, rng, &alloc::format!("{name}.gru"), hidden, hidden);
        let head_float = Linear::new(
            ps,
            rng,
            &alloc::format!("{name}.head_float"),
            hidden,
            layout.n_float().max(1),
        );
        let head_disc = Linear::new(
            ps,
            rng,
            &alloc::format!("{name}.head_disc"),
            hidden,
            (3 * layout.n_disc()).max(1),
        );
        CompensatorNet { embed, gru, head_float, head_disc, hidden }
    }

    fn consume<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_, F>,
        token: Var,
        hidden: Var,
    ) -> Result<Var> {
        let x = self.embed.forward(tape, binder, token)?;
        let x = tape.relu(x);
        self.gru.forward(tape, binder, x, hidden)
    }

    fn heads<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binder: &mut ParamBinder<'_, F>,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        let float_res = self.head_float.forward(tape, binder, hidden)?;
        let disc_logits = self.head_disc.forward(tape, binder, hidden)?;
        Ok((float_res, disc_logits))
    }
}

// ── input construction ───────────────────────────────────────────────

/// Borrowed view of everything a compensation sample needs from an episode.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    /// Delayed observations of this agent, steps 0..=t.
    pub delayed: &'a [FactoredObservation],
    /// Delay-free observations of this agent, steps 0..=t.
    pub delay_free: &'a [FactoredObservation],
    /// Actions taken by this agent, steps 0..t.
    pub actions: &'a [usize],
    /// Sampled delay matrices, steps 0..=t.
    pub delays: &'a [DelayVector],
    pub agent: usize,
    pub t: usize,
}

/// Windowed input for one sample: `history_len + 1` fixed tokens plus the
/// current per-entity delays driving Echo's masks.
#[derive(Debug, Clone)]
pub struct CompensatorInput {
    pub tokens: Vec<Vec<f32>>,
    /// Current delay per delayable entity, in layout order.
    pub d_row: Vec<u32>,
    /// Flattened current delayed observation.
    pub delayed_flat: Vec<f32>,
}

/// Build one sample's fixed input window. Steps before the episode are
/// zero-padded with their validity bit cleared. Each token is the delayed
/// observation, the agent's own previous action one-hot, the delay encoding
/// (normalized values for Flash, binary markers for Echo), and a validity
/// bit, in that order.
pub fn build_input(
    view: &SampleView<'_>,
    layout: &CompLayout,
    history_len: u32,
    mode: CompensatorMode,
    t_model: u32,
) -> CompensatorInput {
    let tw = layout.token_width();
    let mut tokens = Vec::with_capacity(history_len as usize + 1);
    for offset in (0..=history_len as i64).rev() {
        let step = view.t as i64 - offset;
        if step < 0 {
            tokens.push(vec![0.0; tw]);
            continue;
        }
        let step = step as usize;
        let mut tok = Vec::with_capacity(tw);
        tok.extend(view.delayed[step].flatten());
        let mut action = vec![0.0f32; layout.n_actions];
        if step >= 1 {
            action[view.actions[step - 1]] = 1.0;
        }
        tok.extend(action);
        for &entity in &layout.delayable_entities {
            let d = view.delays[step].get(view.agent, entity);
            tok.push(match mode {
                CompensatorMode::Echo => {
                    if d > 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => d as f32 / t_model.max(1) as f32,
            });
        }
        tok.push(1.0);
        tokens.push(tok);
    }
    let d_row: Vec<u32> = layout
        .delayable_entities
        .iter()
        .map(|&e| view.delays[view.t].get(view.agent, e))
        .collect();
    CompensatorInput { tokens, d_row, delayed_flat: view.delayed[view.t].flatten() }
}

/// Column-aligned batch of sample inputs.
#[derive(Debug, Clone)]
pub struct BatchedInputs {
    pub n: usize,
    /// Per window position: [n, token_width].
    pub warmup: Vec<Tensor<f32>>,
    pub d_rows: Vec<Vec<u32>>,
    pub delayed_flat: Vec<Vec<f32>>,
}

pub fn batch_inputs(inputs: &[CompensatorInput], layout: &CompLayout) -> Result<BatchedInputs> {
    let n = inputs.len();
    if n == 0 {
        return Err(config_err!("empty compensator batch"));
    }
    let positions = inputs[0].tokens.len();
    let tw = layout.token_width();
    let mut warmup = Vec::with_capacity(positions);
    for p in 0..positions {
        let mut data = Vec::with_capacity(n * tw);
        for input in inputs {
            data.extend_from_slice(&input.tokens[p]);
        }
        warmup.push(Tensor::from_vec(&[n, tw], data)?);
    }
    Ok(BatchedInputs {
        n,
        warmup,
        d_rows: inputs.iter().map(|i| i.d_row.clone()).collect(),
        delayed_flat: inputs.iter().map(|i| i.delayed_flat.clone()).collect(),
    })
}

// ── targets ──────────────────────────────────────────────────────────

/// Ground-truth ladder for a batch: rung k holds, per entity, the entity's
/// features at environment step `t - max(d - k, 0)`, so rung 0 is the
/// delayed observation and the last rung the delay-free one.
#[derive(Debug, Clone)]
pub struct CompensationTargets {
    pub t_steps: u32,
    pub n: usize,
    /// Per step k in 1..=t_steps: residual targets, [n * n_float].
    pub float_targets: Vec<Vec<f32>>,
    /// Per step k: difference classes (0 => -1, 1 => 0, 2 => +1), [n * n_disc].
    pub disc_targets: Vec<Vec<usize>>,
    /// Per step k: 1.0 while the entity is still pending (d >= k), else 0.0.
    pub float_mask: Vec<Vec<f32>>,
    pub disc_mask: Vec<Vec<f32>>,
    /// Ladder of absolute values, k in 0..=t_steps.
    pub gt_float: Vec<Vec<f32>>,
    pub gt_disc: Vec<Vec<f32>>,
}

/// Build the target ladder for a batch of samples. `layouts` is indexed by
/// agent id; all layouts share one structure, only entity ids differ.
pub fn make_targets(
    views: &[SampleView<'_>],
    layouts: &[CompLayout],
    t_steps: u32,
) -> Result<CompensationTargets> {
    let n = views.len();
    let (nf, nd) = (layouts[0].n_float(), layouts[0].n_disc());
    let mut gt_float = vec![vec![0.0f32; n * nf]; t_steps as usize + 1];
    let mut gt_disc = vec![vec![0.0f32; n * nd]; t_steps as usize + 1];

    for (s, view) in views.iter().enumerate() {
        let layout = &layouts[view.agent];
        let flats: Vec<Vec<f32>> = view.delay_free.iter().map(|o| o.flatten()).collect();
        for k in 0..=t_steps {
            let source: Vec<usize> = layout
                .delayable_entities
                .iter()
                .map(|&e| {
                    let d = view.delays[view.t].get(view.agent, e);
                    view.t - d.saturating_sub(k) as usize
                })
                .collect();
            for (f, (&col, &ent)) in
                layout.float_slots.iter().zip(&layout.float_entity).enumerate()
            {
                gt_float[k as usize][s * nf + f] = flats[source[ent]][col];
            }
            for (dslot, slot) in layout.disc_slots.iter().enumerate() {
                gt_disc[k as usize][s * nd + dslot] = flats[source[slot.entity]][slot.col];
            }
        }
    }

    let mut float_targets = Vec::new();
    let mut disc_targets = Vec::new();
    let mut float_mask = Vec::new();
    let mut disc_mask = Vec::new();
    for k in 1..=t_steps as usize {
        let ft: Vec<f32> = gt_float[k].iter().zip(&gt_float[k - 1]).map(|(a, b)| a - b).collect();
        let dt: Vec<usize> = gt_disc[k]
            .iter()
            .zip(&gt_disc[k - 1])
            .map(|(a, b)| ((a - b) as i32 + 1).clamp(0, 2) as usize)
            .collect();
        let mut fm = vec![0.0f32; n * nf];
        let mut dm = vec![0.0f32; n * nd];
        for (s, view) in views.iter().enumerate() {
            let layout = &layouts[view.agent];
            let pending: Vec<bool> = layout
                .delayable_entities
                .iter()
                .map(|&e| view.delays[view.t].get(view.agent, e) >= k as u32)
                .collect();
            for (f, &ent) in layout.float_entity.iter().enumerate() {
                fm[s * nf + f] = if pending[ent] { 1.0 } else { 0.0 };
            }
            for (dslot, slot) in layout.disc_slots.iter().enumerate() {
                dm[s * nd + dslot] = if pending[slot.entity] { 1.0 } else { 0.0 };
            }
        }
        float_targets.push(ft);
        disc_targets.push(dt);
        float_mask.push(fm);
        disc_mask.push(dm);
    }
    Ok(CompensationTargets {
        t_steps,
        n,
        float_targets,
        disc_targets,
        float_mask,
        disc_mask,
        gt_float,
        gt_disc,
    })
}

/// Flash trains on the total difference: delay-free minus delayed.
#[derive(Debug, Clone)]
pub struct FlashTargets {
    pub float_targets: Vec<f32>,
    pub disc_targets: Vec<usize>,
    pub n: usize,
}

pub fn make_flash_targets(targets: &CompensationTargets) -> FlashTargets {
    let last = targets.t_steps as usize;
    let float_targets: Vec<f32> =
        targets.gt_float[last].iter().zip(&targets.gt_float[0]).map(|(a, b)| a - b).collect();
    let disc_targets: Vec<usize> = targets.gt_disc[last]
        .iter()
        .zip(&targets.gt_disc[0])
        .map(|(a, b)| ((a - b) as i32 + 1).clamp(0, 2) as usize)
        .collect();
    FlashTargets { float_targets, disc_targets, n: targets.n }
}

// ── forward passes ───────────────────────────────────────────────────

/// Run the warmup window and return the dual-head outputs.
pub fn flash_heads<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<'_, F>,
    net: &CompensatorNet,
    inputs: &BatchedInputs,
) -> Result<(Var, Var)> {
    let mut hidden = tape.constant(Tensor::zeros(&[inputs.n, net.hidden]));
    for tok in &inputs.warmup {
        let tok = tape.constant(tok.cast::<F>());
        hidden = net.consume(tape, binder, tok, hidden)?;
    }
    net.heads(tape, binder, hidden)
}

/// Apply dual-head outputs to the delayed observation: continuous slots add
/// the residual, discrete slots add (argmax class - 1) clamped to the class
/// range, everything else passes through untouched.
pub fn reconstruct_flash(
    layout: &CompLayout,
    delayed_flat: &[Vec<f32>],
    float_res: &[f32],
    disc_logits: &[f32],
) -> Vec<Vec<f32>> {
    let (nf, nd) = (layout.n_float(), layout.n_disc());
    delayed_flat
        .iter()
        .enumerate()
        .map(|(s, flat)| {
            let mut out = flat.clone();
            for (f, &col) in layout.float_slots.iter().enumerate() {
                out[col] += float_res[s * nf.max(1) + f];
            }
            for (dslot, slot) in layout.disc_slots.iter().enumerate() {
                let logits = &disc_logits[s * 3 * nd.max(1) + dslot * 3..][..3];
                let cls = argmax3(logits) as i32 - 1;
                let v = (out[slot.col] as i32 + cls).clamp(0, slot.classes as i32 - 1);
                out[slot.col] = v as f32;
            }
            out
        })
        .collect()
}

fn argmax3(v: &[f32]) -> usize {
    let mut best = 0;
    if v[1] > v[best] {
        best = 1;
    }
    if v[2] > v[best] {
        best = 2;
    }
    best
}

/// Per-refinement-step observable outputs of an Echo rollout.
pub struct EchoStep {
    pub float_res: Var,
    pub disc_logits: Var,
    pub float_mask: Vec<f32>,
    pub disc_mask: Vec<f32>,
}

pub struct EchoOut {
    pub steps: Vec<EchoStep>,
    /// Reconstructed observations (the final refinement), one per sample.
    pub recon: Vec<Vec<f32>>,
}

/// Teacher-forcing control for training rollouts.
pub enum Feedback<'a> {
    /// Feed the model its own outputs (inference and default training).
    OwnOutputs,
    /// With probability `p` per step, feed the ground-truth ladder instead.
    TeacherForced { targets: &'a CompensationTargets, p: f64, rng: &'a mut Rng },
}

/// Run exactly `t_steps` masked refinement steps.
///
/// Entities whose delay is exhausted (d <= k-1) are copied through
/// unchanged; pending entities receive the masked float residual and the
/// argmax difference class. The pending binary vector is recomputed each
/// step and fed back inside the next token.
pub fn echo_rollout<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<'_, F>,
    net: &CompensatorNet,
    layout: &CompLayout,
    inputs: &BatchedInputs,
    t_steps: u32,
    mut feedback: Feedback<'_>,
) -> Result<EchoOut> {
    let n = inputs.n;
    let (nf, nd) = (layout.n_float(), layout.n_disc());
    let tw = layout.token_width();

    let mut hidden = tape.constant(Tensor::zeros(&[n, net.hidden]));
    for tok in &inputs.warmup {
        let tok = tape.constant(tok.cast::<F>());
        hidden = net.consume(tape, binder, tok, hidden)?;
    }

    // Differentiable float content; discrete content evolves as plain data.
    let mut float_state = if nf > 0 {
        let init: Vec<F> = inputs
            .delayed_flat
            .iter()
            .flat_map(|flat| layout.float_slots.iter().map(|&c| F::from_f32(flat[c])))
            .collect();
        Some(tape.constant(Tensor::from_vec(&[n, nf], init)?))
    } else {
        None
    };
    let mut disc_state: Vec<Vec<f32>> = inputs
        .delayed_flat
        .iter()
        .map(|flat| layout.disc_slots.iter().map(|s| flat[s.col]).collect())
        .collect();

    let mut steps = Vec::with_capacity(t_steps as usize);
    for k in 1..=t_steps {
        // Pending = delay not yet exhausted at this refinement step.
        let pending: Vec<Vec<bool>> =
            inputs.d_rows.iter().map(|ds| ds.iter().map(|&d| d >= k).collect()).collect();
        let mut float_mask = vec![0.0f32; n * nf.max(1)];
        let mut disc_mask = vec![0.0f32; n * nd.max(1)];
        for (s, p) in pending.iter().enumerate() {
            for (f, &ent) in layout.float_entity.iter().enumerate() {
                float_mask[s * nf + f] = if p[ent] { 1.0 } else { 0.0 };
            }
            for (d, slot) in layout.disc_slots.iter().enumerate() {
                disc_mask[s * nd + d] = if p[slot.entity] { 1.0 } else { 0.0 };
            }
        }

        // Token: current reconstruction with the float slots from the graph.
        let mut const_part = vec![0.0f32; n * tw];
        for s in 0..n {
            let row = &mut const_part[s * tw..(s + 1) * tw];
            row[..layout.obs_width].copy_from_slice(&inputs.delayed_flat[s]);
            for &col in &layout.float_slots {
                row[col] = 0.0;
            }
            for (d, slot) in layout.disc_slots.iter().enumerate() {
                row[slot.col] = disc_state[s][d];
            }
            // Action slots stay zero during refinement.
            for (e, p) in pending[s].iter().enumerate() {
                row[layout.obs_width + layout.n_actions + e] = if *p { 1.0 } else { 0.0 };
            }
            row[tw - 1] = 1.0;
        }
        let const_part = tape.constant(Tensor::from_vec(&[n, tw], const_part)?.cast::<F>());
        let token = match float_state {
            Some(fs) => {
                let scattered = tape.scatter_cols(fs, &layout.float_slots, tw)?;
                tape.add(scattered, const_part)?
            }
            None => const_part,
        };

        hidden = net.consume(tape, binder, token, hidden)?;
        let (float_res, disc_logits) = net.heads(tape, binder, hidden)?;

        // Masked state update: compensated entities are copied unchanged.
        if let Some(fs) = float_state {
            let mask =
                tape.constant(Tensor::from_vec(&[n, nf], float_mask.clone())?.cast::<F>());
            let masked = tape.mul(float_res, mask)?;
            float_state = Some(tape.add(fs, masked)?);
        }
        if nd > 0 {
            let logits = tape.data(disc_logits).to_vec();
            for s in 0..n {
                for (d, slot) in layout.disc_slots.iter().enumerate() {
                    if disc_mask[s * nd + d] == 0.0 {
                        continue;
                    }
                    let l: Vec<f32> = logits[s * 3 * nd + d * 3..][..3]
                        .iter()
                        .map(|v| v.as_f64() as f32)
                        .collect();
                    let cls = argmax3(&l) as i32 - 1;
                    let v = (disc_state[s][d] as i32 + cls).clamp(0, slot.classes as i32 - 1);
                    disc_state[s][d] = v as f32;
                }
            }
        }

        steps.push(EchoStep { float_res, disc_logits, float_mask, disc_mask });

        // Teacher forcing rewrites the next-step input with the ladder rung.
        if let Feedback::TeacherForced { targets, p, rng } = &mut feedback {
            if k < t_steps && teacher_forcing_gate(*p, rng) {
                let rung = k as usize;
                if nf > 0 {
                    let data: Vec<F> =
                        targets.gt_float[rung].iter().map(|&v| F::from_f32(v)).collect();
                    float_state = Some(tape.constant(Tensor::from_vec(&[n, nf], data)?));
                }
                for s in 0..n {
                    for d in 0..nd {
                        disc_state[s][d] = targets.gt_disc[rung][s * nd + d];
                    }
                }
            }
        }
    }

    // Assemble reconstructions: non-delayable content passes through.
    let float_vals: Vec<f32> = match float_state {
        Some(fs) => tape.data(fs).iter().map(|v| v.as_f64() as f32).collect(),
        None => vec![],
    };
    let recon = inputs
        .delayed_flat
        .iter()
        .enumerate()
        .map(|(s, flat)| {
            let mut out = flat.clone();
            for (f, &col) in layout.float_slots.iter().enumerate() {
                out[col] = float_vals[s * nf + f];
            }
            for (d, slot) in layout.disc_slots.iter().enumerate() {
                out[slot.col] = disc_state[s][d];
            }
            out
        })
        .collect();

    Ok(EchoOut { steps, recon })
}

// ── losses ───────────────────────────────────────────────────────────

/// Inverse-frequency class weights with the frequency floored at 0.1, so
/// the dominant "no change" class cannot drown the moving ones.
pub fn class_weights(targets: &[usize], mask: Option<&[f32]>) -> [f64; 3] {
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if mask.is_none_or(|m| m[i] != 0.0) {
            counts[t] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return [1.0; 3];
    }
    core::array::from_fn(|c| {
        let freq = counts[c] as f64 / total as f64;
        1.0 / freq.max(0.1)
    })
}

fn ce_term<F: Scalar>(
    tape: &mut Tape<F>,
    disc_logits: Var,
    targets: &[usize],
    mask: Option<&[f32]>,
) -> Result<Var> {
    let rows = targets.len();
    let logits = tape.reshape(disc_logits, &[rows, 3])?;
    let weights = class_weights(targets, mask);
    let sample_w: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| mask.map_or(1.0, |m| m[i] as f64) * weights[t])
        .collect();
    let norm: f64 = sample_w.iter().sum();
    tape.softmax_ce(logits, targets, &sample_w, norm)
}

/// Flash loss: class-weighted CE on the 3-class differences plus MSE on the
/// float residuals, each averaged over the delayable scalars.
pub fn flash_loss<F: Scalar>(
    tape: &mut Tape<F>,
    float_res: Var,
    disc_logits: Var,
    targets: &FlashTargets,
    ce_weight: f64,
) -> Result<Var> {
    let n = targets.n;
    let nf = targets.float_targets.len() / n.max(1);
    let mut loss = if nf > 0 {
        let tgt: Vec<F> = targets.float_targets.iter().map(|&v| F::from_f32(v)).collect();
        let tgt = tape.constant(Tensor::from_vec(&[n, nf], tgt)?);
        mse(tape, float_res, tgt, None)?
    } else {
        tape.constant_scalar(F::zero())
    };
    if !targets.disc_targets.is_empty() {
        let ce = ce_term(tape, disc_logits, &targets.disc_targets, None)?;
        let ce = tape.scale(ce, ce_weight);
        loss = tape.add(loss, ce)?;
    }
    Ok(loss)
}

/// Echo loss: mean over the refinement steps of the masked per-step CE+MSE;
/// fully-masked steps contribute zero.
pub fn echo_loss<F: Scalar>(
    tape: &mut Tape<F>,
    steps: &[EchoStep],
    targets: &CompensationTargets,
    ce_weight: f64,
) -> Result<Var> {
    let n = targets.n;
    let mut total = tape.constant_scalar(F::zero());
    for (k, step) in steps.iter().enumerate() {
        let nf = targets.float_targets[k].len() / n.max(1);
        let mut step_loss = if nf > 0 {
            let tgt: Vec<F> = targets.float_targets[k].iter().map(|&v| F::from_f32(v)).collect();
            let tgt = tape.constant(Tensor::from_vec(&[n, nf], tgt)?);
            let mask =
                tape.constant(Tensor::from_vec(&[n, nf], step.float_mask.clone())?.cast::<F>());
            mse(tape, step.float_res, tgt, Some(mask))?
        } else {
            tape.constant_scalar(F::zero())
        };
        if !targets.disc_targets[k].is_empty() {
            let ce =
                ce_term(tape, step.disc_logits, &targets.disc_targets[k], Some(&step.disc_mask))?;
            let ce = tape.scale(ce, ce_weight);
            step_loss = tape.add(step_loss, ce)?;
        }
        total = tape.add(total, step_loss)?;
    }
    Ok(tape.scale(total, 1.0 / steps.len().max(1) as f64))
}

/// Per-step teacher-forcing gate.
pub fn teacher_forcing_gate(p: f64, rng: &mut Rng) -> bool {
    p > 0.0 && rng.random_range(0.0..1.0) < p
}

// ── bundled compensator ──────────────────────────────────────────────

/// A compensator wired to one schema, with its mode and window sizes.
#[derive(Debug, Clone)]
pub struct Compensator {
    pub mode: CompensatorMode,
    pub net: CompensatorNet,
    /// One layout per agent; they share widths and slot structure.
    pub layouts: Vec<CompLayout>,
    /// Delay bound the model was built for: Echo's refinement count and
    /// Flash's delay normalization.
    pub t_model: u32,
    pub history_len: u32,
    pub ce_weight: f64,
}

impl Compensator {
    /// Structural layout (widths and slots) shared by every agent.
    pub fn structural(&self) -> &CompLayout {
        &self.layouts[0]
    }

    /// Reconstruct a batch of observations with the current parameters; no
    /// gradients, teacher forcing off.
    pub fn reconstruct(
        &self,
        params: &ParamSet<f32>,
        views: &[SampleView<'_>],
    ) -> Result<Vec<Vec<f32>>> {
        let inputs: Vec<CompensatorInput> = views
            .iter()
            .map(|v| {
                build_input(v, &self.layouts[v.agent], self.history_len, self.mode, self.t_model)
            })
            .collect();
        let batch = batch_inputs(&inputs, self.structural())?;
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(params);
        match self.mode {
            CompensatorMode::None => Ok(batch.delayed_flat),
            CompensatorMode::Flash => {
                let (float_res, disc_logits) =
                    flash_heads(&mut tape, &mut binder, &self.net, &batch)?;
                let fr = tape.data(float_res).to_vec();
                let dl = tape.data(disc_logits).to_vec();
                Ok(reconstruct_flash(self.structural(), &batch.delayed_flat, &fr, &dl))
            }
            CompensatorMode::Echo => {
                let out = echo_rollout(
                    &mut tape,
                    &mut binder,
                    &self.net,
                    self.structural(),
                    &batch,
                    self.t_model,
                    Feedback::OwnOutputs,
                )?;
                Ok(out.recon)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::FeatureGroup;
    use crate::rngs::{stream_rng, Stream};
    use alloc::string::String;

    fn schema() -> ObservationSchema {
        ObservationSchema {
            groups: vec![
                FeatureGroup {
                    name: String::from("self"),
                    owner: 0,
                    kinds: vec![FeatureKind::Continuous; 2],
                    delayable: false,
                },
                FeatureGroup {
                    name: String::from("ally"),
                    owner: 1,
                    kinds: vec![
                        FeatureKind::Continuous,
                        FeatureKind::Continuous,
                        FeatureKind::Discrete { classes: 2 },
                    ],
                    delayable: true,
                },
                FeatureGroup {
                    name: String::from("landmark"),
                    owner: 2,
                    kinds: vec![FeatureKind::Continuous, FeatureKind::Discrete { classes: 2 }],
                    delayable: true,
                },
            ],
            n_entities: 3,
        }
    }

    fn obs(vals: [f32; 7]) -> FactoredObservation {
        FactoredObservation {
            groups: vec![vals[0..2].to_vec(), vals[2..5].to_vec(), vals[5..7].to_vec()],
        }
    }

    struct Episode {
        delayed: Vec<FactoredObservation>,
        delay_free: Vec<FactoredObservation>,
        actions: Vec<usize>,
        delays: Vec<DelayVector>,
    }

    fn three_step_episode() -> Episode {
        // Entity 1 floats march by +1 per step, flag flips at step 2;
        // entity 2 float marches by -1, flag constant.
        let delay_free = vec![
            obs([0.0, 0.0, 0.0, 10.0, 0.0, 5.0, 1.0]),
            obs([0.5, 0.0, 1.0, 11.0, 0.0, 4.0, 1.0]),
            obs([1.0, 0.0, 2.0, 12.0, 1.0, 3.0, 1.0]),
        ];
        let mut delays = Vec::new();
        let d0 = DelayVector::zeros(1, 3);
        delays.push(d0);
        let mut d1 = DelayVector::zeros(1, 3);
        d1.set(0, 1, 1);
        d1.set(0, 2, 1);
        delays.push(d1);
        let mut d2 = DelayVector::zeros(1, 3);
        d2.set(0, 1, 2);
        d2.set(0, 2, 1);
        delays.push(d2);
        // Delayed observations: groups pulled from older delay-free steps.
        let delayed = vec![
            delay_free[0].clone(),
            FactoredObservation {
                groups: vec![
                    delay_free[1].groups[0].clone(),
                    delay_free[0].groups[1].clone(),
                    delay_free[0].groups[2].clone(),
                ],
            },
            FactoredObservation {
                groups: vec![
                    delay_free[2].groups[0].clone(),
                    delay_free[0].groups[1].clone(),
                    delay_free[1].groups[2].clone(),
                ],
            },
        ];
        Episode { delayed, delay_free, actions: vec![1, 2], delays }
    }

    fn view(ep: &Episode, t: usize) -> SampleView<'_> {
        SampleView {
            delayed: &ep.delayed[..=t],
            delay_free: &ep.delay_free[..=t],
            actions: &ep.actions[..t],
            delays: &ep.delays[..=t],
            agent: 0,
            t,
        }
    }

    #[test]
    fn input_window_pads_before_episode_start() {
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let ep = three_step_episode();
        let input = build_input(&view(&ep, 0), &layout, 3, CompensatorMode::Flash, 3);
        assert_eq!(input.tokens.len(), 4);
        for tok in &input.tokens[..3] {
            assert!(tok.iter().all(|&v| v == 0.0));
        }
        let last = input.tokens.last().unwrap();
        assert_eq!(*last.last().unwrap(), 1.0);

        // At t >= history length there is no padding.
        let input = build_input(&view(&ep, 2), &layout, 2, CompensatorMode::Flash, 3);
        assert!(input.tokens.iter().all(|t| *t.last().unwrap() == 1.0));
    }

    #[test]
    fn flash_input_normalizes_delays_and_echo_binarizes() {
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let ep = three_step_episode();
        let flash = build_input(&view(&ep, 2), &layout, 0, CompensatorMode::Flash, 4);
        let tok = &flash.tokens[0];
        let base = layout.obs_width + layout.n_actions;
        assert_eq!(tok[base], 2.0 / 4.0);
        assert_eq!(tok[base + 1], 1.0 / 4.0);
        let echo = build_input(&view(&ep, 2), &layout, 0, CompensatorMode::Echo, 4);
        assert_eq!(echo.tokens[0][base], 1.0);
        assert_eq!(echo.tokens[0][base + 1], 1.0);
    }

    #[test]
    fn target_ladder_ends_at_delay_free_and_static_targets_are_zero() {
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let ep = three_step_episode();
        let v = view(&ep, 2);
        let targets = make_targets(&[v], core::slice::from_ref(&layout), 3).unwrap();
        // The last rung equals the delay-free observation.
        let df = ep.delay_free[2].flatten();
        let floats: Vec<f32> = layout.float_slots.iter().map(|&c| df[c]).collect();
        assert_eq!(targets.gt_float[3], floats);
        let discs: Vec<f32> = layout.disc_slots.iter().map(|s| df[s.col]).collect();
        assert_eq!(targets.gt_disc[3], discs);

        // Rung zero is the delayed observation itself.
        let dl = ep.delayed[2].flatten();
        let floats0: Vec<f32> = layout.float_slots.iter().map(|&c| dl[c]).collect();
        assert_eq!(targets.gt_float[0], floats0);

        // A static episode has all-zero difference targets.
        let static_obs = vec![obs([0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 1.0]); 3];
        let ep2 = Episode {
            delayed: static_obs.clone(),
            delay_free: static_obs,
            actions: vec![0, 0],
            delays: ep.delays.clone(),
        };
        let targets = make_targets(&[view(&ep2, 2)], core::slice::from_ref(&layout), 3).unwrap();
        for k in 0..3 {
            assert!(targets.float_targets[k].iter().all(|&v| v == 0.0));
            assert!(targets.disc_targets[k].iter().all(|&c| c == 1));
        }
        let flash = make_flash_targets(&targets);
        assert!(flash.float_targets.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_mask_excludes_fully_compensated_entities() {
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let ep = three_step_episode();
        let targets = make_targets(&[view(&ep, 2)], core::slice::from_ref(&layout), 3).unwrap();
        // Entity 1 has d=2, entity 2 has d=1. Float slots 0,1 belong to
        // entity 1, slot 2 to entity 2.
        assert_eq!(targets.float_mask[0], vec![1.0, 1.0, 1.0]); // k=1
        assert_eq!(targets.float_mask[1], vec![1.0, 1.0, 0.0]); // k=2
        assert_eq!(targets.float_mask[2], vec![0.0, 0.0, 0.0]); // k=3
    }

    fn test_compensator(mode: CompensatorMode) -> (ParamSet<f32>, Compensator) {
        let mut rng = stream_rng(9, Stream::ParamInit, 0);
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let mut ps = ParamSet::new();
        let net = CompensatorNet::new(&mut ps, &mut rng, "comp", &layout, 16);
        (ps, Compensator { mode, net, layouts: vec![layout], t_model: 3, history_len: 3, ce_weight: 1.0 })
    }

    #[test]
    fn echo_full_mask_is_a_fixpoint() {
        // All delays zero: output equals input exactly, whatever the weights.
        let (ps, comp) = test_compensator(CompensatorMode::Echo);
        let ep = three_step_episode();
        let zero_ep = Episode {
            delayed: ep.delay_free.clone(),
            delay_free: ep.delay_free.clone(),
            actions: ep.actions.clone(),
            delays: vec![DelayVector::zeros(1, 3); 3],
        };
        let recon = comp.reconstruct(&ps, &[view(&zero_ep, 2)]).unwrap();
        assert_eq!(recon[0], zero_ep.delayed[2].flatten());
    }

    #[test]
    fn echo_freezes_content_once_compensated() {
        // Entity with d=2 and 4 refinement steps: pending at k=1,2 only.
        let (ps, mut comp) = test_compensator(CompensatorMode::Echo);
        comp.t_model = 4;
        let ep = three_step_episode();
        let v = view(&ep, 2);
        let layout = comp.structural().clone();
        let input = build_input(&v, &layout, comp.history_len, CompensatorMode::Echo, 4);
        let batch = batch_inputs(&[input], &layout).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new(&ps);
        let out = echo_rollout(
            &mut tape,
            &mut binder,
            &comp.net,
            &layout,
            &batch,
            4,
            Feedback::OwnOutputs,
        )
        .unwrap();
        assert_eq!(out.steps[0].float_mask[0], 1.0);
        assert_eq!(out.steps[1].float_mask[0], 1.0);
        assert_eq!(out.steps[2].float_mask[0], 0.0);
        assert_eq!(out.steps[3].float_mask[0], 0.0);
    }

    #[test]
    fn non_delayable_groups_pass_through_untouched() {
        for mode in [CompensatorMode::Flash, CompensatorMode::Echo] {
            let (ps, comp) = test_compensator(mode);
            let ep = three_step_episode();
            let recon = comp.reconstruct(&ps, &[view(&ep, 2)]).unwrap();
            let delayed = ep.delayed[2].flatten();
            // Self group occupies the first two columns.
            assert_eq!(recon[0][0], delayed[0]);
            assert_eq!(recon[0][1], delayed[1]);
            assert_eq!(recon[0].len(), delayed.len());
        }
    }

    #[test]
    fn uniform_logits_and_zero_residual_give_ln3() {
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let mut tape = Tape::<f64>::new();
        let n = 2;
        let float_res = tape.constant(Tensor::zeros(&[n, layout.n_float()]));
        let disc_logits = tape.constant(Tensor::zeros(&[n, 3 * layout.n_disc()]));
        let targets = FlashTargets {
            float_targets: vec![0.0; n * layout.n_float()],
            disc_targets: vec![1; n * layout.n_disc()],
            n,
        };
        let loss = flash_loss(&mut tape, float_res, disc_logits, &targets, 1.0).unwrap();
        let want = (3.0f64).ln();
        assert!((tape.data(loss)[0] - want).abs() < 1e-9);
    }

    #[test]
    fn echo_loss_is_the_mean_over_steps() {
        // Uniform logits give ln 3 per step; the loss is the step mean.
        let layout = CompLayout::new(&schema(), 5).unwrap();
        let (nf, nd) = (layout.n_float(), layout.n_disc());
        let mut tape = Tape::<f64>::new();
        let n = 1;
        let make_steps = |tape: &mut Tape<f64>, mask: f32| -> Vec<EchoStep> {
            (0..2)
                .map(|_| EchoStep {
                    float_res: tape.constant(Tensor::zeros(&[n, nf])),
                    disc_logits: tape.constant(Tensor::zeros(&[n, 3 * nd])),
                    float_mask: vec![mask; n * nf],
                    disc_mask: vec![mask; n * nd],
                })
                .collect()
        };
        let targets = CompensationTargets {
            t_steps: 2,
            n,
            float_targets: vec![vec![0.0; n * nf]; 2],
            disc_targets: vec![vec![1; n * nd]; 2],
            float_mask: vec![vec![1.0; n * nf]; 2],
            disc_mask: vec![vec![1.0; n * nd]; 2],
            gt_float: vec![vec![0.0; n * nf]; 3],
            gt_disc: vec![vec![0.0; n * nd]; 3],
        };
        let steps = make_steps(&mut tape, 1.0);
        let loss = echo_loss(&mut tape, &steps, &targets, 1.0).unwrap();
        assert!((tape.data(loss)[0] - (3.0f64).ln()).abs() < 1e-9);

        // Fully masked steps contribute zero.
        let mut tape = Tape::<f64>::new();
        let steps = make_steps(&mut tape, 0.0);
        let loss = echo_loss(&mut tape, &steps, &targets, 1.0).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0);
    }

    #[test]
    fn teacher_forcing_gate_frequencies() {
        let mut rng = stream_rng(2, Stream::CompensatorBatch, 0);
        assert!(!(0..1000).any(|_| teacher_forcing_gate(0.0, &mut rng)));
        assert!((0..1000).all(|_| teacher_forcing_gate(1.0, &mut rng)));
        let hits = (0..10_000).filter(|_| teacher_forcing_gate(0.5, &mut rng)).count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn reconstruction_is_reproducible() {
        let (ps, comp) = test_compensator(CompensatorMode::Echo);
        let ep = three_step_episode();
        let a = comp.reconstruct(&ps, &[view(&ep, 2)]).unwrap();
        let b = comp.reconstruct(&ps, &[view(&ep, 2)]).unwrap();
        assert_eq!(a, b);
    }
}
