//! Replay-buffered contrastive training of the energy models, with a
//! four-way negative-generation branch (masks, embeddings, joint, images)
//! and the positive-spread / empty-mask / hard-negative regularizers.

mod adam;
mod buffer;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_to_tensor, render_domain, ExampleRecord};
use crate::inference::{classify, detect, DetectConfig};
use crate::model::{BoundConcept, BoundRelation, EnergyModel, MaskEnergy, ModelKind};
use crate::sampler::{init_gaussian, init_uniform, sgld_mixed, SgldConfig};
use crate::{Result, ZcError};

pub use adam::{Adam, AdamConfig};
pub use buffer::{NegativeTuple, ReplayBuffer};

/// Weights of the loss terms beyond plain contrastive divergence.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    /// Spread penalty on the positive energies in a batch.
    pub pos_std: f64,
    /// Pull the empty-mask energy toward the positive/negative midpoint.
    pub em: f64,
    /// Push energy up on corrupted (hard-negative) masks.
    pub neg: f64,
    /// Weight of the sampler-gradient term inside the improved objective.
    pub kl: f64,
}

impl LossWeights {
    pub fn concept() -> Self {
        LossWeights {
            pos_std: 0.1,
            em: 0.1,
            neg: 0.05,
            kl: 1.0,
        }
    }

    pub fn relation() -> Self {
        LossWeights {
            pos_std: 1.0,
            em: 0.0,
            neg: 0.2,
            kl: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pos_std", self.pos_std),
            ("em", self.em),
            ("neg", self.neg),
            ("kl", self.kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ZcError::Contract(format!(
                    "loss weight {name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Langevin steps per negative chain.
    pub k_train: usize,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: usize,
    /// (mask, embedding, joint, image) branch probabilities.
    pub branch_probabilities: [f64; 4],
    pub buffer_capacity: usize,
    pub buffer_reuse: f64,
    /// SGLD steps whose gradient path feeds the sampler term.
    pub retained_steps: usize,
    pub mask_step_size: f64,
    pub embed_step_size: f64,
    /// Optional quadratic penalty on energy magnitudes; 0 disables it.
    pub energy_guard: f64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Validate every this many steps (0: only at the end).
    pub validate_every: usize,
    pub validation_examples: usize,
    pub validation_ensemble: usize,
    pub validation_sgld_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            k_train: 60,
            batch_size: 16,
            steps: 1000,
            branch_probabilities: [0.25; 4],
            buffer_capacity: 10_000,
            buffer_reuse: 0.2,
            retained_steps: 5,
            mask_step_size: 0.1,
            embed_step_size: 0.01,
            energy_guard: 0.0,
            checkpoint_every: 0,
            validate_every: 0,
            validation_examples: 16,
            validation_ensemble: 8,
            validation_sgld_steps: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.branch_probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.branch_probabilities.iter().any(|p| *p < 0.0) {
            return Err(ZcError::Contract(format!(
                "branch probabilities must be nonnegative and sum to 1, got {:?}",
                self.branch_probabilities
            )));
        }
        if self.learning_rate <= 0.0 || self.k_train == 0 || self.batch_size == 0 {
            return Err(ZcError::Contract(
                "learning rate, chain length, and batch size must be positive".into(),
            ));
        }
        if self.retained_steps > self.k_train {
            return Err(ZcError::Contract(format!(
                "retained_steps {} exceeds chain length {}",
                self.retained_steps, self.k_train
            )));
        }
        if !(0.0..=1.0).contains(&self.buffer_reuse) {
            return Err(ZcError::Contract(format!(
                "buffer reuse probability {} outside [0, 1]",
                self.buffer_reuse
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Mask,
    Embedding,
    Joint,
    Image,
}

/// One draw of the negative-generation branch.
pub fn draw_branch(probabilities: &[f64; 4], rng: &mut ChaCha8Rng) -> Branch {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return [Branch::Mask, Branch::Embedding, Branch::Joint, Branch::Image][i];
        }
    }
    Branch::Image
}

/// A batch of positive tuples in tensor form, with the grid-level pixel
/// sets kept around for mask corruption.
pub struct Batch {
    /// (B, C, H, W)
    pub x: Tensor,
    /// One (B, 1, H, W) tensor per mask slot.
    pub masks: Vec<Tensor>,
    pub labels: Vec<String>,
    /// Grid-coordinate pixel sets, per example and slot.
    pub pixel_masks: Vec<Vec<BTreeSet<(usize, usize)>>>,
    /// All object pixel sets in each example's scene.
    pub scene_objects: Vec<Vec<BTreeSet<(usize, usize)>>>,
    pub domain: u8,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Batch {
    pub fn from_records(records: &[&ExampleRecord]) -> Result<Batch> {
        let first = records
            .first()
            .ok_or_else(|| ZcError::Contract("empty batch".into()))?;
        let slots = first.masks.len();
        let (h, w) = (first.grid.height, first.grid.width);
        let mut xs = Vec::with_capacity(records.len());
        let mut mask_rows: Vec<Vec<Tensor>> = vec![Vec::new(); slots];
        for r in records {
            if r.domain != first.domain || r.masks.len() != slots {
                return Err(ZcError::Contract(
                    "batch mixes domains or mask arities".into(),
                ));
            }
            xs.push(render_domain(&r.grid, r.domain)?);
            for (s, m) in r.masks.iter().enumerate() {
                mask_rows[s].push(mask_to_tensor(m, h, w, r.domain)?);
            }
        }
        let masks = mask_rows
            .iter()
            .map(|rows| stack_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            x: stack_rows(&xs)?,
            masks,
            labels: records.iter().map(|r| r.label.clone()).collect(),
            pixel_masks: records.iter().map(|r| r.masks.clone()).collect(),
            scene_objects: records
                .iter()
                .map(|r| r.objects.iter().map(|o| o.pixels.clone()).collect())
                .collect(),
            domain: first.domain,
            grid_h: h,
            grid_w: w,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(Tensor::stack(&refs, 0)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?
        .reshape(1)?
        .to_vec1::<f64>()?[0])
}

/// Batch standard deviation (population convention, so it is defined for a
/// single example) of the positive energies.
pub fn pos_std_loss(energies: &Tensor) -> Result<Tensor> {
    let mean = energies.mean_all()?;
    let var = energies.broadcast_sub(&mean)?.sqr()?.mean_all()?;
    Ok((var + 1e-12)?.sqrt()?)
}

/// |(E(pos) + E(neg)) / 2 − E(empty)| per example, averaged: anchors the
/// all-zero mask's energy between the positive and negative levels.
pub fn empty_mask_loss(e_pos: &Tensor, e_neg: &Tensor, e_em: &Tensor) -> Result<Tensor> {
    let midpoint = ((e_pos + e_neg)? * 0.5)?;
    Ok((midpoint - e_em)?.abs()?.mean_all()?)
}

/// The gradient path of a batch of negatives: final states plus the states
/// at the last few Langevin steps.
pub struct NegativePath<'a> {
    /// Final chain states (detached).
    pub states: &'a [Tensor],
    /// States after each of the retained steps, oldest first; every entry
    /// is parallel to `states`. May be empty, which disables the term.
    pub trajectory_tail: &'a [Vec<Tensor>],
    /// Langevin step size λ that produced the chain.
    pub step_size: f64,
}

/// Contrastive loss E(pos) − E(neg) plus the sampler-gradient term of the
/// improved objective.
///
/// The sampler term needs the mixed second derivative ∂²E/∂θ∂q along the
/// chain, which reverse-mode alone cannot provide here; it is built as a
/// central finite difference of E in the frozen outer-gradient direction,
/// which is exact in θ and second-order accurate in q. The entropy term of
/// the original objective is omitted.
pub fn improved_cd_loss<F>(
    energy: F,
    e_pos: &Tensor,
    e_neg: &Tensor,
    negatives: &NegativePath,
    alpha_kl: f64,
) -> Result<Tensor>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let cd = (e_pos.mean_all()? - e_neg.mean_all()?)?;
    if alpha_kl == 0.0 || negatives.trajectory_tail.is_empty() {
        return Ok(cd);
    }

    // Outer gradient v = ∇_q E at the final state, parameters treated as
    // frozen: computed in a throwaway backward pass and detached.
    let vars: Vec<candle_core::Var> = negatives
        .states
        .iter()
        .map(candle_core::Var::from_tensor)
        .collect::<candle_core::Result<_>>()?;
    let inputs: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = energy(&inputs)?.sum_all()?.backward()?;
    let mut dirs = Vec::with_capacity(vars.len());
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for var in &vars {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.detach(),
            None => Tensor::zeros(var.dims(), var.dtype(), var.device())?,
        };
        sq_sum += scalar(&g.sqr()?.sum_all()?)?;
        count += g.elem_count();
        dirs.push(g);
    }
    let norm = (sq_sum / count.max(1) as f64).sqrt();
    if norm < 1e-12 {
        return Ok(cd);
    }
    // Normalize the direction for finite-difference stability and scale the
    // quotient back so it still equals the directional derivative v·∇E.
    let dirs: Vec<Tensor> = dirs
        .iter()
        .map(|g| g.affine(1.0 / norm, 0.0))
        .collect::<candle_core::Result<_>>()?;
    let delta = 1e-3;

    let mut directional: Option<Tensor> = None;
    for step_states in negatives.trajectory_tail {
        let plus: Vec<Tensor> = step_states
            .iter()
            .zip(&dirs)
            .map(|(s, d)| s.detach().add(&d.affine(delta, 0.0)?))
            .collect::<candle_core::Result<_>>()?;
        let minus: Vec<Tensor> = step_states
            .iter()
            .zip(&dirs)
            .map(|(s, d)| s.detach().sub(&d.affine(delta, 0.0)?))
            .collect::<candle_core::Result<_>>()?;
        let quot = ((energy(&plus)?.mean_all()? - energy(&minus)?.mean_all()?)?
            * (norm / (2.0 * delta)))?;
        directional = Some(match directional {
            Some(acc) => (acc + quot)?,
            None => quot,
        });
    }
    // Each retained step moved the state by −(λ/2)∇_q E, so the parameter
    // gradient flowing through it carries that factor with a minus sign.
    let kl = directional.unwrap().affine(-alpha_kl * negatives.step_size / 2.0, 0.0)?;
    Ok((cd + kl)?)
}

/// A hard negative: a connected strict subset of the positive mask, a
/// translated copy, or its union with another object in the scene. Never
/// returns the positive mask itself.
pub fn corrupt_mask(
    m: &BTreeSet<(usize, usize)>,
    scene: &[BTreeSet<(usize, usize)>],
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<(usize, usize)>> {
    if m.is_empty() {
        return Err(ZcError::Contract("cannot corrupt an empty mask".into()));
    }
    for _ in 0..64 {
        let candidate = match rng.gen_range(0..3u8) {
            0 => corrupt_subset(m, rng),
            1 => corrupt_translate(m, h, w, rng),
            _ => corrupt_union(m, scene, rng),
        };
        if let Some(c) = candidate {
            if !c.is_empty() && &c != m {
                return Ok(c);
            }
        }
    }
    // Degenerate scenes (e.g. a single-pixel mask with no neighbors) still
    // admit a one-step translation that keeps at least one pixel in bounds.
    let &(r0, c0) = m.iter().next().unwrap();
    let dr: isize = if r0 > 0 { -1 } else { 1 };
    let dc: isize = if c0 > 0 { -1 } else { 1 };
    Ok(translate(m, dr, dc, h, w))
}

fn corrupt_subset(
    m: &BTreeSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Option<BTreeSet<(usize, usize)>> {
    if m.len() < 2 {
        return None;
    }
    let target = rng.gen_range(1..m.len());
    let pixels: Vec<(usize, usize)> = m.iter().copied().collect();
    let start = pixels[rng.gen_range(0..pixels.len())];
    let mut chosen = BTreeSet::new();
    let mut frontier = vec![start];
    while chosen.len() < target {
        if frontier.is_empty() {
            break;
        }
        let idx = rng.gen_range(0..frontier.len());
        let p = frontier.swap_remove(idx);
        if !chosen.insert(p) {
            continue;
        }
        let (r, c) = p;
        let mut push = |q: (usize, usize)| {
            if m.contains(&q) && !chosen.contains(&q) {
                frontier.push(q);
            }
        };
        if r > 0 {
            push((r - 1, c));
        }
        if c > 0 {
            push((r, c - 1));
        }
        push((r + 1, c));
        push((r, c + 1));
    }
    Some(chosen)
}

fn translate(
    m: &BTreeSet<(usize, usize)>,
    dr: isize,
    dc: isize,
    h: usize,
    w: usize,
) -> BTreeSet<(usize, usize)> {
    m.iter()
        .filter_map(|&(r, c)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            ((0..h as isize).contains(&nr) && (0..w as isize).contains(&nc))
                .then_some((nr as usize, nc as usize))
        })
        .collect()
}

fn corrupt_translate(
    m: &BTreeSet<(usize, usize)>,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Option<BTreeSet<(usize, usize)>> {
    let span = (h.max(w) / 2).max(1) as isize;
    let (dr, dc) = (rng.gen_range(-span..=span), rng.gen_range(-span..=span));
    if dr == 0 && dc == 0 {
        return None;
    }
    Some(translate(m, dr, dc, h, w))
}

fn corrupt_union(
    m: &BTreeSet<(usize, usize)>,
    scene: &[BTreeSet<(usize, usize)>],
    rng: &mut ChaCha8Rng,
) -> Option<BTreeSet<(usize, usize)>> {
    let others: Vec<&BTreeSet<(usize, usize)>> = scene
        .iter()
        .filter(|s| !s.is_empty() && !s.is_subset(m))
        .collect();
    if others.is_empty() {
        return None;
    }
    let other = others[rng.gen_range(0..others.len())];
    Some(m.union(other).copied().collect())
}

/// Per-step log record: the branch taken, the loss and its components, the
/// mean positive and negative energies, and buffer usage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub branch: Branch,
    pub total: f64,
    /// Contrastive term, including the sampler-gradient surrogate.
    pub cd: f64,
    pub pos_std: f64,
    pub em: f64,
    pub neg_reg: f64,
    pub e_pos: f64,
    pub e_neg: f64,
    pub buffer_hits: usize,
    pub buffer_size: usize,
}

fn model_energy(model: &EnergyModel, x: &Tensor, masks: &[Tensor], c: &Tensor) -> Result<Tensor> {
    match model.kind() {
        ModelKind::Concept => model.concept_energy(x, &masks[0], c),
        ModelKind::Relation => model.relation_energy(x, &masks[0], &masks[1], c),
    }
}

/// One optimizer step: draw a negative branch, mine negatives with SGLD
/// (chains restart from the replay buffer 20% of the time), assemble the
/// full loss, update the parameters, and push the fresh negatives into the
/// buffer.
pub fn training_step(
    model: &EnergyModel,
    batch: &Batch,
    buffer: &mut ReplayBuffer,
    weights: &LossWeights,
    config: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    config.validate()?;
    weights.validate()?;
    let slots = model.kind().mask_channels();
    if batch.masks.len() != slots {
        return Err(ZcError::Contract(format!(
            "batch has {} mask slots but the model expects {slots}",
            batch.masks.len()
        )));
    }
    model.set_train(true);
    let b = batch.len();
    let dtype = batch.x.dtype();
    let device = batch.x.device().clone();
    let (_, c_in, hh, ww) = batch.x.dims4()?;
    let c_dim = model.table().c_dim();

    // Positive embeddings, differentiable back into the label table.
    let c_rows: Vec<Tensor> = batch
        .labels
        .iter()
        .map(|l| model.table().embed(l))
        .collect::<Result<_>>()?;
    let c_pos = stack_rows(&c_rows)?.to_dtype(dtype)?;

    let branch = draw_branch(&config.branch_probabilities, rng);
    let seeds: Vec<Option<NegativeTuple>> =
        (0..b).map(|_| buffer.maybe_sample(rng).cloned()).collect();
    let buffer_hits = seeds.iter().filter(|s| s.is_some()).count();

    let (table_mean, table_std) = model.table().statistics()?;
    let mut mask_states = Vec::new();
    if matches!(branch, Branch::Mask | Branch::Joint) {
        for s in 0..slots {
            let rows: Vec<Tensor> = seeds
                .iter()
                .map(|seed| match seed {
                    Some(t) => Ok(t.masks[s].clone()),
                    None => init_uniform(&[1, hh, ww], dtype, &device, rng),
                })
                .collect::<Result<_>>()?;
            mask_states.push(stack_rows(&rows)?);
        }
    }
    let embed_state = if matches!(branch, Branch::Embedding | Branch::Joint) {
        let rows: Vec<Tensor> = seeds
            .iter()
            .map(|seed| match seed {
                Some(t) => Ok(t.embedding.clone()),
                None => Ok(init_gaussian(
                    &vec![table_mean; c_dim],
                    &vec![table_std; c_dim],
                    1,
                    dtype,
                    &device,
                    rng,
                )?
                .squeeze(0)?),
            })
            .collect::<Result<_>>()?;
        Some(stack_rows(&rows)?)
    } else {
        None
    };
    let image_state = if branch == Branch::Image {
        let rows: Vec<Tensor> = seeds
            .iter()
            .map(|seed| match seed {
                Some(t) => Ok(t.x.clone()),
                None => init_uniform(&[c_in, hh, ww], dtype, &device, rng),
            })
            .collect::<Result<_>>()?;
        Some(stack_rows(&rows)?)
    } else {
        None
    };

    let pos_masks = batch.masks.clone();
    let x_pos = batch.x.clone();
    let eval = |states: &[Tensor]| -> Result<Tensor> {
        match branch {
            Branch::Mask => model_energy(model, &x_pos, states, &c_pos),
            Branch::Embedding => model_energy(model, &x_pos, &pos_masks, &states[0]),
            Branch::Joint => model_energy(model, &x_pos, &states[..slots], &states[slots]),
            Branch::Image => model_energy(model, &states[0], &pos_masks, &c_pos),
        }
    };

    let record = weights.kl > 0.0 && config.retained_steps > 0;
    let sgld_for = |step_size: f64, clamp: Option<(f64, f64)>| {
        let mut c = SgldConfig::new(step_size, config.k_train);
        c.clamp_range = clamp;
        c.record_trajectory = record;
        c
    };
    let mask_cfg = sgld_for(config.mask_step_size, Some((0.0, 1.0)));
    let embed_cfg = sgld_for(config.embed_step_size, None);

    let mut init = Vec::new();
    let mut configs = Vec::new();
    match branch {
        Branch::Mask => {
            for s in mask_states {
                init.push(s);
                configs.push(mask_cfg.clone());
            }
        }
        Branch::Embedding => {
            init.push(embed_state.unwrap());
            configs.push(embed_cfg);
        }
        Branch::Joint => {
            for s in mask_states {
                init.push(s);
                configs.push(mask_cfg.clone());
            }
            init.push(embed_state.unwrap());
            configs.push(embed_cfg);
        }
        Branch::Image => {
            init.push(image_state.unwrap());
            configs.push(mask_cfg.clone());
        }
    }

    let fail = |what: &str, detail: String| {
        ZcError::Training(format!("{what} on the {branch:?} branch: {detail}"))
    };
    let outcome = sgld_mixed(&eval, &init, &configs, rng)
        .map_err(|e| fail("negative sampling failed", e.to_string()))?;

    let e_pos = model_energy(model, &batch.x, &batch.masks, &c_pos)?;
    let e_neg = eval(&outcome.states)?;
    let tail_start = outcome
        .trajectory
        .len()
        .saturating_sub(config.retained_steps);
    let path = NegativePath {
        states: &outcome.states,
        trajectory_tail: &outcome.trajectory[tail_start..],
        step_size: match branch {
            Branch::Embedding => config.embed_step_size,
            _ => config.mask_step_size,
        },
    };
    let cd = improved_cd_loss(&eval, &e_pos, &e_neg, &path, weights.kl)?;
    let pos_std = pos_std_loss(&e_pos)?;
    let mut total = (cd.clone() + pos_std.affine(weights.pos_std, 0.0)?)?;

    let mut em_value = 0.0;
    if weights.em > 0.0 {
        let zero = Tensor::zeros((b, 1, hh, ww), dtype, &device)?;
        let zeros: Vec<Tensor> = (0..slots).map(|_| zero.clone()).collect();
        let e_em = model_energy(model, &batch.x, &zeros, &c_pos)?;
        let em = empty_mask_loss(&e_pos, &e_neg.detach(), &e_em)?;
        em_value = scalar(&em)?;
        total = (total + em.affine(weights.em, 0.0)?)?;
    }

    let mut neg_value = 0.0;
    if weights.neg > 0.0 {
        let corrupt_slot: Vec<usize> = (0..b)
            .map(|_| if slots == 1 { 0 } else { rng.gen_range(0..slots) })
            .collect();
        let mut corrupt_masks = Vec::with_capacity(slots);
        for s in 0..slots {
            let rows: Vec<Tensor> = (0..b)
                .map(|n| {
                    if corrupt_slot[n] == s {
                        let bad = corrupt_mask(
                            &batch.pixel_masks[n][s],
                            &batch.scene_objects[n],
                            batch.grid_h,
                            batch.grid_w,
                            rng,
                        )?;
                        mask_to_tensor(&bad, batch.grid_h, batch.grid_w, batch.domain)
                    } else {
                        Ok(batch.masks[s].narrow(0, n, 1)?.squeeze(0)?)
                    }
                })
                .collect::<Result<_>>()?;
            corrupt_masks.push(stack_rows(&rows)?);
        }
        let e_bad = model_energy(model, &batch.x, &corrupt_masks, &c_pos)?;
        let neg = e_bad.mean_all()?.affine(-1.0, 0.0)?;
        neg_value = scalar(&neg)?;
        total = (total + neg.affine(weights.neg, 0.0)?)?;
    }

    if config.energy_guard > 0.0 {
        let guard = (e_pos.sqr()?.mean_all()? + e_neg.sqr()?.mean_all()?)?;
        total = (total + guard.affine(config.energy_guard, 0.0)?)?;
    }

    let metrics = StepMetrics {
        step: opt.step_count() + 1,
        branch,
        total: scalar(&total)?,
        cd: scalar(&cd)?,
        pos_std: scalar(&pos_std)?,
        em: em_value,
        neg_reg: neg_value,
        e_pos: scalar(&e_pos.mean_all()?)?,
        e_neg: scalar(&e_neg.mean_all()?)?,
        buffer_hits,
        buffer_size: buffer.len(),
    };
    if !metrics.total.is_finite() {
        return Err(fail(
            "non-finite loss",
            format!(
                "cd {:.4}, pos_std {:.4}, em {:.4}, neg {:.4}, E+ {:.4}, E- {:.4}",
                metrics.cd, metrics.pos_std, metrics.em, metrics.neg_reg, metrics.e_pos,
                metrics.e_neg
            ),
        ));
    }

    let grads = total.backward()?;
    opt.step(&grads)?;

    for n in 0..b {
        let row = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(0, n, 1)?.squeeze(0)?.detach()) };
        let masks = match branch {
            Branch::Mask | Branch::Joint => (0..slots)
                .map(|s| row(&outcome.states[s]))
                .collect::<Result<Vec<_>>>()?,
            _ => batch.masks.iter().map(row).collect::<Result<Vec<_>>>()?,
        };
        let embedding = match branch {
            Branch::Embedding => row(&outcome.states[0])?,
            Branch::Joint => row(&outcome.states[slots])?,
            _ => row(&c_pos)?,
        };
        let x = match branch {
            Branch::Image => row(&outcome.states[0])?,
            _ => row(&batch.x)?,
        };
        buffer.push(NegativeTuple { x, masks, embedding });
    }

    Ok(metrics)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    next_step: usize,
    best_step: Option<usize>,
    /// None until the first validation ran (JSON has no -infinity).
    best_score: Option<f64>,
}

/// Validation scores logged with checkpoints.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub accuracy: f64,
    pub detection_iou: f64,
    pub examples: usize,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub best_step: Option<usize>,
    pub best_score: f64,
    /// Directory of the checkpoint with the best validation score.
    pub best_checkpoint: PathBuf,
    pub final_validation: Option<ValidationMetrics>,
}

fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn pixels_from_tensor(mask: &Tensor) -> Result<BTreeSet<(usize, usize)>> {
    let m = mask.to_dtype(DType::F64)?;
    let dims = m.dims().to_vec();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let v = m.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.5)
        .map(|(i, _)| ((i / w) % h, i % w))
        .collect())
}

fn mask_iou(pred: &Tensor, gt: &BTreeSet<(usize, usize)>) -> Result<f64> {
    let p = pixels_from_tensor(pred)?;
    let inter = p.intersection(gt).count();
    let union = p.union(gt).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Classification accuracy over the model's own vocabulary, plus (for every
/// kind) the detection IoU of the true label's bound energy.
pub fn validate_model(
    model: &EnergyModel,
    records: &[ExampleRecord],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ValidationMetrics> {
    model.set_train(false);
    let vocab = model.table().vocabulary().to_vec();
    let mut det_cfg = DetectConfig::for_classification();
    det_cfg.ensemble = config.validation_ensemble.max(1);
    det_cfg.sgld = SgldConfig::for_masks(config.validation_sgld_steps.max(1));
    det_cfg.sgld.polish_steps = (config.validation_sgld_steps / 3).max(1);

    let n = records.len().min(config.validation_examples.max(1));
    let mut correct = 0usize;
    let mut iou_sum = 0.0;
    for record in &records[..n] {
        let x = render_domain(&record.grid, record.domain)?;
        let bound: Vec<(String, Box<dyn MaskEnergy + '_>)> = vocab
            .iter()
            .map(|label| {
                let e: Box<dyn MaskEnergy> = match model.kind() {
                    ModelKind::Concept => Box::new(BoundConcept {
                        model,
                        label: label.clone(),
                    }),
                    ModelKind::Relation => Box::new(BoundRelation {
                        model,
                        label: label.clone(),
                    }),
                };
                (label.clone(), e)
            })
            .collect();
        let candidates: Vec<(String, &dyn MaskEnergy)> = bound
            .iter()
            .map(|(l, e)| (l.clone(), e.as_ref()))
            .collect();
        if vocab.len() >= 2 {
            let cls = classify(&candidates, &x, &det_cfg, rng)?;
            if cls.labels[cls.best] == record.label {
                correct += 1;
            }
        } else {
            correct += 1;
        }
        let truth = candidates
            .iter()
            .find(|(l, _)| l == &record.label)
            .ok_or_else(|| {
                ZcError::Vocabulary(format!("validation label {:?} not in vocabulary", record.label))
            })?;
        let det = detect(truth.1, &x, &det_cfg, rng)?;
        let upscale = crate::corpus::upscale_factor(record.domain);
        let mut per_slot = 0.0;
        for (s, gt) in record.masks.iter().enumerate() {
            let scaled: BTreeSet<(usize, usize)> = gt
                .iter()
                .flat_map(|&(r, c)| {
                    (0..upscale).flat_map(move |dr| {
                        (0..upscale).map(move |dc| (upscale * r + dr, upscale * c + dc))
                    })
                })
                .collect();
            per_slot += mask_iou(&det.masks[s], &scaled)?;
        }
        iou_sum += per_slot / record.masks.len() as f64;
    }
    model.set_train(true);
    Ok(ValidationMetrics {
        accuracy: correct as f64 / n as f64,
        detection_iou: iou_sum / n as f64,
        examples: n,
    })
}

/// The training loop: per-step seeded batches, periodic checkpoints with
/// validation, and transparent resume from the newest checkpoint in
/// `out_dir`. Per-step randomness is derived from (seed, step), so a
/// resumed run replays the exact step sequence of an uninterrupted one.
pub fn train(
    model: &EnergyModel,
    train_records: &[ExampleRecord],
    val_records: &[ExampleRecord],
    weights: &LossWeights,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    weights.validate()?;
    if train_records.is_empty() {
        return Err(ZcError::Contract("no training records".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_dir = out_dir.join("checkpoint");
    let best_dir = out_dir.join("best");
    let state_path = out_dir.join("state.json");
    let opt_path = out_dir.join("optimizer.safetensors");
    let buffer_path = out_dir.join("buffer.safetensors");
    let metrics_path = out_dir.join("metrics.jsonl");

    let mut opt = Adam::new(model.store().trainable_vars(), config.adam())?;
    let mut buffer = ReplayBuffer::with_reuse(config.buffer_capacity, config.buffer_reuse);
    let mut state = TrainState {
        next_step: 0,
        best_step: None,
        best_score: None,
    };
    if state_path.exists() {
        state = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        model.store().load(&checkpoint_dir.join("params.safetensors"))?;
        opt.load(&opt_path)?;
        if buffer_path.exists() {
            buffer.load(&buffer_path)?;
        }
    }

    let mut metrics_log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let mut final_validation = None;

    for step in state.next_step..config.steps {
        let mut rng = step_rng(config.seed, step, 0);
        let rows: Vec<&ExampleRecord> = (0..config.batch_size)
            .map(|_| &train_records[rng.gen_range(0..train_records.len())])
            .collect();
        let batch = Batch::from_records(&rows)?;
        let metrics = training_step(model, &batch, &mut buffer, weights, config, &mut opt, &mut rng)?;
        use std::io::Write as _;
        writeln!(metrics_log, "{}", serde_json::to_string(&metrics)?)?;

        let last = step + 1 == config.steps;
        let validate_now = !val_records.is_empty()
            && (last || (config.validate_every > 0 && (step + 1) % config.validate_every == 0));
        if validate_now {
            let mut vrng = step_rng(config.seed, step, 1);
            let v = validate_model(model, val_records, config, &mut vrng)?;
            let score = match model.kind() {
                ModelKind::Concept => 0.5 * v.accuracy + 0.5 * v.detection_iou,
                ModelKind::Relation => v.accuracy,
            };
            if state.best_score.map_or(true, |best| score >= best) {
                state.best_score = Some(score);
                state.best_step = Some(step + 1);
                model.save(&best_dir)?;
            }
            if last {
                final_validation = Some(v);
            }
        }

        let checkpoint_now =
            last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0);
        if checkpoint_now {
            model.save(&checkpoint_dir)?;
            opt.save(&opt_path)?;
            buffer.save(&buffer_path)?;
            state.next_step = step + 1;
            std::fs::write(&state_path, serde_json::to_string_pretty(&state)?)?;
        }
    }

    if !best_dir.join("model.json").exists() {
        model.save(&best_dir)?;
    }
    Ok(TrainReport {
        steps_run: config.steps,
        best_step: state.best_step,
        best_score: state.best_score.unwrap_or(f64::NEG_INFINITY),
        best_checkpoint: best_dir,
        final_validation,
    })
}
