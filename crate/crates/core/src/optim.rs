//! Optimization: AdamW with decoupled weight decay, a cosine schedule with
//! linear warmup, linear learning-rate scaling by effective batch size,
//! layer-wise learning-rate decay for fine-tuning, and gradient
//! accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{GradGraph, Tensor};

pub const ADAMW_EPS: f64 = 1e-8;
pub const PRETRAIN_BETA2: f64 = 0.95;
pub const REFERENCE_BATCH: f64 = 256.0;

// ── AdamW ──────────────────────────────────────────────────────────────

struct Slot {
    name: String,
    tensor: Tensor<f32>,
    lr_mult: f32,
    weight_decay: f32,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW over an ordered list of named parameters. Weight decay is
/// decoupled: `p ← p − lr·wd·p` is applied separately from the adaptive
/// update, both computed from the pre-step value.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Slot>,
    step_count: u64,
    last_applied: Vec<(String, f32)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
            step_count: 0,
            last_applied: Vec::new(),
        }
    }

    pub fn add_param(
        &mut self,
        name: impl Into<String>,
        tensor: &Tensor<f32>,
        lr_mult: f32,
        weight_decay: f32,
    ) {
        self.slots.push(Slot {
            name: name.into(),
            tensor: tensor.clone(),
            lr_mult,
            weight_decay,
            m: vec![0.0; tensor.numel()],
            v: vec![0.0; tensor.numel()],
        });
    }

    /// Registers every parameter of a set; `assign` maps a parameter name
    /// and shape to its (lr multiplier, weight decay).
    pub fn add_param_set(
        &mut self,
        params: &ParamSet<f32>,
        assign: impl Fn(&str, &[usize]) -> (f32, f32),
    ) {
        for (name, tensor) in params.iter() {
            let (lr_mult, wd) = assign(name, tensor.shape());
            self.add_param(name, tensor, lr_mult, wd);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.tensor.zero_grad();
        }
    }

    /// Effective learning rate applied to each parameter on the last step.
    pub fn last_applied_lrs(&self) -> &[(String, f32)] {
        &self.last_applied
    }

    /// One update with the given base learning rate. Parameters whose grad
    /// buffer is unpopulated are skipped. If any populated gradient is
    /// non-finite the whole step is rejected and no state changes.
    pub fn step(&mut self, lr: f32) -> Result<()> {
        self.step_split(lr, lr)
    }

    /// Update with separate rates for the adaptive term and the decay term;
    /// `step` uses the same rate for both. Splitting them exposes the
    /// decoupling for verification.
    pub fn step_split(&mut self, lr_adaptive: f32, lr_decay: f32) -> Result<()> {
        for slot in &self.slots {
            if let Some(grad) = slot.tensor.grad() {
                if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
                    return Err(Error::invalid(
                        "adamw_step",
                        format!("non-finite gradient {bad} in {}; step rejected", slot.name),
                    ));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        self.last_applied.clear();
        for slot in &mut self.slots {
            let Some(grad) = slot.tensor.grad() else { continue };
            let lr_a = lr_adaptive * slot.lr_mult;
            let lr_d = lr_decay * slot.lr_mult;
            self.last_applied.push((slot.name.clone(), lr_a));
            let mut p = slot.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] as f64 / bc1;
                let v_hat = slot.v[i] as f64 / bc2;
                let adaptive = (m_hat / (v_hat.sqrt() + self.eps)) as f32;
                let old = p[i];
                p[i] = old - lr_d * slot.weight_decay * old - lr_a * adaptive;
            }
        }
        Ok(())
    }

    /// Optimizer state as named tensors (`opt.m.*`, `opt.v.*`) for
    /// checkpointing, in parameter order.
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for slot in &self.slots {
            let shape = slot.tensor.shape().to_vec();
            out.push((format!("opt.m.{}", slot.name), shape.clone(), slot.m.clone()));
            out.push((format!("opt.v.{}", slot.name), shape, slot.v.clone()));
        }
        out
    }

    /// Restores moments and step count saved by [`state_tensors`].
    pub fn load_state(
        &mut self,
        step_count: u64,
        mut lookup: impl FnMut(&str) -> Option<Vec<f32>>,
    ) -> Result<()> {
        self.step_count = step_count;
        for slot in &mut self.slots {
            let m = lookup(&format!("opt.m.{}", slot.name));
            let v = lookup(&format!("opt.v.{}", slot.name));
            match (m, v) {
                (Some(m), Some(v)) if m.len() == slot.m.len() && v.len() == slot.v.len() => {
                    slot.m = m;
                    slot.v = v;
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state missing or mis-shaped for {}",
                        slot.name
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Standard decay exclusion: rank-0/1 parameters (biases, norm gains) and
/// the learnable tokens never receive weight decay.
pub fn decays_weight(name: &str, shape: &[usize]) -> bool {
    if shape.len() <= 1 {
        return false;
    }
    !(name.contains("cls_token") || name.contains("mask_token"))
}

// ── schedule ───────────────────────────────────────────────────────────

/// Cosine decay with linear warmup, advanced per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(
        base_lr: f64,
        min_lr: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if warmup_epochs >= total_epochs {
            return Err(Error::invalid(
                "schedule",
                format!("warmup {warmup_epochs} must be shorter than total {total_epochs} epochs"),
            ));
        }
        if steps_per_epoch == 0 {
            return Err(Error::invalid("schedule", "steps_per_epoch must be >= 1".to_string()));
        }
        Ok(Schedule { base_lr, min_lr, warmup_epochs, total_epochs, steps_per_epoch })
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate at an optimizer step: linear ramp 0 → base over the warmup
/// steps, then cosine from base to min over the remainder.
pub fn cosine_warmup_lr(schedule: &Schedule, step: usize) -> Result<f64> {
    let warmup = schedule.warmup_steps();
    let total = schedule.total_steps();
    if step > total {
        return Err(Error::invalid(
            "cosine_warmup_lr",
            format!("step {step} beyond total {total}"),
        ));
    }
    if step < warmup {
        return Ok(schedule.base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(schedule.min_lr
        + 0.5 * (schedule.base_lr - schedule.min_lr)
            * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Linear scaling law: the reference rate is defined at batch 256.
pub fn scaled_base_lr(reference_lr: f64, effective_batch: usize) -> f64 {
    debug_assert!(effective_batch >= 1);
    reference_lr * effective_batch as f64 / REFERENCE_BATCH
}

// ── layer-wise learning-rate decay ─────────────────────────────────────

/// Per-group learning-rate multipliers for fine-tuning: the head group is
/// 1, block i (1-indexed from the input) is `d^(L+1−i)`, and the patch
/// embedding (with the classification token) is `d^(L+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrdPlan {
    pub decay: f64,
    pub depth: usize,
    /// Index 0 = patch embed, 1..=L = blocks, L+1 = head.
    pub multipliers: Vec<f64>,
}

pub fn llrd_multipliers(depth: usize, decay: f64) -> Result<LlrdPlan> {
    if !(0.0 < decay && decay <= 1.0) {
        return Err(Error::invalid("llrd_multipliers", format!("decay {decay} outside (0,1]")));
    }
    let multipliers = (0..=depth + 1)
        .map(|group| decay.powi((depth + 1 - group) as i32))
        .collect();
    Ok(LlrdPlan { decay, depth, multipliers })
}

impl LlrdPlan {
    /// Routes a parameter name to its group: patch embedding and the
    /// classification token sit at the input side, encoder blocks by index,
    /// everything else (final norm, head) at the output side.
    pub fn group_of(&self, name: &str) -> usize {
        if name.contains("patch_embed") || name.contains("cls_token") {
            return 0;
        }
        if let Some(pos) = name.find("blocks.") {
            let rest = &name[pos + "blocks.".len()..];
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if let Ok(i) = digits.parse::<usize>() {
                return (i + 1).min(self.depth + 1);
            }
        }
        self.depth + 1
    }

    pub fn multiplier_for(&self, name: &str) -> f64 {
        self.multipliers[self.group_of(name)]
    }
}

// ── gradient accumulation ──────────────────────────────────────────────

/// Runs `accumulation_steps` micro-batch closures, averages their gradients,
/// and performs a single AdamW step. Each closure must return its
/// micro-batch mean loss built on the provided graph; micro-batches must be
/// equally sized for the average to equal the full-batch gradient.
/// Returns the mean of the micro-batch losses.
pub fn accumulate_gradients(
    optimizer: &mut AdamW,
    lr: f32,
    accumulation_steps: usize,
    mut micro_batch: impl FnMut(usize, &mut GradGraph<f32>) -> Result<Tensor<f32>>,
) -> Result<f32> {
    if accumulation_steps == 0 {
        return Err(Error::invalid(
            "accumulate_gradients",
            "need at least one micro-batch".to_string(),
        ));
    }
    optimizer.zero_grads();
    let inv = 1.0f32 / accumulation_steps as f32;
    let mut loss_sum = 0.0f32;
    for s in 0..accumulation_steps {
        let mut g = GradGraph::new();
        let loss = micro_batch(s, &mut g)?;
        if loss.numel() != 1 {
            return Err(Error::invalid(
                "accumulate_gradients",
                format!("micro-batch {s} returned a non-scalar loss {:?}", loss.shape()),
            ));
        }
        loss_sum += loss.item();
        let scaled = g.scale(&loss, inv);
        g.backward(&scaled)?;
    }
    optimizer.step(lr)?;
    Ok(loss_sum * inv)
}
