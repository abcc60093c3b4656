//! Magnitude-based weight pruning with persistent masks, the cubic
//! gradual-sparsity schedule, and the gradual and one-shot training drivers.
//!
//! Pruning covers convolution and dense weight tensors only; biases and
//! BatchNorm parameters are exempt. Masks are re-applied after every
//! optimizer step, so pruned entries stay exactly zero for the rest of the
//! run, and a pruned entry never comes back (monotone masks).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::nn::{self, Model, TrainConfig};
use crate::tensor::Tensor;

/// The five scalars of the cubic sparsity schedule:
///
/// `s_t = s_f + (s_i - s_f) * (1 - (t - t0) / (n * dt))^3`
///
/// evaluated on the event set `{t0, t0 + dt, ..., t0 + n * dt}`. Sparsity
/// rises quickly early and flattens toward `s_f`, which is what lets the
/// network heal between events.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    /// Initial sparsity in `[0, 1)`.
    pub initial_sparsity: f64,
    /// Final sparsity in `(0, 1]`.
    pub final_sparsity: f64,
    /// First pruning step (t0), non-negative.
    pub start_step: usize,
    /// Steps between pruning events (dt), positive.
    pub interval: usize,
    /// Number of pruning events after the first (n), positive.
    pub events: usize,
}

impl SparsitySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.initial_sparsity) {
            return Err(Error::Parameter(format!(
                "initial sparsity must be in [0, 1), got {}",
                self.initial_sparsity
            )));
        }
        if !(self.final_sparsity > 0.0 && self.final_sparsity <= 1.0) {
            return Err(Error::Parameter(format!(
                "final sparsity must be in (0, 1], got {}",
                self.final_sparsity
            )));
        }
        if self.final_sparsity < self.initial_sparsity {
            return Err(Error::Parameter(format!(
                "final sparsity {} below initial sparsity {}",
                self.final_sparsity, self.initial_sparsity
            )));
        }
        if self.interval == 0 {
            return Err(Error::Parameter("schedule interval must be positive".into()));
        }
        if self.events == 0 {
            return Err(Error::Parameter("schedule needs at least one event".into()));
        }
        Ok(())
    }

    /// Last step in the schedule domain: `t0 + n * dt`.
    pub fn end_step(&self) -> usize {
        self.start_step + self.events * self.interval
    }

    /// Whether `t` is a scheduled pruning event.
    pub fn contains(&self, t: usize) -> bool {
        t >= self.start_step
            && t <= self.end_step()
            && (t - self.start_step).is_multiple_of(self.interval)
    }

    /// All event steps in order.
    pub fn domain(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.events).map(move |k| self.start_step + k * self.interval)
    }
}

/// Target sparsity at event step `t`, by exact evaluation of the cubic
/// schedule. `t` outside the event set is a parameter error.
pub fn schedule_sparsity(sched: &SparsitySchedule, t: usize) -> Result<f64> {
    sched.validate()?;
    if !sched.contains(t) {
        return Err(Error::Parameter(format!(
            "step {t} is not in the schedule domain {{{}, {}, ..., {}}}",
            sched.start_step,
            sched.start_step + sched.interval,
            sched.end_step()
        )));
    }
    // The cubic is 1 at t0 and 0 at the last event; return the endpoint
    // values directly so they are hit exactly in floating point.
    if t == sched.start_step {
        return Ok(sched.initial_sparsity);
    }
    if t == sched.end_step() {
        return Ok(sched.final_sparsity);
    }
    let progress = (t - sched.start_step) as f64 / (sched.events * sched.interval) as f64;
    let cubic = (1.0 - progress).powi(3);
    Ok(sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) * cubic)
}

/// Per-layer binary masks over the prunable weight tensors (1 = kept,
/// 0 = pruned), keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneMask {
    entries: BTreeMap<String, Tensor>,
}

impl PruneMask {
    /// All-ones mask over the model's prunable weight tensors.
    pub fn all_ones(model: &Model) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, w) in model.weight_tensors() {
            entries.insert(name, Tensor::full(w.shape(), 1.0)?);
        }
        Ok(PruneMask { entries })
    }

    pub fn insert(&mut self, name: String, mask: Tensor) -> Result<()> {
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Parameter(format!(
                "mask {name} must be binary (0/1)"
            )));
        }
        self.entries.insert(name, mask);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total entries covered by the mask.
    pub fn covered(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Zeroed entries across all layers.
    pub fn zeros(&self) -> usize {
        self.entries
            .values()
            .map(|t| t.data().iter().filter(|&&m| m == 0.0).count())
            .sum()
    }

    /// Fraction of covered entries that are pruned.
    pub fn sparsity(&self) -> f64 {
        let covered = self.covered();
        if covered == 0 {
            0.0
        } else {
            self.zeros() as f64 / covered as f64
        }
    }

    /// Pruned fraction of one layer.
    pub fn layer_sparsity(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|t| {
            t.data().iter().filter(|&&m| m == 0.0).count() as f64 / t.numel() as f64
        })
    }

    /// True when every zero in `earlier` is still zero here (monotone
    /// pruning).
    pub fn zeros_superset_of(&self, earlier: &PruneMask) -> bool {
        earlier.entries.iter().all(|(name, old)| {
            self.entries.get(name).is_some_and(|new| {
                old.data()
                    .iter()
                    .zip(new.data())
                    .all(|(&o, &n)| o != 0.0 || n == 0.0)
            })
        })
    }
}

/// Mask for a single weight tensor at `target_sparsity`: exactly
/// `floor(target * numel)` zeros, placed on the smallest-magnitude entries.
/// The zeroed set always contains the existing mask's zeros; ties on equal
/// magnitude break toward the lowest flat index.
pub fn magnitude_prune(
    weights: &Tensor,
    target_sparsity: f64,
    existing: Option<&Tensor>,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(Error::Parameter(format!(
            "target sparsity must be in [0, 1], got {target_sparsity}"
        )));
    }
    let numel = weights.numel();
    let prune_count = (target_sparsity * numel as f64).floor() as usize;

    let existing_zero = |i: usize| -> bool {
        existing.is_some_and(|m| m.data()[i] == 0.0)
    };
    if let Some(m) = existing {
        if m.shape() != weights.shape() {
            return Err(Error::Dimension(format!(
                "existing mask shape {:?} does not match weights {:?}",
                m.shape(),
                weights.shape()
            )));
        }
        let already = m.data().iter().filter(|&&v| v == 0.0).count();
        if already > prune_count {
            return Err(Error::Parameter(format!(
                "target sparsity {target_sparsity} would keep only {prune_count} zeros \
                 but {already} entries are already pruned"
            )));
        }
    }

    // Order: already-pruned entries first, then ascending |w|, then ascending
    // flat index.
    let mut order: Vec<usize> = (0..numel).collect();
    order.sort_by(|&a, &b| {
        existing_zero(b)
            .cmp(&existing_zero(a))
            .then_with(|| {
                weights.data()[a]
                    .abs()
                    .partial_cmp(&weights.data()[b].abs())
                    .unwrap()
            })
            .then(a.cmp(&b))
    });

    let mut mask = vec![1.0; numel];
    for &i in order.iter().take(prune_count) {
        mask[i] = 0.0;
    }
    Tensor::new(weights.shape(), mask)
}

/// Zero every masked weight entry, leaving everything else untouched.
/// Idempotent.
pub fn apply_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    for (name, m) in mask.iter() {
        let w = model.parameter_mut(name).ok_or_else(|| {
            Error::Dimension(format!("mask entry {name} has no matching parameter"))
        })?;
        if w.shape() != m.shape() {
            return Err(Error::Dimension(format!(
                "mask {name} shape {:?} does not match weights {:?}",
                m.shape(),
                w.shape()
            )));
        }
        for (wi, &mi) in w.data_mut().iter_mut().zip(m.data()) {
            if mi == 0.0 {
                *wi = 0.0;
            }
        }
    }
    Ok(())
}

/// A pruning run: the trained model, its final mask, and per-step traces.
pub struct PruneOutcome {
    pub model: Model,
    pub mask: PruneMask,
    /// Loss per training step.
    pub loss_trace: Vec<f64>,
    /// Scheduled target sparsity per step (holds at the last event's value
    /// between events).
    pub target_sparsity_trace: Vec<f64>,
    /// Mask-measured sparsity per step over the prunable set.
    pub measured_sparsity_trace: Vec<f64>,
    /// Per-layer mask-measured sparsity at the final step.
    pub final_layer_sparsity: BTreeMap<String, f64>,
    /// Mask snapshot after each pruning event, in event order.
    pub event_masks: Vec<(usize, PruneMask)>,
}

fn prune_all_layers(model: &mut Model, mask: &mut PruneMask, target: f64) -> Result<()> {
    let names: Vec<String> = model
        .weight_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for name in names {
        let weights = model
            .parameter_mut(&name)
            .expect("weight tensor name came from the model")
            .clone();
        let entry = magnitude_prune(&weights, target, mask.get(&name))?;
        mask.insert(name, entry)?;
    }
    apply_mask(model, mask)
}

/// Train while pruning on the cubic schedule: at each event step the
/// per-layer masks are recomputed to the scheduled sparsity and applied, and
/// after every step the mask is re-applied so pruned weights stay zero.
pub fn gradual_prune_train(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    sched: &SparsitySchedule,
) -> Result<PruneOutcome> {
    sched.validate()?;
    cfg.validate()?;
    if cfg.steps < sched.end_step() {
        return Err(Error::Parameter(format!(
            "schedule runs to step {} but training has only {} steps",
            sched.end_step(),
            cfg.steps
        )));
    }
    let mut model = model;
    let mut mask = PruneMask::all_ones(&model)?;
    let mut current_target = 0.0;
    let mut event_masks = Vec::with_capacity(sched.events + 1);
    if sched.contains(0) {
        current_target = schedule_sparsity(sched, 0)?;
        prune_all_layers(&mut model, &mut mask, current_target)?;
        event_masks.push((0, mask.clone()));
    }

    let mut target_trace = Vec::with_capacity(cfg.steps);
    let mut measured_trace = Vec::with_capacity(cfg.steps);
    let outcome = {
        let mask_ref = &mut mask;
        let target_ref = &mut current_target;
        let events_ref = &mut event_masks;
        let mut hook = |step: usize, m: &mut Model| -> Result<()> {
            if sched.contains(step) {
                *target_ref = schedule_sparsity(sched, step)?;
                prune_all_layers(m, mask_ref, *target_ref)?;
                events_ref.push((step, mask_ref.clone()));
            } else {
                apply_mask(m, mask_ref)?;
            }
            target_trace.push(*target_ref);
            measured_trace.push(mask_ref.sparsity());
            Ok(())
        };
        nn::train(model, data, cfg, &mut [&mut hook])?
    };
    let final_layer_sparsity = mask
        .iter()
        .map(|(n, _)| (n.clone(), mask.layer_sparsity(n).unwrap()))
        .collect();
    Ok(PruneOutcome {
        model: outcome.model,
        mask,
        loss_trace: outcome.loss_trace,
        target_sparsity_trace: target_trace,
        measured_sparsity_trace: measured_trace,
        final_layer_sparsity,
        event_masks,
    })
}

/// Prune to `final_sparsity` in one event before any training, then train for
/// the same duration with the mask pinned.
pub fn one_shot_prune_train(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    final_sparsity: f64,
) -> Result<PruneOutcome> {
    if !(0.0..=1.0).contains(&final_sparsity) {
        return Err(Error::Parameter(format!(
            "final sparsity must be in [0, 1], got {final_sparsity}"
        )));
    }
    cfg.validate()?;
    let mut model = model;
    let mut mask = PruneMask::all_ones(&model)?;
    prune_all_layers(&mut model, &mut mask, final_sparsity)?;
    let event_masks = vec![(0, mask.clone())];

    let mut target_trace = Vec::with_capacity(cfg.steps);
    let mut measured_trace = Vec::with_capacity(cfg.steps);
    let outcome = {
        let mask_ref = &mut mask;
        let mut hook = |_step: usize, m: &mut Model| -> Result<()> {
            apply_mask(m, mask_ref)?;
            target_trace.push(final_sparsity);
            measured_trace.push(mask_ref.sparsity());
            Ok(())
        };
        nn::train(model, data, cfg, &mut [&mut hook])?
    };
    let final_layer_sparsity = mask
        .iter()
        .map(|(n, _)| (n.clone(), mask.layer_sparsity(n).unwrap()))
        .collect();
    Ok(PruneOutcome {
        model: outcome.model,
        mask,
        loss_trace: outcome.loss_trace,
        target_sparsity_trace: target_trace,
        measured_sparsity_trace: measured_trace,
        final_layer_sparsity,
        event_masks,
    })
}
