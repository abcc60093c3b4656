//! Pass composition: run compression passes in sequence, each starting from
//! the previous pass's output model, and report per-stage and end-to-end
//! compression.
//!
//! Stage reports carry the rate relative to the stage's input; the final
//! `combined` report carries the end-to-end rate against the original
//! baseline. Because both are nonzero-weight-count ratios, the combined rate
//! telescopes into the product of the stage rates.

use crate::distill::{self, DistillConfig};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::model_io::encode_model;
use crate::harness::report::{
    count_nonzero_weights, measure_inference, CompressionReport, Traces,
};
use crate::lowrank::{self, FactorizationPlan};
use crate::nn::{self, Model, TrainConfig};
use crate::prune::{self, PruneMask, SparsitySchedule};

/// How target ranks are chosen for a low-rank pass.
#[derive(Debug, Clone)]
pub enum RankSpec {
    /// Smallest rank reaching this fraction of spectral energy per layer.
    Energy(f64),
    /// Explicit per-layer ranks.
    Plan(FactorizationPlan),
}

/// One compression pass with its training budget.
#[derive(Debug, Clone)]
pub enum Pass {
    GradualPrune {
        schedule: SparsitySchedule,
        train: TrainConfig,
    },
    OneShotPrune {
        sparsity: f64,
        train: TrainConfig,
    },
    LowRank {
        ranks: RankSpec,
        fine_tune: Option<TrainConfig>,
    },
    Distill {
        student: Model,
        config: DistillConfig,
        train: TrainConfig,
    },
}

impl Pass {
    pub fn method_name(&self) -> &'static str {
        match self {
            Pass::GradualPrune { .. } => "prune_gradual",
            Pass::OneShotPrune { .. } => "prune_one_shot",
            Pass::LowRank { .. } => "lowrank",
            Pass::Distill { .. } => "distill",
        }
    }
}

/// Ordered list of passes.
#[derive(Debug, Clone, Default)]
pub struct PipelineSpec {
    pub passes: Vec<Pass>,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Measure inference time per stage (off by default so reports are
    /// byte-deterministic).
    pub measure_timing: bool,
    pub timing_repeats: usize,
    /// Attach per-step traces to stage reports.
    pub keep_traces: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            measure_timing: false,
            timing_repeats: 3,
            keep_traces: true,
        }
    }
}

/// Everything a pipeline run produces.
#[derive(Debug)]
pub struct PipelineRun {
    /// Baseline report, one report per stage, and a final `combined` report.
    pub reports: Vec<CompressionReport>,
    pub model: Model,
    pub mask: Option<PruneMask>,
}

/// Re-wrap a pass error with stage context, preserving its category (and so
/// its exit code).
fn with_stage(e: Error, stage: usize, name: &str) -> Error {
    let msg = format!("stage {stage} ({name}): {e}");
    match e {
        Error::Dimension(_) => Error::Dimension(msg),
        Error::Parameter(_) => Error::Parameter(msg),
        Error::State(_) => Error::State(msg),
        Error::Numeric(_) => Error::Numeric(msg),
        Error::Format(_) => Error::Format(msg),
        Error::Data(_) => Error::Data(msg),
        Error::Config(_) => Error::Config(msg),
        Error::Io(io) => Error::Io(io),
    }
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    method: &str,
    model: &Model,
    mask: Option<&PruneMask>,
    rate_reference: u64,
    test_data: &Dataset,
    opts: &PipelineOptions,
    baseline_seconds: Option<f64>,
    traces: Option<Traces>,
) -> Result<CompressionReport> {
    let nonzero = count_nonzero_weights(model);
    let disk_bytes = encode_model(model, mask).len() as u64;
    let accuracy = nn::evaluate(model, test_data)?;
    let (inference_seconds, speedup) = match (opts.measure_timing, baseline_seconds) {
        (true, Some(base)) => {
            let secs = measure_inference(model, test_data, opts.timing_repeats)?;
            (secs, base / secs)
        }
        _ => (0.0, 0.0),
    };
    Ok(CompressionReport {
        method: method.to_string(),
        total_params: model.total_params() as u64,
        nonzero_params: nonzero,
        disk_bytes,
        compression_rate: rate_reference as f64 / nonzero as f64,
        inference_seconds,
        speedup,
        accuracy,
        traces,
    })
}

/// Apply the passes in order. The distill pass replaces the model with its
/// student (the current model acts as teacher); structural passes (lowrank,
/// distill) reset the prune mask since the masked tensors no longer exist.
pub fn run_pipeline(
    spec: &PipelineSpec,
    base: Model,
    train_data: &Dataset,
    test_data: &Dataset,
    opts: &PipelineOptions,
) -> Result<PipelineRun> {
    if spec.passes.is_empty() {
        return Err(Error::Parameter("pipeline has no passes".into()));
    }
    let baseline_nonzero = count_nonzero_weights(&base);
    let baseline_seconds = if opts.measure_timing {
        Some(measure_inference(&base, test_data, opts.timing_repeats)?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(spec.passes.len() + 2);
    reports.push(snapshot(
        "baseline",
        &base,
        None,
        baseline_nonzero,
        test_data,
        opts,
        baseline_seconds,
        None,
    )?);

    let mut model = base;
    let mut mask: Option<PruneMask> = None;
    for (stage, pass) in spec.passes.iter().enumerate() {
        let stage_input_nonzero = count_nonzero_weights(&model);
        let mut traces = Traces::default();
        match pass {
            Pass::GradualPrune { schedule, train } => {
                let out = prune::gradual_prune_train(model, train_data, train, schedule)
                    .map_err(|e| with_stage(e, stage, "prune_gradual"))?;
                model = out.model;
                mask = Some(out.mask);
                traces = Traces {
                    loss: out.loss_trace,
                    target_sparsity: out.target_sparsity_trace,
                    measured_sparsity: out.measured_sparsity_trace,
                };
            }
            Pass::OneShotPrune { sparsity, train } => {
                let out = prune::one_shot_prune_train(model, train_data, train, *sparsity)
                    .map_err(|e| with_stage(e, stage, "prune_one_shot"))?;
                model = out.model;
                mask = Some(out.mask);
                traces = Traces {
                    loss: out.loss_trace,
                    target_sparsity: out.target_sparsity_trace,
                    measured_sparsity: out.measured_sparsity_trace,
                };
            }
            Pass::LowRank { ranks, fine_tune } => {
                let plan = match ranks {
                    RankSpec::Energy(e) => lowrank::choose_ranks(&model, *e)?,
                    RankSpec::Plan(p) => p.clone(),
                };
                model = lowrank::rank_constrain_model(&model, &plan)
                    .map_err(|e| with_stage(e, stage, "lowrank"))?;
                mask = None;
                if let Some(cfg) = fine_tune {
                    let out = nn::train(model, train_data, cfg, &mut [])?;
                    model = out.model;
                    traces.loss = out.loss_trace;
                }
            }
            Pass::Distill { student, config, train } => {
                let soft =
                    distill::generate_soft_targets(&model, train_data, config.temperature)?;
                let out = distill::distill_train(student.clone(), train_data, &soft, train, config)
                    .map_err(|e| with_stage(e, stage, "distill"))?;
                model = out.model;
                mask = None;
                traces.loss = out.loss_trace;
            }
        }
        reports.push(snapshot(
            pass.method_name(),
            &model,
            mask.as_ref(),
            stage_input_nonzero,
            test_data,
            opts,
            baseline_seconds,
            opts.keep_traces.then_some(traces),
        )?);
    }

    reports.push(snapshot(
        "combined",
        &model,
        mask.as_ref(),
        baseline_nonzero,
        test_data,
        opts,
        baseline_seconds,
        None,
    )?);
    Ok(PipelineRun {
        reports,
        model,
        mask,
    })
}
