//! Command-line driver for the compression toolkit.
//!
//! Every subcommand takes `--config <json>` plus `--seed` and `--out`; see
//! the README for config examples. Exit codes: 0 success, 1 usage or config
//! error, 2 data/format error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nncompress::distill::{generate_soft_targets, distill_train};
use nncompress::error::{Error, Result};
use nncompress::harness::config::{ExperimentConfig, PruneMode, PruneSettings};
use nncompress::harness::pipeline::RankSpec;
use nncompress::harness::report::{
    compression_rate, count_nonzero_weights, emit_report, measure_inference, read_reports,
    CompressionReport,
};
use nncompress::harness::{
    load_model, run_pipeline, save_model, Dataset, PipelineOptions,
};
use nncompress::harness::model_io::encode_model;
use nncompress::lowrank::{choose_ranks, rank_constrain_model, FactorizationPlan};
use nncompress::nn::{self, Model, TrainConfig};
use nncompress::prune::{gradual_prune_train, one_shot_prune_train, PruneMask};
use nncompress::tensor::Rng;

#[derive(Parser)]
#[command(
    name = "nncompress",
    version,
    about = "Neural-network compression: magnitude pruning, low-rank factorization, knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for this command's artifact.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and save it as a model container.
    Train(CommonArgs),
    /// Prune while training (gradual schedule or one-shot), saving model and
    /// mask.
    Prune {
        #[command(flatten)]
        common: CommonArgs,
        /// Target final sparsity in [0, 1] (overrides the config).
        #[arg(long)]
        sparsity: Option<f64>,
        /// Prune on the cubic gradual schedule (the default).
        #[arg(long, conflicts_with = "one_shot")]
        gradual: bool,
        /// Prune to the target all at once before training.
        #[arg(long)]
        one_shot: bool,
    },
    /// Rewrite conv layers as rank-constrained vertical/horizontal pairs.
    Factorize {
        #[command(flatten)]
        common: CommonArgs,
        /// Keep this fraction of spectral energy per layer.
        #[arg(long, conflicts_with = "ranks")]
        energy: Option<f64>,
        /// Explicit per-layer ranks, e.g. "0=4,3=2".
        #[arg(long)]
        ranks: Option<String>,
    },
    /// Distill the configured model into the configured student.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Softening temperature (overrides the config).
        #[arg(long)]
        temperature: Option<f64>,
        /// Weight on the soft-target loss term (overrides the config).
        #[arg(long)]
        soft_weight: Option<f64>,
    },
    /// Run the configured pass pipeline and emit the report file.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// Also save the pipeline's final model here.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Evaluate the configured model on the test split.
    Eval(CommonArgs),
    /// Emit a compression report for the configured model.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Baseline model container the compression rate is measured against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Pretty-print a report file as a table.
    Show {
        /// Report file produced by `pipeline` or `report`.
        #[arg(long)]
        report: PathBuf,
    },
}

struct Experiment {
    config: ExperimentConfig,
    train_data: Dataset,
    test_data: Dataset,
    seed: u64,
    init_seed: u64,
    train_seed: u64,
}

fn load_experiment(common: &CommonArgs) -> Result<Experiment> {
    let config = ExperimentConfig::from_path(&common.config)?;
    let (train_data, test_data) = config.dataset.load()?;
    let seed = common.seed.unwrap_or(config.train.seed);
    // Separate streams for weight init and batch order.
    let mut root = Rng::new(seed);
    let init_seed = root.next_u64();
    let train_seed = root.next_u64();
    Ok(Experiment {
        config,
        train_data,
        test_data,
        seed,
        init_seed,
        train_seed,
    })
}

impl Experiment {
    fn build_model(&self) -> Result<(Model, Option<PruneMask>)> {
        self.config
            .model
            .build(self.train_data.input_shape(), self.train_data.num_classes(), self.init_seed)
    }

    fn train_config(&self) -> TrainConfig {
        self.config.train.to_config_with(None, self.train_seed)
    }
}

fn report_for(
    method: &str,
    model: &Model,
    mask: Option<&PruneMask>,
    baseline: &Model,
    exp: &Experiment,
) -> Result<CompressionReport> {
    let accuracy = nn::evaluate(model, &exp.test_data)?;
    let (inference_seconds, speedup) = if exp.config.timing.enabled {
        let base = measure_inference(baseline, &exp.test_data, exp.config.timing.repeats)?;
        let own = measure_inference(model, &exp.test_data, exp.config.timing.repeats)?;
        (own, base / own)
    } else {
        (0.0, 0.0)
    };
    Ok(CompressionReport {
        method: method.to_string(),
        total_params: model.total_params() as u64,
        nonzero_params: count_nonzero_weights(model),
        disk_bytes: encode_model(model, mask).len() as u64,
        compression_rate: compression_rate(baseline, model),
        inference_seconds,
        speedup,
        accuracy,
        traces: None,
    })
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let exp = load_experiment(common)?;
    let (model, _) = exp.build_model()?;
    let cfg = exp.train_config();
    let outcome = nn::train(model, &exp.train_data, &cfg, &mut [])?;
    let accuracy = nn::evaluate(&outcome.model, &exp.test_data)?;
    save_model(&outcome.model, None, &common.out)?;
    println!(
        "trained {} steps (seed {}): final loss {:.4}, test accuracy {:.4} -> {}",
        cfg.steps,
        exp.seed,
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        accuracy,
        common.out.display()
    );
    Ok(())
}

fn cmd_prune(
    common: &CommonArgs,
    sparsity: Option<f64>,
    gradual: bool,
    one_shot: bool,
) -> Result<()> {
    let exp = load_experiment(common)?;
    let mut settings = exp.config.prune.clone().unwrap_or(PruneSettings {
        mode: PruneMode::Gradual,
        final_sparsity: f64::NAN,
        initial_sparsity: 0.0,
        start_step: 0,
        interval: 50,
        events: 30,
        steps: None,
    });
    if let Some(s) = sparsity {
        settings.final_sparsity = s;
    }
    if settings.final_sparsity.is_nan() {
        return Err(Error::Config(
            "prune needs --sparsity or a `prune` config section".into(),
        ));
    }
    if gradual {
        settings.mode = PruneMode::Gradual;
    } else if one_shot {
        settings.mode = PruneMode::OneShot;
    }
    let (model, _) = exp.build_model()?;
    let baseline = model.clone();
    let cfg = exp
        .config
        .train
        .to_config_with(settings.steps, exp.train_seed);
    let outcome = match settings.mode {
        PruneMode::Gradual => gradual_prune_train(model, &exp.train_data, &cfg, &settings.schedule())?,
        PruneMode::OneShot => {
            one_shot_prune_train(model, &exp.train_data, &cfg, settings.final_sparsity)?
        }
    };
    let accuracy = nn::evaluate(&outcome.model, &exp.test_data)?;
    save_model(&outcome.model, Some(&outcome.mask), &common.out)?;
    println!(
        "pruned to {:.4} sparsity ({:?}, seed {}): rate {:.2}x, test accuracy {:.4} -> {}",
        outcome.mask.sparsity(),
        settings.mode,
        exp.seed,
        compression_rate(&baseline, &outcome.model),
        accuracy,
        common.out.display()
    );
    Ok(())
}

fn parse_ranks(spec: &str) -> Result<FactorizationPlan> {
    let mut plan = FactorizationPlan::new();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (layer, k) = part.split_once('=').ok_or_else(|| {
            Error::Config(format!("--ranks entry {part:?} is not layer=rank"))
        })?;
        let layer = layer.trim().parse().map_err(|_| {
            Error::Config(format!("--ranks layer {layer:?} is not an integer"))
        })?;
        let k = k.trim().parse().map_err(|_| {
            Error::Config(format!("--ranks rank {k:?} is not an integer"))
        })?;
        plan.set_rank(layer, k);
    }
    if plan.is_empty() {
        return Err(Error::Config("--ranks is empty".into()));
    }
    Ok(plan)
}

fn cmd_factorize(common: &CommonArgs, energy: Option<f64>, ranks: Option<&str>) -> Result<()> {
    let exp = load_experiment(common)?;
    let (model, _) = exp.build_model()?;
    let baseline = model.clone();
    let factorize = exp.config.factorize.clone().unwrap_or_default();
    let rank_spec = match (energy, ranks) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("use either --energy or --ranks".into()))
        }
        (Some(e), None) => RankSpec::Energy(e),
        (None, Some(r)) => RankSpec::Plan(parse_ranks(r)?),
        (None, None) => factorize.rank_spec()?,
    };
    let plan = match rank_spec {
        RankSpec::Energy(e) => choose_ranks(&model, e)?,
        RankSpec::Plan(p) => p,
    };
    let mut model = rank_constrain_model(&model, &plan)?;
    if let Some(steps) = factorize.fine_tune_steps {
        let cfg = exp.config.train.to_config_with(Some(steps), exp.train_seed);
        model = nn::train(model, &exp.train_data, &cfg, &mut [])?.model;
    }
    let accuracy = nn::evaluate(&model, &exp.test_data)?;
    save_model(&model, None, &common.out)?;
    println!(
        "factorized {} layers (seed {}): rate {:.2}x, test accuracy {:.4} -> {}",
        plan.len(),
        exp.seed,
        compression_rate(&baseline, &model),
        accuracy,
        common.out.display()
    );
    Ok(())
}

fn cmd_distill(
    common: &CommonArgs,
    temperature: Option<f64>,
    soft_weight: Option<f64>,
) -> Result<()> {
    let exp = load_experiment(common)?;
    let settings = exp.config.distill.clone().ok_or_else(|| {
        Error::Config("distill needs a `distill` config section naming the student".into())
    })?;
    let mut dcfg = settings.to_distill_config();
    if let Some(t) = temperature {
        dcfg.temperature = t;
    }
    if let Some(w) = soft_weight {
        dcfg.soft_weight = w;
    }
    let (teacher, _) = exp.build_model()?;
    let (student, _) = settings.student.build(
        exp.train_data.input_shape(),
        exp.train_data.num_classes(),
        exp.init_seed.wrapping_add(1),
    )?;
    let soft = generate_soft_targets(&teacher, &exp.train_data, dcfg.temperature)?;
    let cache_path = common.out.with_extension("slmt");
    soft.save(&cache_path)?;
    let cfg = exp
        .config
        .train
        .to_config_with(settings.steps, exp.train_seed);
    let outcome = distill_train(student, &exp.train_data, &soft, &cfg, &dcfg)?;
    let accuracy = nn::evaluate(&outcome.model, &exp.test_data)?;
    save_model(&outcome.model, None, &common.out)?;
    println!(
        "distilled (T={}, lambda={}, seed {}): rate {:.2}x, student accuracy {:.4} -> {} (soft targets: {})",
        dcfg.temperature,
        dcfg.soft_weight,
        exp.seed,
        compression_rate(&teacher, &outcome.model),
        accuracy,
        common.out.display(),
        cache_path.display()
    );
    Ok(())
}

fn cmd_pipeline(common: &CommonArgs, model_out: Option<&PathBuf>) -> Result<()> {
    let exp = load_experiment(common)?;
    let (base, _) = exp.build_model()?;
    let spec = exp.config.build_pipeline(
        exp.train_data.input_shape(),
        exp.train_data.num_classes(),
        exp.seed,
    )?;
    let opts = PipelineOptions {
        measure_timing: exp.config.timing.enabled,
        timing_repeats: exp.config.timing.repeats,
        keep_traces: true,
    };
    let run = run_pipeline(&spec, base, &exp.train_data, &exp.test_data, &opts)?;
    emit_report(&run.reports, &common.out)?;
    if let Some(path) = model_out {
        save_model(&run.model, run.mask.as_ref(), path)?;
    }
    for r in &run.reports {
        println!(
            "{:<16} rate {:>8.2}x  accuracy {:.4}  nonzero {}",
            r.method, r.compression_rate, r.accuracy, r.nonzero_params
        );
    }
    println!("report -> {}", common.out.display());
    Ok(())
}

fn cmd_eval(common: &CommonArgs) -> Result<()> {
    let exp = load_experiment(common)?;
    let (model, _) = exp.build_model()?;
    let accuracy = nn::evaluate(&model, &exp.test_data)?;
    let summary = serde_json::json!({
        "accuracy": accuracy,
        "examples": exp.test_data.len(),
        "split": "test",
    });
    std::fs::write(&common.out, format!("{summary:#}\n"))?;
    println!("accuracy {:.4} on {} examples -> {}", accuracy, exp.test_data.len(), common.out.display());
    Ok(())
}

fn cmd_report(common: &CommonArgs, baseline: Option<&PathBuf>) -> Result<()> {
    let exp = load_experiment(common)?;
    let (model, mask) = exp.build_model()?;
    let baseline_model = match baseline {
        Some(path) => load_model(path)?.0,
        None => model.clone(),
    };
    let report = report_for("model", &model, mask.as_ref(), &baseline_model, &exp)?;
    emit_report(std::slice::from_ref(&report), &common.out)?;
    println!(
        "{}: rate {:.2}x, accuracy {:.4}, {} bytes on disk -> {}",
        report.method,
        report.compression_rate,
        report.accuracy,
        report.disk_bytes,
        common.out.display()
    );
    Ok(())
}

fn cmd_show(report: &std::path::Path) -> Result<()> {
    let reports = read_reports(report)?;
    println!(
        "{:<16} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9}",
        "method", "params", "nonzero", "bytes", "rate", "speedup", "accuracy"
    );
    for r in &reports {
        println!(
            "{:<16} {:>12} {:>12} {:>12} {:>8.2}x {:>8.2}x {:>9.4}",
            r.method,
            r.total_params,
            r.nonzero_params,
            r.disk_bytes,
            r.compression_rate,
            r.speedup,
            r.accuracy
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(common) => cmd_train(common),
        Command::Prune {
            common,
            sparsity,
            gradual,
            one_shot,
        } => cmd_prune(common, *sparsity, *gradual, *one_shot),
        Command::Factorize {
            common,
            energy,
            ranks,
        } => cmd_factorize(common, *energy, ranks.as_deref()),
        Command::Distill {
            common,
            temperature,
            soft_weight,
        } => cmd_distill(common, *temperature, *soft_weight),
        Command::Pipeline { common, model_out } => cmd_pipeline(common, model_out.as_ref()),
        Command::Eval(common) => cmd_eval(common),
        Command::Report { common, baseline } => cmd_report(common, baseline.as_ref()),
        Command::Show { report } => cmd_show(report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
