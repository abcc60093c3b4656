//! Experiment configuration: one JSON document describing dataset, model,
//! training budget, per-pass parameters, and the pipeline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::harness::data::{
    load_cifar_binary, load_idx, synthetic_blobs, BlobSpec, Dataset, Split,
};
use crate::harness::model_io::load_model;
use crate::harness::pipeline::{Pass, PipelineSpec, RankSpec};
use crate::lowrank::FactorizationPlan;
use crate::nn::{self, Model, TrainConfig};
use crate::prune::{PruneMask, SparsitySchedule};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub prune: Option<PruneSettings>,
    #[serde(default)]
    pub factorize: Option<FactorizeSettings>,
    #[serde(default)]
    pub distill: Option<DistillSettings>,
    #[serde(default)]
    pub pipeline: Vec<PassConfig>,
    #[serde(default)]
    pub timing: TimingSettings,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        serde_json::from_reader(reader)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Build the configured base model (fresh init seeded from `seed`, or a
    /// loaded container).
    pub fn build_model(&self, data: &Dataset, seed: u64) -> Result<(Model, Option<PruneMask>)> {
        self.model.build(data.input_shape(), data.num_classes(), seed)
    }

    /// Turn the `pipeline` section into runnable passes. Each stage trains
    /// with the global settings, its own step budget, and a per-stage seed
    /// derived from `seed` so stages never share RNG streams.
    pub fn build_pipeline(
        &self,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<PipelineSpec> {
        let mut passes = Vec::with_capacity(self.pipeline.len());
        for (i, pass_cfg) in self.pipeline.iter().enumerate() {
            let mut stage_rng = Rng::new(seed.wrapping_add(i as u64 + 1));
            let pass = match pass_cfg {
                PassConfig::Prune(ps) => {
                    let train = self.train.to_config_with(ps.steps, stage_rng.next_u64());
                    match ps.mode {
                        PruneMode::Gradual => Pass::GradualPrune {
                            schedule: ps.schedule(),
                            train,
                        },
                        PruneMode::OneShot => Pass::OneShotPrune {
                            sparsity: ps.final_sparsity,
                            train,
                        },
                    }
                }
                PassConfig::Lowrank(fs) => Pass::LowRank {
                    ranks: fs.rank_spec()?,
                    fine_tune: fs
                        .fine_tune_steps
                        .map(|s| self.train.to_config_with(Some(s), stage_rng.next_u64())),
                },
                PassConfig::Distill(ds) => {
                    let init_seed = stage_rng.next_u64();
                    let (student, _) = ds.student.build(input_shape, num_classes, init_seed)?;
                    Pass::Distill {
                        student,
                        config: ds.to_distill_config(),
                        train: self.train.to_config_with(ds.steps, stage_rng.next_u64()),
                    }
                }
            };
            passes.push(pass);
        }
        Ok(PipelineSpec { passes })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Deterministic class-conditional Gaussian blobs.
    SyntheticBlobs {
        classes: usize,
        shape: [usize; 3],
        noise: f64,
        seed: u64,
        train_count: usize,
        test_count: usize,
    },
    /// IDX image/label file pairs (the MNIST container format).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// CIFAR-10 binary batches.
    CifarBinary {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("dataset file list is empty".into()))?;
    let (c, h, w) = first.input_shape();
    let split = first.split();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut classes = 0;
    for part in &parts {
        if part.input_shape() != (c, h, w) {
            return Err(Error::Data("dataset parts disagree on image shape".into()));
        }
        data.extend_from_slice(part.images().data());
        labels.extend_from_slice(part.labels());
        classes = classes.max(part.num_classes());
    }
    Dataset::new(
        Tensor::new(&[labels.len(), c, h, w], data)?,
        labels,
        classes,
        split,
    )
}

impl DatasetConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::SyntheticBlobs {
                classes,
                shape,
                noise,
                seed,
                train_count,
                test_count,
            } => synthetic_blobs(
                &BlobSpec {
                    classes: *classes,
                    shape: (shape[0], shape[1], shape[2]),
                    noise: *noise,
                    seed: *seed,
                },
                *train_count,
                *test_count,
            ),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx(train_images, train_labels, Split::Train)?;
                let mut test = load_idx(test_images, test_labels, Split::Test)?;
                if let Some(n) = train_limit {
                    train = train.take(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.take(*n)?;
                }
                Ok((train, test))
            }
            DatasetConfig::CifarBinary {
                train,
                test,
                train_limit,
                test_limit,
            } => {
                let mut tr = concat(
                    train
                        .iter()
                        .map(|p| load_cifar_binary(p, Split::Train))
                        .collect::<Result<_>>()?,
                )?;
                let mut te = concat(
                    test.iter()
                        .map(|p| load_cifar_binary(p, Split::Test))
                        .collect::<Result<_>>()?,
                )?;
                if let Some(n) = train_limit {
                    tr = tr.take(*n)?;
                }
                if let Some(n) = test_limit {
                    te = te.take(*n)?;
                }
                Ok((tr, te))
            }
        }
    }
}

fn default_snn_hidden() -> usize {
    46
}

fn default_cnn_hidden() -> usize {
    56
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    TinyVgg,
    Snn {
        #[serde(default = "default_snn_hidden")]
        hidden: usize,
    },
    Cnn {
        #[serde(default = "default_cnn_hidden")]
        hidden: usize,
    },
    /// Load a saved model container instead of initializing fresh weights.
    File { path: PathBuf },
}

impl ModelConfig {
    pub fn build(
        &self,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<(Model, Option<PruneMask>)> {
        let mut rng = Rng::new(seed);
        match self {
            ModelConfig::TinyVgg => Ok((nn::tiny_vgg(input_shape, num_classes, &mut rng)?, None)),
            ModelConfig::Snn { hidden } => Ok((
                nn::snn_student(input_shape, num_classes, *hidden, &mut rng)?,
                None,
            )),
            ModelConfig::Cnn { hidden } => Ok((
                nn::cnn_student(input_shape, num_classes, *hidden, &mut rng)?,
                None,
            )),
            ModelConfig::File { path } => load_model(path),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 0.05,
            batch_size: 16,
            steps: 500,
            weight_decay: 0.0,
            seed: 42,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            weight_decay: self.weight_decay,
        }
    }

    pub fn to_config_with(&self, steps: Option<usize>, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: steps.unwrap_or(self.steps),
            seed,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Gradual,
    OneShot,
}

fn default_interval() -> usize {
    50
}

fn default_events() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSettings {
    #[serde(default)]
    pub mode: PruneMode,
    pub final_sparsity: f64,
    #[serde(default)]
    pub initial_sparsity: f64,
    #[serde(default)]
    pub start_step: usize,
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_events")]
    pub events: usize,
    /// Training budget for this pass; the global budget applies when absent.
    #[serde(default)]
    pub steps: Option<usize>,
}

impl PruneSettings {
    pub fn schedule(&self) -> SparsitySchedule {
        SparsitySchedule {
            initial_sparsity: self.initial_sparsity,
            final_sparsity: self.final_sparsity,
            start_step: self.start_step,
            interval: self.interval,
            events: self.events,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FactorizeSettings {
    #[serde(default)]
    pub energy: Option<f64>,
    /// Explicit layer-index -> rank overrides (JSON object keys are layer
    /// indices).
    #[serde(default)]
    pub ranks: Option<BTreeMap<String, usize>>,
    #[serde(default)]
    pub fine_tune_steps: Option<usize>,
}

impl FactorizeSettings {
    pub fn rank_spec(&self) -> Result<RankSpec> {
        match (&self.energy, &self.ranks) {
            (Some(_), Some(_)) => Err(Error::Config(
                "factorize: specify either energy or ranks, not both".into(),
            )),
            (Some(e), None) => Ok(RankSpec::Energy(*e)),
            (None, Some(map)) => {
                let mut plan = FactorizationPlan::new();
                for (key, &k) in map {
                    let layer: usize = key.parse().map_err(|_| {
                        Error::Config(format!("factorize: layer index {key:?} is not an integer"))
                    })?;
                    plan.set_rank(layer, k);
                }
                Ok(RankSpec::Plan(plan))
            }
            (None, None) => Ok(RankSpec::Energy(0.9)),
        }
    }
}

fn default_temperature() -> f64 {
    4.0
}

fn default_soft_weight() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_soft_weight")]
    pub soft_weight: f64,
    pub student: ModelConfig,
    #[serde(default)]
    pub steps: Option<usize>,
}

impl DistillSettings {
    pub fn to_distill_config(&self) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            soft_weight: self.soft_weight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "pass", rename_all = "snake_case")]
pub enum PassConfig {
    Prune(PruneSettings),
    Lowrank(FactorizeSettings),
    Distill(DistillSettings),
}

fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSettings {
    pub enabled: bool,
    pub repeats: usize,
}

impl Default for TimingSettings {
    fn default() -> Self {
        TimingSettings {
            enabled: false,
            repeats: default_repeats(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let json = r#"{
            "dataset": {"kind": "synthetic_blobs", "classes": 4, "shape": [1, 8, 8],
                        "noise": 0.3, "seed": 7, "train_count": 64, "test_count": 16},
            "model": {"arch": "snn", "hidden": 8}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.train.batch_size, 16);
        assert!(!cfg.timing.enabled);
        let (train, test) = cfg.dataset.load().unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 16);
    }

    #[test]
    fn pipeline_config_builds_passes() {
        let json = r#"{
            "dataset": {"kind": "synthetic_blobs", "classes": 3, "shape": [1, 8, 8],
                        "noise": 0.3, "seed": 7, "train_count": 32, "test_count": 8},
            "model": {"arch": "snn", "hidden": 8},
            "train": {"steps": 40},
            "pipeline": [
                {"pass": "distill", "student": {"arch": "snn", "hidden": 6}, "steps": 20},
                {"pass": "prune", "mode": "one_shot", "final_sparsity": 0.75}
            ]
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        let spec = cfg.build_pipeline((1, 8, 8), 3, 1).unwrap();
        assert_eq!(spec.passes.len(), 2);
        match &spec.passes[0] {
            Pass::Distill { train, .. } => assert_eq!(train.steps, 20),
            other => panic!("expected distill pass, got {}", other.method_name()),
        }
        match &spec.passes[1] {
            Pass::OneShotPrune { sparsity, train } => {
                assert_eq!(*sparsity, 0.75);
                assert_eq!(train.steps, 40);
            }
            other => panic!("expected prune pass, got {}", other.method_name()),
        }
    }

    #[test]
    fn factorize_rank_spec_validation() {
        let both = FactorizeSettings {
            energy: Some(0.9),
            ranks: Some(BTreeMap::from([("0".to_string(), 2)])),
            fine_tune_steps: None,
        };
        assert!(both.rank_spec().is_err());
        let bad_key = FactorizeSettings {
            energy: None,
            ranks: Some(BTreeMap::from([("zero".to_string(), 2)])),
            fine_tune_steps: None,
        };
        assert!(bad_key.rank_spec().is_err());
        let neither = FactorizeSettings::default();
        assert!(matches!(neither.rank_spec().unwrap(), RankSpec::Energy(e) if e == 0.9));
    }

    #[test]
    fn unknown_fields_rejected() {
        let json = r#"{
            "dataset": {"kind": "synthetic_blobs", "classes": 3, "shape": [1, 8, 8],
                        "noise": 0.3, "seed": 7, "train_count": 32, "test_count": 8},
            "model": {"arch": "snn"},
            "not_a_field": 1
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }
}
