//! Configuration-driven experiment runner: one declarative document
//! describes fitting, pretraining, adaptation, and diagnostics; a matrix
//! section expands into multiple runs sharing a seed.
//!
//! Every run writes its artifacts under `<out_root>/<run_id>/` where
//! `run_id` is the hash of the resolved cell config, so different configs
//! never collide in one output directory. All randomness derives from the
//! single top-level seed; per-stage seeds inside the train sections are
//! overridden by the runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint;
use crate::data::{self, DataError, Dataset, TaskVariant};
use crate::diagnostics::{self, DiagnosticsError};
use crate::fit::{self, FitError, FitLoss, FitReport, FitSpec, FitTarget};
use crate::model::{
    apply_plan, ActivationCfg, AdaptationPlan, Arch, Model, ModelConfig, ModelError, PlanMode,
};
use crate::nora::NoraMode;
use crate::rational::RationalCoeffs;
use crate::train::{self, RunMetrics, TrainConfig, TrainError};
use crate::util;

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Invalid configuration (CLI exit code 2).
    #[error("invalid config: {0}")]
    Config(String),
    /// Runtime numeric failure (CLI exit code 3).
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("comparison refused: {0}")]
    Refused(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::UnknownSite(_) => {
                ExperimentError::Config(e.to_string())
            }
            other => ExperimentError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset => ExperimentError::Config(e.to_string()),
            other => ExperimentError::Numeric(other.to_string()),
        }
    }
}

impl From<FitError> for ExperimentError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::BadSpec(_) | FitError::StudyTooSmall { .. } | FitError::DegreesNotIncreasing => {
                ExperimentError::Config(e.to_string())
            }
            other => ExperimentError::Numeric(other.to_string()),
        }
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

impl From<DiagnosticsError> for ExperimentError {
    fn from(e: DiagnosticsError) -> Self {
        ExperimentError::Numeric(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for ExperimentError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        ExperimentError::Numeric(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Fit,
    Pretrain,
    Adapt,
    Diagnostics,
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Fit, Stage::Pretrain, Stage::Adapt]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub target: FitTarget,
    pub interval: (f64, f64),
    pub grid_points: usize,
    pub m: usize,
    pub n: usize,
    pub loss: FitLoss,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            target: FitTarget::Gelu,
            interval: (-3.0, 3.0),
            grid_points: 2001,
            m: 5,
            n: 4,
            loss: FitLoss::LeastSquares,
            max_iters: 200,
            tol: 1e-10,
        }
    }
}

impl FitSection {
    pub fn to_spec(&self, seed: u64) -> FitSpec {
        let mut spec = FitSpec::new(self.target, self.interval, (self.m, self.n));
        spec.grid_points = self.grid_points;
        spec.loss = self.loss;
        spec.max_iters = self.max_iters;
        spec.tol = self.tol;
        spec.seed = seed;
        spec
    }
}

/// Model architecture section: [`ModelConfig`] minus the seed, which the
/// runner derives from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub activation: ActivationCfg,
    pub head_classes: usize,
    pub in_features: usize,
    pub tokens: usize,
    pub layer_norm_trainable: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::MiniTransformer,
            depth: 2,
            hidden: 32,
            heads: 1,
            ffn_mult: 4,
            activation: ActivationCfg::FixedGelu,
            head_classes: 2,
            in_features: 16,
            tokens: 4,
            layer_norm_trainable: false,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            depth: self.depth,
            hidden: self.hidden,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            activation: self.activation.clone(),
            head_classes: self.head_classes,
            in_features: self.in_features,
            tokens: self.tokens,
            layer_norm_trainable: self.layer_norm_trainable,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    XorGaussians {
        #[serde(default = "default_train_samples")]
        samples: usize,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_cluster_scale")]
        cluster_scale: f64,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        #[serde(default = "default_target_scale")]
        target_scale: f64,
        #[serde(default = "default_target_offset")]
        target_offset: f64,
    },
    Piecewise {
        #[serde(default = "default_train_samples")]
        samples: usize,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        label_noise: f64,
        #[serde(default = "default_target_scale")]
        target_scale: f64,
        #[serde(default = "default_target_offset")]
        target_offset: f64,
    },
    File {
        train: String,
        eval: String,
        #[serde(default)]
        target_train: Option<String>,
        #[serde(default)]
        target_eval: Option<String>,
    },
}

fn default_train_samples() -> usize {
    512
}
fn default_eval_samples() -> usize {
    512
}
fn default_dim() -> usize {
    16
}
fn default_cluster_scale() -> f64 {
    1.0
}
fn default_noise_std() -> f64 {
    0.45
}
fn default_target_scale() -> f64 {
    2.5
}
fn default_target_offset() -> f64 {
    0.6
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::XorGaussians {
            samples: default_train_samples(),
            eval_samples: default_eval_samples(),
            dim: default_dim(),
            cluster_scale: default_cluster_scale(),
            noise_std: default_noise_std(),
            target_scale: default_target_scale(),
            target_offset: default_target_offset(),
        }
    }
}

/// The four datasets a transfer experiment can touch.
pub struct DataBundle {
    pub source_train: Dataset,
    pub source_eval: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

impl DataSection {
    pub fn build(&self, seed: u64) -> Result<DataBundle, ExperimentError> {
        match self {
            DataSection::XorGaussians {
                samples,
                eval_samples,
                dim,
                cluster_scale,
                noise_std,
                target_scale,
                target_offset,
            } => {
                let base = data::XorGaussiansSpec {
                    samples: *samples,
                    dim: *dim,
                    cluster_scale: *cluster_scale,
                    noise_std: *noise_std,
                    variant: TaskVariant::Source,
                };
                let make = |variant: TaskVariant, count: usize, label: &str| {
                    let spec = data::XorGaussiansSpec {
                        variant,
                        samples: count,
                        ..base.clone()
                    };
                    data::xor_gaussians(&spec, derive_seed(seed, label))
                };
                let target = TaskVariant::Target {
                    scale: *target_scale,
                    offset: *target_offset,
                };
                Ok(DataBundle {
                    source_train: make(TaskVariant::Source, *samples, "data-source-train")?,
                    source_eval: make(TaskVariant::Source, *eval_samples, "data-source-eval")?,
                    target_train: make(target, *samples, "data-target-train")?,
                    target_eval: make(target, *eval_samples, "data-target-eval")?,
                })
            }
            DataSection::Piecewise {
                samples,
                eval_samples,
                dim,
                label_noise,
                target_scale,
                target_offset,
            } => {
                let base = data::PiecewiseSpec {
                    samples: *samples,
                    dim: *dim,
                    label_noise: *label_noise,
                    variant: TaskVariant::Source,
                };
                let make = |variant: TaskVariant, count: usize, label: &str| {
                    let spec = data::PiecewiseSpec {
                        variant,
                        samples: count,
                        ..base.clone()
                    };
                    data::piecewise(&spec, derive_seed(seed, label))
                };
                let target = TaskVariant::Target {
                    scale: *target_scale,
                    offset: *target_offset,
                };
                Ok(DataBundle {
                    source_train: make(TaskVariant::Source, *samples, "data-source-train")?,
                    source_eval: make(TaskVariant::Source, *eval_samples, "data-source-eval")?,
                    target_train: make(target, *samples, "data-target-train")?,
                    target_eval: make(target, *eval_samples, "data-target-eval")?,
                })
            }
            DataSection::File {
                train,
                eval,
                target_train,
                target_eval,
            } => {
                let source_train = Dataset::read_file(Path::new(train))?;
                let source_eval = Dataset::read_file(Path::new(eval))?;
                let target_train = match target_train {
                    Some(p) => Dataset::read_file(Path::new(p))?,
                    None => source_train.clone(),
                };
                let target_eval = match target_eval {
                    Some(p) => Dataset::read_file(Path::new(p))?,
                    None => source_eval.clone(),
                };
                Ok(DataBundle {
                    source_train,
                    source_eval,
                    target_train,
                    target_eval,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapSection {
    pub groups: usize,
}

impl Default for SwapSection {
    fn default() -> Self {
        SwapSection { groups: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub plan: PlanMode,
    pub include_head: bool,
    /// Replace activations with the fitted rational before adapting.
    pub swap: Option<SwapSection>,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            plan: PlanMode::Nora {
                nora: crate::model::NoraPlan {
                    rank: 2,
                    mode: NoraMode::Both,
                    sites: None,
                },
            },
            include_head: true,
            swap: Some(SwapSection::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub probe_samples: usize,
    pub lipschitz_interval: (f64, f64),
    pub grid_points: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            probe_samples: 64,
            lipschitz_interval: (-8.0, 8.0),
            grid_points: 2001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Output root; falls back to `NORA_OUT_ROOT`, then `./nora-out`.
    pub dir: Option<String>,
    /// Zero the seconds column in metrics files so reruns are byte-identical
    /// (true wall times still go to report.json).
    pub deterministic_timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            deterministic_timing: true,
        }
    }
}

/// One declarative experiment; a non-empty `matrix` expands dotted-path
/// overrides into a cross product of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub fit: FitSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub adaptation: AdaptSection,
    pub train: TrainSection,
    pub diagnostics: DiagnosticsSection,
    pub output: OutputSection,
    pub matrix: BTreeMap<String, Vec<serde_json::Value>>,
}

impl ExperimentConfig {
    pub fn stages_or_default(&self) -> Vec<Stage> {
        if self.stages.is_empty() {
            default_stages()
        } else {
            self.stages.clone()
        }
    }
}

/// Parses a config document, reporting the offending field path on error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        ExperimentError::Config(format!("{}: {}", e.path(), e.inner()))
    })
}

/// Canonical serialization used for hashing and `config.json`.
pub fn canonical_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

/// Hash of the resolved config. The output section is excluded: where
/// artifacts land does not change what the run computes.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut identity = config.clone();
    identity.output = OutputSection::default();
    format!("{:016x}", util::fnv1a64(canonical_json(&identity).as_bytes()))
}

fn derive_seed(master: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    util::fnv1a64(&bytes)
}

/// Expands the matrix section into resolved cell configs (the base config
/// itself when the matrix is empty). Cell order is the deterministic cross
/// product in key order.
pub fn expand_matrix(config: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, ExperimentError> {
    if config.matrix.is_empty() {
        return Ok(vec![config.clone()]);
    }
    let mut base = config.clone();
    let matrix = std::mem::take(&mut base.matrix);
    let mut cells: Vec<serde_json::Value> = vec![serde_json::to_value(&base)?];
    for (path, values) in &matrix {
        if values.is_empty() {
            return Err(ExperimentError::Config(format!(
                "matrix key {path} has no values"
            )));
        }
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for value in values {
                let mut updated = cell.clone();
                set_path(&mut updated, path, value.clone())?;
                next.push(updated);
            }
        }
        cells = next;
    }
    cells
        .into_iter()
        .map(|value| {
            let text = serde_json::to_string(&value)?;
            parse_config(&text)
        })
        .collect()
}

fn set_path(
    value: &mut serde_json::Value,
    path: &str,
    new_value: serde_json::Value,
) -> Result<(), ExperimentError> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let object = cursor.as_object_mut().ok_or_else(|| {
            ExperimentError::Config(format!(
                "matrix path {path}: {} is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            object.insert(part.to_string(), new_value);
            return Ok(());
        }
        cursor = object
            .entry(part.to_string())
            .or_insert(serde_json::Value::Object(Default::default()));
    }
    Err(ExperimentError::Config(format!("empty matrix path {path}")))
}

/// One metrics row; the CSV schema is
/// `run_id,stage,epoch,split,loss,acc,trainable_params,seconds`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub trainable_params: usize,
    pub seconds: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("run_id,stage,epoch,split,loss,acc,trainable_params,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run_id, r.stage, r.epoch, r.split, r.loss, r.acc, r.trainable_params, r.seconds
        ));
    }
    out
}

pub fn metrics_jsonl(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_eval_loss: f64,
    pub final_eval_acc: f64,
    pub trainable_params: usize,
    pub wall_seconds: f64,
}

fn summarize(metrics: &RunMetrics) -> StageSummary {
    let last = metrics.rows.last().expect("epochs >= 1");
    StageSummary {
        epochs: metrics.rows.len(),
        final_train_loss: last.train_loss,
        final_train_acc: last.train_acc,
        final_eval_loss: metrics.final_eval_loss,
        final_eval_acc: metrics.final_eval_acc,
        trainable_params: metrics.trainable_params,
        wall_seconds: metrics.wall_seconds,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dim: usize,
    pub classes: usize,
    pub source_hash: String,
    pub target_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DiagnosticsSummary {
    pub adaptability_mean: Option<f64>,
    pub adaptability_per_layer: Vec<(String, f64)>,
    pub lipschitz_bound: Option<f64>,
    pub deviation_violations: Option<usize>,
    pub deviation_max_lhs: Option<f64>,
}

/// Everything `report.json` records about one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_hash: String,
    pub cell_index: usize,
    pub dataset: Option<DatasetInfo>,
    pub fit: Option<FitReport>,
    pub pretrain: Option<StageSummary>,
    pub adapt: Option<StageSummary>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: RunReport,
}

fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Resolves the output root: config, then `NORA_OUT_ROOT`, then `./nora-out`.
pub fn output_root(config: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = &config.output.dir {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("NORA_OUT_ROOT") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("nora-out")
}

/// Executes every cell of the config. Artifacts land under
/// `<root>/<run_id>/`; the returned outcomes preserve cell order.
pub fn run(config: &ExperimentConfig) -> Result<Vec<RunOutcome>, ExperimentError> {
    let root = output_root(config);
    let cells = expand_matrix(config)?;
    let mut outcomes = Vec::with_capacity(cells.len());
    for (index, cell) in cells.iter().enumerate() {
        outcomes.push(run_cell(cell, &root, index)?);
    }
    Ok(outcomes)
}

fn run_cell(
    config: &ExperimentConfig,
    root: &Path,
    cell_index: usize,
) -> Result<RunOutcome, ExperimentError> {
    let started = std::time::Instant::now();
    let hash = config_hash(config);
    let run_id = hash.clone();
    let run_dir = root.join(&run_id);
    std::fs::create_dir_all(&run_dir)?;
    atomic_write(&run_dir.join("config.json"), canonical_json(config).as_bytes())?;

    let stages = config.stages_or_default();
    let zero_time = config.output.deterministic_timing;
    let mut warnings = Vec::new();
    let mut rows: Vec<MetricsRow> = Vec::new();

    // Datasets are needed by pretrain/adapt/diagnostics.
    let needs_data = stages
        .iter()
        .any(|s| matches!(s, Stage::Pretrain | Stage::Adapt | Stage::Diagnostics));
    let bundle = if needs_data {
        Some(config.data.build(config.seed)?)
    } else {
        None
    };
    let dataset_info = bundle.as_ref().map(|b| DatasetInfo {
        dim: b.source_train.dim(),
        classes: b.source_train.classes,
        source_hash: format!("{:016x}", b.source_train.content_hash()),
        target_hash: format!("{:016x}", b.target_train.content_hash()),
    });

    // Stage: fit.
    let mut fit_report: Option<FitReport> = None;
    if stages.contains(&Stage::Fit) {
        let spec = config.fit.to_spec(derive_seed(config.seed, "fit"));
        let report = fit::fit_rational(&spec)?;
        if !report.converged {
            warnings.push(format!(
                "fit did not converge within {} iterations",
                spec.max_iters
            ));
        }
        atomic_write(
            &run_dir.join("fit_report.json"),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        fit_report = Some(report);
    }

    // Stage: pretrain.
    let mut pretrain_summary = None;
    let mut pretrained: Option<Model> = None;
    if stages.contains(&Stage::Pretrain) {
        let bundle = bundle.as_ref().expect("datasets built");
        let model_config = config.model.to_config(derive_seed(config.seed, "model"));
        let mut model = Model::build(&model_config)?;
        let plan = AdaptationPlan {
            mode: PlanMode::Full,
            include_head: true,
            seed: derive_seed(config.seed, "pretrain-plan"),
        };
        apply_plan(&mut model, &plan)?;
        let mut train_cfg = config.train.pretrain.clone();
        train_cfg.seed = derive_seed(config.seed, "pretrain");
        let metrics = train::train(
            &mut model,
            &bundle.source_train,
            Some(&bundle.source_eval),
            &train_cfg,
        )?;
        push_rows(&mut rows, &run_id, "pretrain", &metrics, zero_time);
        checkpoint::save(&run_dir.join("pretrain.ckpt"), &model, None, config.seed)?;
        pretrain_summary = Some(summarize(&metrics));
        pretrained = Some(model);
    }

    // Stage: adapt.
    let mut adapt_summary = None;
    let mut adapted: Option<Model> = None;
    let mut frozen_base: Option<Model> = None;
    if stages.contains(&Stage::Adapt) {
        let bundle = bundle.as_ref().expect("datasets built");
        let mut model = match pretrained.take() {
            Some(m) => m,
            None => {
                let model_config = config.model.to_config(derive_seed(config.seed, "model"));
                Model::build(&model_config)?
            }
        };
        if let Some(swap) = &config.adaptation.swap {
            let coeffs: &RationalCoeffs = match &fit_report {
                Some(r) => &r.coeffs,
                None => {
                    return Err(ExperimentError::Config(
                        "adaptation.swap requires the fit stage".into(),
                    ))
                }
            };
            model = model.swap_activation(swap.groups, Some(coeffs))?;
        }
        let plan = AdaptationPlan {
            mode: config.adaptation.plan.clone(),
            include_head: config.adaptation.include_head,
            seed: derive_seed(config.seed, "adapt-plan"),
        };
        warnings.extend(apply_plan(&mut model, &plan)?);
        frozen_base = Some(diagnostics::scale_deltas(&model, 0.0));
        let mut train_cfg = config.train.adapt.clone();
        train_cfg.seed = derive_seed(config.seed, "adapt");
        let metrics = train::train(
            &mut model,
            &bundle.target_train,
            Some(&bundle.target_eval),
            &train_cfg,
        )?;
        push_rows(&mut rows, &run_id, "adapt", &metrics, zero_time);
        checkpoint::save(
            &run_dir.join("adapted.ckpt"),
            &model,
            Some(&plan),
            config.seed,
        )?;
        adapt_summary = Some(summarize(&metrics));
        adapted = Some(model);
    }

    // Stage: diagnostics.
    let mut diag_summary = None;
    if stages.contains(&Stage::Diagnostics) {
        let bundle = bundle.as_ref().expect("datasets built");
        let mut summary = DiagnosticsSummary::default();
        if let (Some(before), Some(after)) = (&frozen_base, &adapted) {
            let count = config
                .diagnostics
                .probe_samples
                .max(1)
                .min(bundle.target_eval.len());
            let indices: Vec<usize> = (0..count).collect();
            let (probe, _) = bundle.target_eval.batch(&indices);
            let adaptability = diagnostics::adaptability_score(before, after, &probe)?;
            summary.adaptability_mean = Some(adaptability.mean);
            summary.adaptability_per_layer = adaptability.per_layer.clone();
            if config.model.arch == Arch::Mlp {
                let lip = diagnostics::lipschitz_bound(
                    after,
                    config.diagnostics.lipschitz_interval,
                    config.diagnostics.grid_points,
                )?;
                summary.lipschitz_bound = Some(lip.product_bound);
                // The deviation pair must differ only in activation deltas,
                // so compare against the trained model with deltas zeroed
                // (shares the trained head).
                let zero_delta = diagnostics::scale_deltas(after, 0.0);
                let deviation = diagnostics::deviation_check(&zero_delta, after, &probe)?;
                summary.deviation_violations = Some(deviation.violations);
                summary.deviation_max_lhs = Some(
                    deviation
                        .probes
                        .iter()
                        .map(|p| p.lhs)
                        .fold(0.0, f64::max),
                );
            }
        } else {
            warnings.push("diagnostics stage needs the adapt stage; skipped".into());
        }
        diag_summary = Some(summary);
    }

    atomic_write(
        &run_dir.join("metrics.csv"),
        metrics_csv(&rows).as_bytes(),
    )?;
    atomic_write(
        &run_dir.join("metrics.jsonl"),
        metrics_jsonl(&rows).as_bytes(),
    )?;
    let report = RunReport {
        run_id,
        config_hash: hash,
        cell_index,
        dataset: dataset_info,
        fit: fit_report,
        pretrain: pretrain_summary,
        adapt: adapt_summary,
        diagnostics: diag_summary,
        warnings,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    atomic_write(
        &run_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(RunOutcome { run_dir, report })
}

fn push_rows(
    rows: &mut Vec<MetricsRow>,
    run_id: &str,
    stage: &str,
    metrics: &RunMetrics,
    zero_time: bool,
) {
    for row in &metrics.rows {
        let seconds = if zero_time { 0.0 } else { row.seconds };
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            stage: stage.to_string(),
            epoch: row.epoch,
            split: "train".into(),
            loss: row.train_loss,
            acc: row.train_acc,
            trainable_params: metrics.trainable_params,
            seconds,
        });
        if let (Some(loss), Some(acc)) = (row.eval_loss, row.eval_acc) {
            rows.push(MetricsRow {
                run_id: run_id.to_string(),
                stage: stage.to_string(),
                epoch: row.epoch,
                split: "eval".into(),
                loss,
                acc,
                trainable_params: metrics.trainable_params,
                seconds,
            });
        }
    }
}

/// Consolidated comparison of completed runs: final accuracy, trainable
/// parameter counts, wall time, and deltas against the first run. Refuses
/// to compare runs over different datasets.
pub fn compare(run_dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    if run_dirs.len() < 2 {
        return Err(ExperimentError::Config(
            "compare needs at least two run directories".into(),
        ));
    }
    let mut reports = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            ExperimentError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let report: RunReport = serde_json::from_str(&text)?;
        reports.push(report);
    }
    let first_ds = reports[0].dataset.as_ref().map(|d| &d.target_hash);
    for report in &reports[1..] {
        let ds = report.dataset.as_ref().map(|d| &d.target_hash);
        if ds != first_ds {
            return Err(ExperimentError::Refused(format!(
                "run {} used a different dataset ({:?}) than run {} ({:?}); \
                 results are not comparable",
                report.run_id, ds, reports[0].run_id, first_ds
            )));
        }
    }
    let final_of = |r: &RunReport| {
        r.adapt
            .as_ref()
            .or(r.pretrain.as_ref())
            .map(|s| (s.final_eval_acc, s.trainable_params, s.wall_seconds))
    };
    let Some((first_acc, _, _)) = final_of(&reports[0]) else {
        return Err(ExperimentError::Config(format!(
            "run {} has no completed training stage",
            reports[0].run_id
        )));
    };
    let mut out =
        String::from("run_id,final_acc,trainable_params,wall_seconds,delta_acc_vs_first\n");
    for report in &reports {
        let Some((acc, params, wall)) = final_of(report) else {
            return Err(ExperimentError::Config(format!(
                "run {} has no completed training stage",
                report.run_id
            )));
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.run_id,
            acc,
            params,
            wall,
            acc - first_acc
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_parses_with_defaults() {
        let config = parse_config("{}").unwrap();
        assert_eq!(config.seed, 0);
        assert_eq!(config.stages_or_default(), default_stages());
        assert_eq!(config.model.hidden, 32);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = parse_config(r#"{"model": {"hiden": 32}}"#).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("model"), "{message}");
        assert!(message.contains("hiden"), "{message}");
    }

    #[test]
    fn round_trips_identically() {
        let text = r#"{"seed": 9, "stages": ["fit"], "fit": {"target": {"kind": "tanh"}, "m": 3, "n": 2}}"#;
        let config = parse_config(text).unwrap();
        let serialized = canonical_json(&config);
        let reparsed = parse_config(&serialized).unwrap();
        assert_eq!(config, reparsed);
        assert_eq!(config_hash(&config), config_hash(&reparsed));
    }

    #[test]
    fn matrix_expands_cross_product() {
        let text = r#"{
            "matrix": {
                "adaptation.plan.nora.rank": [1, 2],
                "seed": [5, 6, 7]
            }
        }"#;
        let config = parse_config(text).unwrap();
        let cells = expand_matrix(&config).unwrap();
        assert_eq!(cells.len(), 6);
        // All cells distinct, matrix cleared.
        let hashes: std::collections::HashSet<String> =
            cells.iter().map(config_hash).collect();
        assert_eq!(hashes.len(), 6);
        assert!(cells.iter().all(|c| c.matrix.is_empty()));
        assert_eq!(cells[0].seed, 5);
        assert_eq!(cells[5].seed, 7);
    }

    #[test]
    fn matrix_with_bad_path_fails_loudly() {
        let text = r#"{"matrix": {"adaptation.plam": [1]}}"#;
        let config = parse_config(text).unwrap();
        assert!(expand_matrix(&config).is_err());
    }

    #[test]
    fn metrics_csv_schema() {
        let rows = vec![MetricsRow {
            run_id: "abc".into(),
            stage: "adapt".into(),
            epoch: 0,
            split: "train".into(),
            loss: 0.5,
            acc: 0.75,
            trainable_params: 42,
            seconds: 0.0,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(
            "run_id,stage,epoch,split,loss,acc,trainable_params,seconds\n"
        ));
        assert!(csv.contains("abc,adapt,0,train,0.5,0.75,42,0"));
    }

    #[test]
    fn plan_mode_round_trips_through_serde() {
        let plan = PlanMode::Nora {
            nora: crate::model::NoraPlan {
                rank: 3,
                mode: NoraMode::NumeratorOnly,
                sites: None,
            },
        };
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains("\"mode\":\"nora\""));
        let back: PlanMode = serde_json::from_str(&text).unwrap();
        assert_eq!(plan, back);
    }
}
