//! Experiment orchestration: TOML config, validation, seeded multi-variant
//! multi-seed execution, and deterministic CSV outputs.
//!
//! Independent (variant, seed) runs execute on a rayon pool; results are
//! merged in canonical order so output files are byte-identical across
//! reruns of the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, average_accuracy, backward_transfer, AccuracyMatrix};
use crate::regularizer::{DistanceKind, RegularizerConfig};
use crate::taskstream::{generate, StreamSpec, TaskDataset};
use crate::trainer::{train_stream, HyperParams, WeightLogRow};

/// Network shape shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32; 5],
        }
    }
}

/// Named overrides applied on top of the base hyper/regularizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub distance: Option<DistanceKind>,
    #[serde(default)]
    pub adaptive: Option<bool>,
    #[serde(default)]
    pub layer_mask: Option<Vec<usize>>,
}

impl VariantConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            alpha: None,
            beta: None,
            gamma: None,
            distance: None,
            adaptive: None,
            layer_mask: None,
        }
    }

    fn apply(&self, hp: &HyperParams, cfg: &RegularizerConfig) -> (HyperParams, RegularizerConfig) {
        let mut hp = hp.clone();
        let mut cfg = cfg.clone();
        if let Some(a) = self.alpha {
            hp.alpha = a;
        }
        if let Some(b) = self.beta {
            hp.beta = b;
        }
        if let Some(g) = self.gamma {
            hp.gamma = g;
        }
        if let Some(d) = self.distance {
            cfg.distance = d;
        }
        if let Some(a) = self.adaptive {
            cfg.adaptive = a;
        }
        if let Some(m) = &self.layer_mask {
            cfg.layer_mask = m.clone();
        }
        (hp, cfg)
    }
}

/// Full experiment description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub hyper: HyperParams,
    pub regularizer: RegularizerConfig,
    pub variants: Vec<VariantConfig>,
    pub num_seeds: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// The builtin demo: the default 5-task blob stream comparing the full
    /// method against its gamma = 0 replay baseline.
    pub fn default_demo(output_dir: PathBuf) -> Self {
        let model = ModelConfig::default();
        Self {
            stream: StreamSpec::default_blobs(),
            regularizer: RegularizerConfig::default_for(model.hidden.len()),
            model,
            hyper: HyperParams::default(),
            variants: vec![
                VariantConfig::named("owmmd"),
                VariantConfig {
                    gamma: Some(0.0),
                    ..VariantConfig::named("derpp")
                },
            ],
            num_seeds: 1,
            output_dir,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize error: {e}")))
    }
}

/// Every constraint violation in the config, each naming the offending field.
/// An empty list means the config is runnable.
pub fn validate(config: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    if let Err(e) = config.stream.validate() {
        out.push(format!("stream: {e}"));
    }
    out.extend(config.hyper.violations());
    if config.model.hidden.is_empty() {
        out.push("model.hidden: need at least one feature layer".into());
    }
    if config.model.hidden.iter().any(|&w| w == 0) {
        out.push("model.hidden: layer widths must be positive".into());
    }
    let k = config.model.hidden.len();
    if let Err(e) = config.regularizer.validate(k) {
        out.push(format!("regularizer: {e}"));
    }
    if config.num_seeds < 1 {
        out.push("num_seeds: must be >= 1".into());
    }
    let mut names = std::collections::BTreeSet::new();
    for v in &config.variants {
        if v.name.is_empty() {
            out.push("variants: names must be nonempty".into());
        }
        if !names.insert(v.name.clone()) {
            out.push(format!("variants: name `{}` repeated", v.name));
        }
        let (hp, cfg) = v.apply(&config.hyper, &config.regularizer);
        for viol in hp.violations() {
            out.push(format!("variants.{}: {viol}", v.name));
        }
        if let Err(e) = cfg.validate(k) {
            out.push(format!("variants.{}: regularizer: {e}", v.name));
        }
        if cfg.distance == DistanceKind::Mmd && hp.batch_size < 2 {
            out.push(format!(
                "variants.{}: batch_size {} too small; the unbiased MMD estimator needs N >= 2",
                v.name, hp.batch_size
            ));
        }
    }
    if config.variants.is_empty() {
        out.push("variants: need at least one".into());
    }
    if config.regularizer.distance == DistanceKind::Mmd && config.hyper.batch_size < 2 {
        out.push(format!(
            "hyper.batch_size: {} too small; the unbiased MMD estimator needs N >= 2",
            config.hyper.batch_size
        ));
    }
    out
}

/// One finished (variant, seed) run.
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub weight_log: Vec<WeightLogRow>,
}

/// Paths of the merged CSV files plus the in-memory records behind them.
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub weights_path: PathBuf,
}

/// Execute every variant x seed combination and write metrics.csv,
/// summary.csv, and weights.csv under the configured output directory.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let violations = validate(config);
    if !violations.is_empty() {
        return Err(Error::Config(violations.join("; ")));
    }
    let tasks = generate(&config.stream)?;
    let records = run_records(config, &tasks)?;
    std::fs::create_dir_all(&config.output_dir)?;

    let metrics_path = config.output_dir.join("metrics.csv");
    let summary_path = config.output_dir.join("summary.csv");
    let weights_path = config.output_dir.join("weights.csv");
    write_atomic(&metrics_path, &render_metrics(&records))?;
    write_atomic(&summary_path, &render_summary(config, &records)?)?;
    write_atomic(&weights_path, &render_weights(&records, config.model.hidden.len()))?;
    Ok(ExperimentOutput {
        records,
        metrics_path,
        summary_path,
        weights_path,
    })
}

/// Train every (variant, seed) job; independent runs go wide on the rayon
/// pool and come back in canonical (variant order, ascending seed) order.
pub fn run_records(config: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Vec<RunRecord>> {
    let mut jobs = Vec::new();
    for variant in &config.variants {
        let (hp, cfg) = variant.apply(&config.hyper, &config.regularizer);
        for idx in 0..config.num_seeds {
            let mut hp = hp.clone();
            hp.seed = config.hyper.seed.wrapping_add(idx as u64);
            jobs.push((variant.name.clone(), hp, cfg.clone()));
        }
    }
    jobs.into_par_iter()
        .map(|(name, hp, cfg)| {
            let outcome = train_stream(tasks, &config.model.hidden, &hp, &cfg)?;
            Ok(RunRecord {
                variant: name,
                seed: hp.seed,
                class_il: outcome.class_il,
                task_il: outcome.task_il,
                weight_log: outcome.weight_log,
            })
        })
        .collect()
}

fn render_metrics(records: &[RunRecord]) -> String {
    let mut out = String::from("variant,seed,task,eval_task,accuracy,mode\n");
    for r in records {
        for (matrix, mode) in [(&r.class_il, "class_il"), (&r.task_il, "task_il")] {
            for (i, row) in matrix.rows().iter().enumerate() {
                for (j, acc) in row.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        r.variant,
                        r.seed,
                        i + 1,
                        j + 1,
                        acc,
                        mode
                    );
                }
            }
        }
    }
    out
}

fn render_summary(config: &ExperimentConfig, records: &[RunRecord]) -> Result<String> {
    let mut out = String::from("variant,mode,avg_acc_mean,avg_acc_std,bwt_mean,bwt_std\n");
    let single_task = config.stream.num_tasks < 2;
    for variant in &config.variants {
        for mode in ["class_il", "task_il"] {
            let matrices: Vec<&AccuracyMatrix> = records
                .iter()
                .filter(|r| r.variant == variant.name)
                .map(|r| match mode {
                    "class_il" => &r.class_il,
                    _ => &r.task_il,
                })
                .collect();
            let accs: Vec<f64> = matrices
                .iter()
                .map(|m| average_accuracy(m))
                .collect::<Result<_>>()?;
            let (acc_mean, acc_std) = aggregate(&accs)?;
            if single_task {
                let _ = writeln!(out, "{},{},{},{},,", variant.name, mode, acc_mean, acc_std);
            } else {
                let bwts: Vec<f64> = matrices
                    .iter()
                    .map(|m| backward_transfer(m))
                    .collect::<Result<_>>()?;
                let (bwt_mean, bwt_std) = aggregate(&bwts)?;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    variant.name, mode, acc_mean, acc_std, bwt_mean, bwt_std
                );
            }
        }
    }
    Ok(out)
}

fn render_weights(records: &[RunRecord], k: usize) -> String {
    let mut out = String::from("variant,seed,task,epoch");
    for j in 1..=k {
        let _ = write!(out, ",w{j}");
    }
    out.push('\n');
    for r in records {
        for row in &r.weight_log {
            let _ = write!(out, "{},{},{},{}", r.variant, r.seed, row.task, row.epoch);
            for w in &row.weights {
                let _ = write!(out, ",{w}");
            }
            out.push('\n');
        }
    }
    out
}

/// Write via a temp file and rename, so partial outputs never land.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
