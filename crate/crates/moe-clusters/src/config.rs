//! Experiment configuration: a TOML file with `[task]`, `[model]`,
//! `[train]`, and an optional `[sweep]` table.
//!
//! Every field has a default, so a config file only states what it changes;
//! an empty file reproduces the built-in toy experiment. Unknown keys are
//! rejected (they are almost always typos), and invalid values are reported
//! with their dotted path, e.g. `train.dropout_rate`.
//!
//! The sections convert into the library's native structs via
//! [`ExperimentConfig::task_spec`], [`ExperimentConfig::model_spec`],
//! [`ExperimentConfig::train_settings`], and
//! [`ExperimentConfig::sweep_plan`].

use crate::dropout::DropoutLevel;
use crate::error::{Error, Result};
use crate::gating::GatingKind;
use crate::losses::ClusterConfig;
use crate::model::{ModelDims, ModelSpec, TaskKind};
use crate::simulator::sweep::{SweepAxis, SweepPlan};
use crate::simulator::synthetic::TaskSpec;
use crate::simulator::trainer::TrainSettings;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `[task]`: the synthetic data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub groups: usize,
    pub input_dim: usize,
    /// Regression target width; for classification it must equal `groups`.
    pub output_dim: usize,
    pub noise: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskKind::Regression,
            groups: 8,
            input_dim: 8,
            output_dim: 4,
            noise: 0.1,
        }
    }
}

/// `[model]`: architecture of the mixture model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub experts: usize,
    /// Number of equal contiguous clusters; must divide `experts`.
    pub clusters: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub routing_dim: usize,
    pub capacity_factor: f64,
    /// Score on a normalized low-dimensional sphere with a learnable
    /// temperature instead of raw dot products.
    pub normalize_routing: bool,
    pub gating: GatingKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            experts: 8,
            clusters: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            routing_dim: 8,
            capacity_factor: 2.0,
            normalize_routing: false,
            gating: GatingKind::Softmax,
        }
    }
}

/// `[train]`: optimization loop settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Fixed training-pool size; minibatches are drawn from this pool.
    pub train_size: usize,
    /// Fixed validation-set size.
    pub val_size: usize,
    pub learning_rate: f64,
    pub balance_coef: f64,
    pub clustering_coef: f64,
    pub mu: f64,
    pub dropout: DropoutLevel,
    pub dropout_rate: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch_size: 64,
            train_size: 8192,
            val_size: 256,
            learning_rate: 3e-3,
            balance_coef: 0.01,
            clustering_coef: 0.01,
            mu: 0.0,
            dropout: DropoutLevel::None,
            dropout_rate: 0.0,
            log_every: 50,
            seed: 0,
        }
    }
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxisKind {
    ClusterCount,
    ExpertCount,
    DropoutRate,
    Mu,
}

/// `[sweep]`: optional one-dimensional grid description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxisKind,
    pub values: Vec<f64>,
    #[serde(default = "default_sweep_seeds")]
    pub seeds: Vec<u64>,
}

fn default_sweep_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// A whole experiment file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    /// Parses a TOML file. Parse failures surface as config errors naming
    /// the file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { key, detail } if key == "<toml>" => {
                Error::config(path.display().to_string(), detail)
            }
            other => other,
        })
    }

    /// Parses TOML text and validates the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field validation with dotted-key diagnostics.
    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.groups == 0 {
            return Err(Error::config("task.groups", "must be at least 1"));
        }
        if t.input_dim == 0 {
            return Err(Error::config("task.input_dim", "must be at least 1"));
        }
        if t.output_dim == 0 {
            return Err(Error::config("task.output_dim", "must be at least 1"));
        }
        if !t.noise.is_finite() || t.noise < 0.0 {
            return Err(Error::config(
                "task.noise",
                format!("must be non-negative and finite, got {}", t.noise),
            ));
        }
        if t.kind == TaskKind::Classification && t.output_dim != t.groups {
            return Err(Error::config(
                "task.output_dim",
                format!(
                    "classification predicts one logit per group: output_dim must equal \
                     task.groups ({}), got {}",
                    t.groups, t.output_dim
                ),
            ));
        }
        let m = &self.model;
        for (key, v) in [
            ("model.experts", m.experts),
            ("model.clusters", m.clusters),
            ("model.hidden_dim", m.hidden_dim),
            ("model.ffn_dim", m.ffn_dim),
            ("model.routing_dim", m.routing_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !m.experts.is_multiple_of(m.clusters) {
            return Err(Error::config(
                "model.clusters",
                format!(
                    "must divide model.experts evenly: {} experts into {} clusters",
                    m.experts, m.clusters
                ),
            ));
        }
        if !m.capacity_factor.is_finite() || m.capacity_factor <= 0.0 {
            return Err(Error::config(
                "model.capacity_factor",
                format!("must be positive and finite, got {}", m.capacity_factor),
            ));
        }
        self.train_settings(None).validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config("sweep.values", "need at least one value"));
            }
            if sweep.seeds.is_empty() {
                return Err(Error::config("sweep.seeds", "need at least one seed"));
            }
            match sweep.axis {
                SweepAxisKind::ClusterCount | SweepAxisKind::ExpertCount => {
                    for &v in &sweep.values {
                        if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
                            return Err(Error::config(
                                "sweep.values",
                                format!("{:?} sweeps take positive integers, got {v}", sweep.axis),
                            ));
                        }
                    }
                }
                SweepAxisKind::DropoutRate => {
                    for &v in &sweep.values {
                        if !(0.0..1.0).contains(&v) {
                            return Err(Error::config(
                                "sweep.values",
                                format!("dropout rates must lie in [0, 1), got {v}"),
                            ));
                        }
                    }
                }
                SweepAxisKind::Mu => {
                    for &v in &sweep.values {
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::config(
                                "sweep.values",
                                format!("mu must be non-negative and finite, got {v}"),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            groups: self.task.groups,
            input_dim: self.task.input_dim,
            output_dim: self.task.output_dim,
            noise: self.task.noise,
            task: self.task.kind,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            dims: ModelDims {
                input_dim: self.task.input_dim,
                hidden_dim: self.model.hidden_dim,
                ffn_dim: self.model.ffn_dim,
                routing_dim: self.model.routing_dim,
                output_dim: self.task.output_dim,
            },
            clusters: ClusterConfig::new(self.model.experts, self.model.clusters)?,
            capacity_factor: self.model.capacity_factor,
            normalize_routing: self.model.normalize_routing,
            gating: self.model.gating,
            task: self.task.kind,
        })
    }

    /// Training settings, optionally overriding the seed (the CLI's
    /// `--seed`).
    pub fn train_settings(&self, seed_override: Option<u64>) -> TrainSettings {
        let t = &self.train;
        TrainSettings {
            steps: t.steps,
            batch_size: t.batch_size,
            train_size: t.train_size,
            val_size: t.val_size,
            learning_rate: t.learning_rate,
            balance_coef: t.balance_coef,
            clustering_coef: t.clustering_coef,
            mu: t.mu,
            dropout: t.dropout,
            dropout_rate: t.dropout_rate,
            log_every: t.log_every,
            seed: seed_override.unwrap_or(t.seed),
        }
    }

    /// Builds the sweep plan; errors when the file has no `[sweep]` table.
    pub fn sweep_plan(&self, seed_override: Option<u64>) -> Result<SweepPlan> {
        let sweep = self.sweep.as_ref().ok_or_else(|| {
            Error::config("sweep", "this command needs a [sweep] table in the config")
        })?;
        let axis = match sweep.axis {
            SweepAxisKind::ClusterCount => {
                SweepAxis::ClusterCount(sweep.values.iter().map(|&v| v as usize).collect())
            }
            SweepAxisKind::ExpertCount => {
                SweepAxis::ExpertCount(sweep.values.iter().map(|&v| v as usize).collect())
            }
            SweepAxisKind::DropoutRate => SweepAxis::DropoutRate(sweep.values.clone()),
            SweepAxisKind::Mu => SweepAxis::Mu(sweep.values.clone()),
        };
        let mut settings = self.train_settings(seed_override);
        // Per-cell seeds come from the sweep's seed list; the base seed field
        // is irrelevant here and run_sweep overwrites it per cell.
        settings.seed = 0;
        Ok(SweepPlan {
            model: self.model_spec()?,
            task: self.task_spec(),
            settings,
            axis,
            seeds: sweep.seeds.clone(),
        })
    }
}
