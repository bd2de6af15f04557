//! One-dimensional experiment sweeps with paired seeds.
//!
//! A sweep varies exactly one knob — cluster count, expert count, dropout
//! rate, or the inter-cluster sharpness — and trains a fresh model per
//! (value, seed) pair. Everything else stays pinned: for a given seed, every
//! value of the axis sees the *same* synthetic task, the same model
//! initialization stream, and the same data order, so differences between
//! rows measure the knob and not sampling luck.

use crate::error::{Error, Result};
use crate::losses::ClusterConfig;
use crate::model::{MoEModel, ModelSpec};
use crate::simulator::synthetic::{SyntheticTask, TaskSpec};
use crate::simulator::trainer::{derive_seed, train, TrainSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The varied dimension and its values.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Number of clusters `m`; the expert count stays fixed, so this varies
    /// the cluster size `N/m`.
    ClusterCount(Vec<usize>),
    /// Number of experts `N`; the cluster count stays fixed.
    ExpertCount(Vec<usize>),
    /// Expert-dropout rate (the dropout level comes from the settings and
    /// must not be `none`).
    DropoutRate(Vec<f64>),
    /// Inter-cluster sharpness μ.
    Mu(Vec<f64>),
}

impl SweepAxis {
    /// Column-friendly axis name.
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ClusterCount(_) => "cluster_count",
            SweepAxis::ExpertCount(_) => "expert_count",
            SweepAxis::DropoutRate(_) => "dropout_rate",
            SweepAxis::Mu(_) => "mu",
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::ClusterCount(v) => v.iter().map(|&x| x as f64).collect(),
            SweepAxis::ExpertCount(v) => v.iter().map(|&x| x as f64).collect(),
            SweepAxis::DropoutRate(v) => v.clone(),
            SweepAxis::Mu(v) => v.clone(),
        }
    }
}

/// A full sweep description.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub settings: TrainSettings,
    pub axis: SweepAxis,
    /// Experiment seeds; each value of the axis is trained once per seed.
    pub seeds: Vec<u64>,
}

/// One trained (value, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: &'static str,
    pub value: f64,
    pub seed: u64,
    pub final_val_task: f64,
    /// Value-level intra-cluster variance on the validation batch.
    pub final_val_c_intra: f64,
    pub best_val_step: usize,
    /// Lowest validation task loss among the logged steps.
    pub best_val_task: f64,
    /// Mean capacity-overflow rate over the logged steps.
    pub mean_overflow: f64,
    pub final_balance: f64,
    pub final_clustering: f64,
}

fn apply_axis(
    axis: &SweepAxis,
    index: usize,
    model: &mut ModelSpec,
    settings: &mut TrainSettings,
) -> Result<()> {
    match axis {
        SweepAxis::ClusterCount(values) => {
            let m = values[index];
            model.clusters = ClusterConfig::new(model.clusters.num_experts(), m)?;
        }
        SweepAxis::ExpertCount(values) => {
            let n = values[index];
            model.clusters = ClusterConfig::new(n, model.clusters.num_clusters())?;
        }
        SweepAxis::DropoutRate(values) => {
            if settings.dropout == crate::dropout::DropoutLevel::None {
                return Err(Error::config(
                    "sweep.axis",
                    "a dropout_rate sweep needs train.dropout set to cluster or global",
                ));
            }
            settings.dropout_rate = values[index];
        }
        SweepAxis::Mu(values) => {
            settings.mu = values[index];
        }
    }
    Ok(())
}

/// Runs the whole grid, outer loop over axis values, inner over seeds.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<SweepPoint>> {
    let values = plan.axis.values();
    if values.is_empty() {
        return Err(Error::config("sweep.values", "need at least one value"));
    }
    if plan.seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "need at least one seed"));
    }
    let mut rows = Vec::with_capacity(values.len() * plan.seeds.len());
    for (i, &value) in values.iter().enumerate() {
        for &seed in &plan.seeds {
            let mut model_spec = plan.model.clone();
            let mut settings = plan.settings.clone();
            settings.seed = seed;
            apply_axis(&plan.axis, i, &mut model_spec, &mut settings)?;
            // Same seed ⇒ same task and init stream for every axis value.
            let mut task_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "task"));
            let task = SyntheticTask::generate(plan.task, &mut task_rng)?;
            let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init"));
            let model = MoEModel::init(&model_spec, &mut init_rng)?;
            let out = train(model, &task, &settings)?;
            let last = out
                .metrics
                .last()
                .expect("train always logs the final step");
            let mean_overflow =
                out.metrics.iter().map(|r| r.overflow_rate).sum::<f64>() / out.metrics.len() as f64;
            rows.push(SweepPoint {
                axis: plan.axis.name(),
                value,
                seed,
                final_val_task: out.final_val_task,
                final_val_c_intra: out.final_val_c_intra,
                best_val_step: out.best_val_step,
                best_val_task: out.best_val_task,
                mean_overflow,
                final_balance: last.balance,
                final_clustering: last.clustering,
            });
        }
    }
    Ok(rows)
}
