//! The training loop: forward, three-part loss, reverse pass, Adam.
//!
//! Each step rebuilds the computation on a fresh tape — parameters are bound
//! as leaves, the batch flows through the model, and a single `backward`
//! call produces every gradient. The total objective is
//!
//! ```text
//! L = L_task + L_balance + L_cluster
//! ```
//!
//! with coefficients folded into the auxiliary terms. Expert dropout draws a
//! fresh mask per step; validation always runs with every expert alive.
//!
//! The data regime is a fixed pool: `train_size` examples are drawn up front
//! and every step's minibatch is sampled from that pool, so small pools
//! genuinely overfit (the same examples recur) while large pools behave like
//! streaming data. Validation uses a separate fixed set of `val_size`
//! examples from the same distribution.
//!
//! All randomness descends from one experiment seed through named streams
//! (`train-data` pool, `val-data` set, `batch-order` minibatch indices,
//! per-step dropout), so training is bitwise reproducible and two runs
//! differing in one knob still consume identical data.

use crate::dispatch::{cluster_fractions, ClusterFractions};
use crate::dropout::{cluster_level_mask, global_level_mask, inference_mask, DropoutLevel};
use crate::error::{Error, Result};
use crate::losses::{balance_loss, clustering_loss, token_fractions, total_loss, RoutingStats};
use crate::model::{task_loss, MoEModel};
use crate::numerics::Tensor;
use crate::simulator::synthetic::{Batch, SyntheticTask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.98;
/// Adam denominator epsilon.
pub const ADAM_EPS: f64 = 1e-6;

/// Derives a child seed from the experiment seed and a stream name, so every
/// consumer of randomness (data, validation data, per-step dropout) gets an
/// independent, reproducible stream. FNV-1a keeps the mapping stable across
/// toolchains.
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for byte in base.to_le_bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(PRIME);
    }
    for byte in stream.bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(PRIME);
    }
    h
}

/// Everything the training loop needs besides the model and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    /// Size of the fixed training pool; minibatches are drawn from it, so a
    /// small pool creates an overfitting regime.
    pub train_size: usize,
    /// Size of the fixed validation set drawn before training.
    pub val_size: usize,
    pub learning_rate: f64,
    /// Balance-loss coefficient (0 disables the term).
    pub balance_coef: f64,
    /// Clustering-loss coefficient (0 disables the term).
    pub clustering_coef: f64,
    /// Inter-cluster sharpness; 0 reduces the clustering loss to the
    /// intra-cluster variance alone.
    pub mu: f64,
    pub dropout: DropoutLevel,
    pub dropout_rate: f64,
    /// Record a metrics row every this many steps (the final step is always
    /// recorded).
    pub log_every: usize,
    /// Experiment seed; all randomness descends from it.
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.train_size < self.batch_size {
            return Err(Error::config(
                "train.train_size",
                format!(
                    "the training pool ({}) must hold at least one batch ({})",
                    self.train_size, self.batch_size
                ),
            ));
        }
        if self.val_size == 0 {
            return Err(Error::config("train.val_size", "must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(
                "train.learning_rate",
                format!("must be positive and finite, got {}", self.learning_rate),
            ));
        }
        for (key, v) in [
            ("train.balance_coef", self.balance_coef),
            ("train.clustering_coef", self.clustering_coef),
            ("train.mu", self.mu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    key,
                    format!("must be non-negative and finite, got {v}"),
                ));
            }
        }
        if self.dropout != DropoutLevel::None && !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(
                "train.dropout_rate",
                format!("must lie in [0, 1), got {}", self.dropout_rate),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter tensor in the
/// model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, model: &MoEModel) -> Self {
        let shapes: Vec<(usize, usize)> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape())
            .collect();
        Adam {
            learning_rate,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    /// Applies one update. `grads` must walk the model's canonical parameter
    /// order (dense zero tensors for parameters off the graph this step).
    pub fn apply(&mut self, model: &mut MoEModel, grads: &[Tensor]) -> Result<()> {
        let mut params = model.named_params_mut();
        if grads.len() != params.len() {
            return Err(Error::contract(
                "Adam::apply",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, (name, param)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != param.shape() {
                return Err(Error::dim(
                    "Adam::apply",
                    format!(
                        "gradient for {name} is {:?}, parameter is {:?}",
                        g.shape(),
                        param.shape()
                    ),
                ));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for idx in 0..g.len() {
                let gi = g.data()[idx];
                let mi = ADAM_BETA1 * m.data()[idx] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[idx] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[idx] = mi;
                v.data_mut()[idx] = vi;
                let update = self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                param.data_mut()[idx] -= update;
            }
        }
        Ok(())
    }
}

/// One logged snapshot of training.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f64,
    pub task: f64,
    pub balance: f64,
    pub clustering: f64,
    /// Mean within-cluster variance of the gate probabilities (train batch,
    /// under the step's dropout mask).
    pub c_intra: f64,
    /// Inter-cluster separation factor in `[exp(-mu), 1]`.
    pub c_inter: f64,
    /// Fraction of tokens dropped by expert capacity this step.
    pub overflow_rate: f64,
    /// Router temperature (1 when scores are unnormalized dot products).
    pub temperature: f64,
    /// Task loss on the fixed validation batch with every expert alive.
    pub val_task: f64,
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MoEModel,
    pub metrics: Vec<MetricsRow>,
    /// Dispatch fractions on the last training batch (under dropout).
    pub train_fractions: Vec<f64>,
    /// Per-expert dispatch fractions of the training batch at every logged
    /// step (the evolution of expert shares over training).
    pub fraction_rows: Vec<(usize, Vec<f64>)>,
    /// Dispatch statistics on the validation batch, all experts alive.
    pub val_fractions: Vec<f64>,
    pub val_clusters: ClusterFractions,
    /// Gate-probability statistics on the validation batch.
    pub val_stats: RoutingStats,
    pub final_val_task: f64,
    /// Value-level intra-cluster variance on the validation batch.
    pub final_val_c_intra: f64,
    /// Step of the best (lowest) validation task loss among logged rows.
    pub best_val_step: usize,
    /// The validation task loss at that step.
    pub best_val_task: f64,
}

struct StepStats {
    total: f64,
    task: f64,
    balance: f64,
    clustering: f64,
    c_intra: f64,
    c_inter: f64,
    overflow_rate: f64,
    fractions: Vec<f64>,
}

struct EvalStats {
    task: f64,
    fractions: Vec<f64>,
    clusters: ClusterFractions,
    stats: RoutingStats,
    c_intra: f64,
}

/// True when an error means "a value left the finite range" (the tape
/// rejects non-finite results op by op) rather than a structural problem.
fn is_divergence(err: &Error) -> bool {
    matches!(err, Error::Contract { detail, .. } if detail.contains("non-finite"))
}

fn step_mask(
    model: &MoEModel,
    settings: &TrainSettings,
    step: usize,
) -> Result<crate::dropout::ExpertMask> {
    let n = model.layer.num_experts();
    match settings.dropout {
        DropoutLevel::None => Ok(inference_mask(n)),
        DropoutLevel::Cluster => cluster_level_mask(
            &model.layer.clusters,
            settings.dropout_rate,
            derive_seed(settings.seed, &format!("dropout-step-{step}")),
        ),
        DropoutLevel::Global => global_level_mask(
            n,
            settings.dropout_rate,
            derive_seed(settings.seed, &format!("dropout-step-{step}")),
        ),
    }
}

fn run_step(
    model: &mut MoEModel,
    adam: &mut Adam,
    batch: &Batch,
    mask: &crate::dropout::ExpertMask,
    settings: &TrainSettings,
) -> Result<StepStats> {
    let n = model.layer.num_experts();
    let mut tape = crate::numerics::Tape::new();
    let vars = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &vars, &batch.inputs, mask)?;
    let task = task_loss(&mut tape, out.prediction, &batch.targets)?;
    let fractions = token_fractions(&out.routing.dispatch.routes(), n)?;
    let balance = balance_loss(
        &mut tape,
        &fractions,
        out.routing.mean_probs,
        settings.balance_coef,
        n,
    )?;
    let terms = clustering_loss(
        &mut tape,
        out.routing.mean_probs,
        &model.layer.clusters,
        mask,
        settings.clustering_coef,
        settings.mu,
    )?;
    let total = total_loss(&mut tape, task, balance, terms.loss)?;
    let stats = StepStats {
        total: tape.value(total).item()?,
        task: tape.value(task).item()?,
        balance: tape.value(balance).item()?,
        clustering: tape.value(terms.loss).item()?,
        c_intra: tape.value(terms.c_intra).item()?,
        c_inter: tape.value(terms.c_inter).item()?,
        overflow_rate: out.routing.dispatch.overflow_rate(),
        fractions,
    };
    let grads = tape.backward(total)?;
    let dense: Vec<Tensor> = vars.flat().iter().map(|&v| grads.dense(v)).collect();
    adam.apply(model, &dense)?;
    Ok(stats)
}

fn evaluate(model: &MoEModel, batch: &Batch) -> Result<EvalStats> {
    let n = model.layer.num_experts();
    let mask = inference_mask(n);
    let mut tape = crate::numerics::Tape::new();
    let vars = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &vars, &batch.inputs, &mask)?;
    let task = task_loss(&mut tape, out.prediction, &batch.targets)?;
    let clusters = cluster_fractions(&out.routing.dispatch, &model.layer.clusters)?;
    let stats = RoutingStats::collect(
        &out.routing.dispatch,
        tape.value(out.routing.mean_probs).data(),
        &model.layer.clusters,
        &mask,
    )?;
    Ok(EvalStats {
        task: tape.value(task).item()?,
        fractions: clusters.per_expert.clone(),
        c_intra: stats.c_intra(),
        clusters,
        stats,
    })
}

/// Trains `model` on batches drawn from `task`. Consumes the model and
/// returns it trained, together with the logged metrics and final routing
/// statistics.
pub fn train(
    mut model: MoEModel,
    task: &SyntheticTask,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    settings.validate()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "train-data"));
    let pool = task.sample(&mut data_rng, settings.train_size)?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "val-data"));
    let val_batch = task.sample(&mut val_rng, settings.val_size)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "batch-order"));

    let mut adam = Adam::new(settings.learning_rate, &model);
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut fraction_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut train_fractions = vec![0.0; model.layer.num_experts()];
    let mut last_finite = (f64::NAN, f64::NAN, f64::NAN);

    for step in 0..settings.steps {
        let picks =
            rand::seq::index::sample(&mut batch_rng, pool.len(), settings.batch_size).into_vec();
        let batch = pool.select(&picks)?;
        let mask = step_mask(&model, settings, step)?;
        let stats = match run_step(&mut model, &mut adam, &batch, &mask, settings) {
            Ok(stats) => stats,
            Err(e) if is_divergence(&e) => {
                let (task_l, balance_l, clustering_l) = last_finite;
                return Err(Error::NonFiniteLoss {
                    step,
                    task: task_l,
                    balance: balance_l,
                    clustering: clustering_l,
                });
            }
            Err(e) => return Err(e),
        };
        last_finite = (stats.task, stats.balance, stats.clustering);
        train_fractions = stats.fractions.clone();
        if step % settings.log_every == 0 || step + 1 == settings.steps {
            let eval = evaluate(&model, &val_batch)?;
            metrics.push(MetricsRow {
                step,
                total: stats.total,
                task: stats.task,
                balance: stats.balance,
                clustering: stats.clustering,
                c_intra: stats.c_intra,
                c_inter: stats.c_inter,
                overflow_rate: stats.overflow_rate,
                temperature: model.layer.router.temperature(),
                val_task: eval.task,
            });
            fraction_rows.push((step, stats.fractions.clone()));
        }
    }

    let eval = evaluate(&model, &val_batch)?;
    let best = metrics
        .iter()
        .min_by(|a, b| a.val_task.total_cmp(&b.val_task))
        .expect("steps ≥ 1 always logs at least the final step");
    let (best_val_step, best_val_task) = (best.step, best.val_task);
    Ok(TrainOutcome {
        model,
        metrics,
        train_fractions,
        fraction_rows,
        val_fractions: eval.fractions,
        val_clusters: eval.clusters,
        val_stats: eval.stats,
        final_val_task: eval.task,
        final_val_c_intra: eval.c_intra,
        best_val_step,
        best_val_task,
    })
}
