//! The toy model: input layer → mixture-of-experts layer → task head.
//!
//! The mixture layer is the heart of it. Each token's hidden state is scored
//! against every expert, gated (see [`crate::gating`]), and dispatched to its
//! top-1 expert subject to a per-expert capacity (see [`crate::dispatch`]).
//! The expert — a two-layer relu feed-forward block — runs on the tokens it
//! received, and the layer output is the gate-weighted expert output plus a
//! residual connection:
//!
//! ```text
//! y_t = h_t + α_{t,i} · E_i(h_t)      (i = chosen expert of token t)
//! ```
//!
//! Tokens that overflow their expert's capacity skip the expert term and pass
//! through on the residual alone. Masked (dropped) experts never appear as
//! candidates.
//!
//! Everything here runs on the reverse-mode tape from [`crate::numerics`], so
//! one `backward` call yields exact gradients for every parameter, including
//! the router.

use crate::dispatch::{dispatch, DispatchResult};
use crate::dropout::ExpertMask;
use crate::error::{Error, Result};
use crate::gating::{
    gate_values, routing_scores, top_k_select, GatingKind, RouterParams, RouterVars,
};
use crate::losses::{mean_routing_prob, ClusterConfig};
use crate::numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

/// First line of the checkpoint text format; bump the trailing version when
/// the layout changes.
const CHECKPOINT_HEADER: &str = "moe-clusters-checkpoint v1";

/// What the task head predicts and which loss scores it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Mean-squared error against real-valued targets.
    Regression,
    /// Negative log-likelihood of integer labels under a softmax of the head
    /// logits.
    Classification,
}

/// Supervision for one batch, matching the model's [`TaskKind`].
#[derive(Debug, Clone)]
pub enum TaskTargets {
    Regression(Tensor),
    Classification(Vec<usize>),
}

/// Widths of every dense piece of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Raw feature dimension of the data.
    pub input_dim: usize,
    /// Hidden width everywhere between the input layer and the head.
    pub hidden_dim: usize,
    /// Inner width of each expert's feed-forward block.
    pub ffn_dim: usize,
    /// Dimension the router scores in (after projection).
    pub routing_dim: usize,
    /// Head output width: target dimension or class count.
    pub output_dim: usize,
}

/// Everything needed to build a fresh model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub clusters: ClusterConfig,
    pub capacity_factor: f64,
    /// Score on a normalized low-dimensional sphere with learnable
    /// temperature instead of raw dot products.
    pub normalize_routing: bool,
    pub gating: GatingKind,
    pub task: TaskKind,
}

/// Draws a `rows`×`cols` matrix uniformly from ±1/√`fan_in`.
pub(crate) fn uniform_fan_in(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("size matches by construction")
}

/// One expert: a two-layer relu feed-forward block, hidden→ffn→hidden.
#[derive(Debug, Clone)]
pub struct ExpertFFN {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for one expert's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ExpertFFN {
    pub fn init(rng: &mut ChaCha8Rng, hidden_dim: usize, ffn_dim: usize) -> Self {
        ExpertFFN {
            w1: uniform_fan_in(rng, hidden_dim, ffn_dim, hidden_dim),
            b1: Tensor::zeros(1, ffn_dim),
            w2: uniform_fan_in(rng, ffn_dim, hidden_dim, ffn_dim),
            b2: Tensor::zeros(1, hidden_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ExpertVars> {
        Ok(ExpertVars {
            w1: tape.leaf(self.w1.clone())?,
            b1: tape.leaf(self.b1.clone())?,
            w2: tape.leaf(self.w2.clone())?,
            b2: tape.leaf(self.b2.clone())?,
        })
    }

    /// `relu(x·w1 + b1)·w2 + b2` for a batch of rows.
    pub fn forward(tape: &mut Tape, vars: ExpertVars, x: Var) -> Result<Var> {
        let (t, _) = tape.shape(x);
        let pre = tape.matmul(x, vars.w1)?;
        let b1 = tape.broadcast_rows(vars.b1, t)?;
        let pre = tape.add(pre, b1)?;
        let act = tape.relu(pre)?;
        let out = tape.matmul(act, vars.w2)?;
        let b2 = tape.broadcast_rows(vars.b2, t)?;
        tape.add(out, b2)
    }
}

/// The sparse layer: router, experts, their cluster partition, and the
/// dispatch capacity factor.
#[derive(Debug, Clone)]
pub struct MoELayer {
    pub router: RouterParams,
    pub experts: Vec<ExpertFFN>,
    pub clusters: ClusterConfig,
    pub capacity_factor: f64,
}

/// Tape handles for the layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub router: RouterVars,
    pub experts: Vec<ExpertVars>,
}

/// Everything the routing forward produces besides the output itself; the
/// losses and the metrics both feed on these.
#[derive(Debug, Clone)]
pub struct RoutingOutcome {
    /// Post-residual hidden states (T×hidden).
    pub output: Var,
    /// Full gate matrix α (T×N); masked experts are exactly 0.
    pub alpha: Var,
    /// Batch-mean gate per expert, p = colmean(α) (1×N).
    pub mean_probs: Var,
    /// Top-1 expert of each token (before capacity).
    pub chosen: Vec<usize>,
    /// Capacity-constrained assignment derived from `chosen`.
    pub dispatch: DispatchResult,
}

impl MoELayer {
    pub fn init(
        rng: &mut ChaCha8Rng,
        dims: &ModelDims,
        clusters: ClusterConfig,
        capacity_factor: f64,
        normalize_routing: bool,
        gating: GatingKind,
    ) -> Result<Self> {
        let n = clusters.num_experts();
        // The router projects hidden→routing whenever the widths differ (and
        // always under normalization, where the low-dimensional sphere is the
        // point).
        let projection = if dims.routing_dim != dims.hidden_dim || normalize_routing {
            Some(uniform_fan_in(
                rng,
                dims.hidden_dim,
                dims.routing_dim,
                dims.hidden_dim,
            ))
        } else {
            None
        };
        let embed = uniform_fan_in(rng, n, dims.routing_dim, dims.routing_dim);
        let log_temperature = normalize_routing.then(|| Tensor::scalar(0.0));
        let router = RouterParams::new(
            embed,
            projection,
            log_temperature,
            normalize_routing,
            gating,
        )?;
        let experts = (0..n)
            .map(|_| ExpertFFN::init(rng, dims.hidden_dim, dims.ffn_dim))
            .collect();
        Ok(MoELayer {
            router,
            experts,
            clusters,
            capacity_factor,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LayerVars> {
        let router = self.router.bind(tape)?;
        let experts = self
            .experts
            .iter()
            .map(|e| e.bind(tape))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerVars { router, experts })
    }
}

/// Runs every expert on its dispatched tokens and scatters the results back
/// into a T×hidden tensor (zero rows for overflowed tokens).
pub fn apply_experts(
    tape: &mut Tape,
    hidden: Var,
    dispatch: &DispatchResult,
    experts: &[ExpertVars],
) -> Result<Var> {
    let (t, d) = tape.shape(hidden);
    if dispatch.num_tokens() != t {
        return Err(Error::dim(
            "apply_experts",
            format!(
                "dispatch covers {} tokens, hidden has {t}",
                dispatch.num_tokens()
            ),
        ));
    }
    let mut combined: Option<Var> = None;
    for (e, vars) in experts.iter().enumerate() {
        let tokens = dispatch.tokens_for(e);
        if tokens.is_empty() {
            continue;
        }
        let gathered = tape.gather_rows(hidden, tokens.clone())?;
        let out = ExpertFFN::forward(tape, *vars, gathered)?;
        let scattered = tape.scatter_rows(out, tokens, t)?;
        combined = Some(match combined {
            Some(acc) => tape.add(acc, scattered)?,
            None => scattered,
        });
    }
    match combined {
        Some(v) => Ok(v),
        // Every token overflowed (tiny capacity): the expert term is zero.
        None => tape.constant(Tensor::zeros(t, d)),
    }
}

/// The routing forward pass: score → gate → top-1 → dispatch → expert →
/// gate-weighted combine → residual.
pub fn moe_forward(
    tape: &mut Tape,
    hidden: Var,
    layer: &MoELayer,
    vars: &LayerVars,
    mask: &ExpertMask,
) -> Result<RoutingOutcome> {
    let (_, d) = tape.shape(hidden);
    let scores = routing_scores(tape, hidden, &layer.router, &vars.router, mask)?;
    let alpha = gate_values(tape, scores, layer.router.gating)?;
    let chosen: Vec<usize> = top_k_select(tape.value(alpha), 1, mask)?
        .into_iter()
        .map(|picks| picks[0])
        .collect();
    let dispatched = dispatch(&chosen, tape.value(alpha), layer.capacity_factor)?;
    let expert_out = apply_experts(tape, hidden, &dispatched, &vars.experts)?;
    // Weight each token's expert output by its top-1 gate. Overflowed tokens
    // have a zero expert row, so the gate multiplies zero and contributes
    // neither value nor gradient.
    let gate = tape.select_per_row(alpha, chosen.clone())?;
    let gate_wide = tape.broadcast_cols(gate, d)?;
    let weighted = tape.mul(expert_out, gate_wide)?;
    let output = tape.add(hidden, weighted)?;
    let mean_probs = mean_routing_prob(tape, alpha)?;
    Ok(RoutingOutcome {
        output,
        alpha,
        mean_probs,
        chosen,
        dispatch: dispatched,
    })
}

/// Input layer, mixture layer, task head.
#[derive(Debug, Clone)]
pub struct MoEModel {
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub layer: MoELayer,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub task: TaskKind,
}

/// Tape handles for the whole model, in the same fixed order as
/// [`MoEModel::named_params`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub input_w: Var,
    pub input_b: Var,
    pub layer: LayerVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Flattens the handles into the canonical parameter order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.input_w, self.input_b, self.layer.router.expert_embed];
        if let Some(p) = self.layer.router.projection {
            out.push(p);
        }
        if let Some(lt) = self.layer.router.log_temperature {
            out.push(lt);
        }
        for e in &self.layer.experts {
            out.extend([e.w1, e.b1, e.w2, e.b2]);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }

    /// Rebuilds the structured handles from a flat list in canonical order
    /// (the inverse of [`ModelVars::flat`] for the given model shape).
    pub fn from_flat(model: &MoEModel, flat: &[Var]) -> Result<ModelVars> {
        let expected = model.named_params().len();
        if flat.len() != expected {
            return Err(Error::contract(
                "ModelVars::from_flat",
                format!("{} handles for {expected} parameters", flat.len()),
            ));
        }
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let input_w = next();
        let input_b = next();
        let expert_embed = next();
        let projection = model.layer.router.projection.as_ref().map(|_| next());
        let log_temperature = model.layer.router.log_temperature.as_ref().map(|_| next());
        let experts = (0..model.layer.num_experts())
            .map(|_| ExpertVars {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        Ok(ModelVars {
            input_w,
            input_b,
            layer: LayerVars {
                router: RouterVars {
                    expert_embed,
                    projection,
                    log_temperature,
                },
                experts,
            },
            head_w,
            head_b,
        })
    }
}

/// Model forward results: predictions plus everything the routing produced.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Head output (T×output_dim): regression values or class logits.
    pub prediction: Var,
    pub routing: RoutingOutcome,
}

impl MoEModel {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = &spec.dims;
        if d.input_dim == 0
            || d.hidden_dim == 0
            || d.ffn_dim == 0
            || d.routing_dim == 0
            || d.output_dim == 0
        {
            return Err(Error::contract(
                "MoEModel::init",
                "every model dimension must be positive",
            ));
        }
        let input_w = uniform_fan_in(rng, d.input_dim, d.hidden_dim, d.input_dim);
        let input_b = Tensor::zeros(1, d.hidden_dim);
        let layer = MoELayer::init(
            rng,
            d,
            spec.clusters.clone(),
            spec.capacity_factor,
            spec.normalize_routing,
            spec.gating,
        )?;
        let head_w = uniform_fan_in(rng, d.hidden_dim, d.output_dim, d.hidden_dim);
        let head_b = Tensor::zeros(1, d.output_dim);
        Ok(MoEModel {
            input_w,
            input_b,
            layer,
            head_w,
            head_b,
            task: spec.task,
        })
    }

    /// All trainable tensors with stable names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input.weight".into(), &self.input_w),
            ("input.bias".into(), &self.input_b),
            (
                "router.expert_embed".into(),
                &self.layer.router.expert_embed,
            ),
        ];
        if let Some(p) = &self.layer.router.projection {
            out.push(("router.projection".into(), p));
        }
        if let Some(lt) = &self.layer.router.log_temperature {
            out.push(("router.log_temperature".into(), lt));
        }
        for (i, e) in self.layer.experts.iter().enumerate() {
            out.push((format!("expert.{i}.w1"), &e.w1));
            out.push((format!("expert.{i}.b1"), &e.b1));
            out.push((format!("expert.{i}.w2"), &e.w2));
            out.push((format!("expert.{i}.b2"), &e.b2));
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    /// Mutable view of the same tensors, same names, same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.weight".into(), &mut self.input_w),
            ("input.bias".into(), &mut self.input_b),
            (
                "router.expert_embed".into(),
                &mut self.layer.router.expert_embed,
            ),
        ];
        if let Some(p) = &mut self.layer.router.projection {
            out.push(("router.projection".into(), p));
        }
        if let Some(lt) = &mut self.layer.router.log_temperature {
            out.push(("router.log_temperature".into(), lt));
        }
        for (i, e) in self.layer.experts.iter_mut().enumerate() {
            out.push((format!("expert.{i}.w1"), &mut e.w1));
            out.push((format!("expert.{i}.b1"), &mut e.b1));
            out.push((format!("expert.{i}.w2"), &mut e.w2));
            out.push((format!("expert.{i}.b2"), &mut e.b2));
        }
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    /// Registers every parameter on the tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let input_w = tape.leaf(self.input_w.clone())?;
        let input_b = tape.leaf(self.input_b.clone())?;
        let layer = self.layer.bind(tape)?;
        let head_w = tape.leaf(self.head_w.clone())?;
        let head_b = tape.leaf(self.head_b.clone())?;
        Ok(ModelVars {
            input_w,
            input_b,
            layer,
            head_w,
            head_b,
        })
    }

    /// Full forward pass on a data batch (rows = tokens).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        inputs: &Tensor,
        mask: &ExpertMask,
    ) -> Result<ModelOutput> {
        if inputs.cols() != self.input_w.rows() {
            return Err(Error::dim(
                "MoEModel::forward",
                format!(
                    "inputs have {} features, input layer expects {}",
                    inputs.cols(),
                    self.input_w.rows()
                ),
            ));
        }
        let t = inputs.rows();
        let x = tape.constant(inputs.clone())?;
        let h = tape.matmul(x, vars.input_w)?;
        let b = tape.broadcast_rows(vars.input_b, t)?;
        let h = tape.add(h, b)?;
        let routing = moe_forward(tape, h, &self.layer, &vars.layer, mask)?;
        let logits = tape.matmul(routing.output, vars.head_w)?;
        let hb = tape.broadcast_rows(vars.head_b, t)?;
        let prediction = tape.add(logits, hb)?;
        Ok(ModelOutput {
            prediction,
            routing,
        })
    }
}

/// Mean squared error over all entries: `mean((pred - target)²)`.
pub fn mse_loss(tape: &mut Tape, prediction: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(prediction) != targets.shape() {
        return Err(Error::dim(
            "mse_loss",
            format!(
                "prediction {:?} vs targets {:?}",
                tape.shape(prediction),
                targets.shape()
            ),
        ));
    }
    let t = tape.constant(targets.clone())?;
    let diff = tape.sub(prediction, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Mean negative log-likelihood of `labels` under a softmax of the logits,
/// computed as `logsumexp(logits) - logits[label]` with the usual row-max
/// stabilization.
pub fn nll_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (t, classes) = tape.shape(logits);
    if labels.len() != t {
        return Err(Error::dim(
            "nll_loss",
            format!("{} labels for {t} rows", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(
            "nll_loss",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    let m = tape.row_max(logits)?;
    let mb = tape.broadcast_cols(m, classes)?;
    let centered = tape.sub(logits, mb)?;
    let e = tape.exp(centered)?;
    let se = tape.row_sum(e)?;
    let ln_se = tape.ln(se)?;
    let lse = tape.add(ln_se, m)?; // T×1 logsumexp
    let picked = tape.select_per_row(logits, labels.to_vec())?;
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll)
}

/// Dispatches to the loss matching the targets' task kind.
pub fn task_loss(tape: &mut Tape, prediction: Var, targets: &TaskTargets) -> Result<Var> {
    match targets {
        TaskTargets::Regression(t) => mse_loss(tape, prediction, t),
        TaskTargets::Classification(labels) => nll_loss(tape, prediction, labels),
    }
}

/// Writes every named parameter to a plain-text checkpoint. Values use
/// Rust's shortest-round-trip float formatting, so loading restores them
/// bit for bit.
pub fn save_checkpoint(model: &MoEModel, path: &Path) -> Result<()> {
    let params = model.named_params();
    let mut text = String::new();
    let _ = writeln!(text, "{CHECKPOINT_HEADER}");
    let _ = writeln!(text, "params {}", params.len());
    for (name, tensor) in params {
        let _ = writeln!(text, "param {name} {} {}", tensor.rows(), tensor.cols());
        for r in 0..tensor.rows() {
            let row: Vec<String> = tensor.row(r).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(text, "{}", row.join(" "));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`] and installs the values
/// into `model`. The file must carry exactly the model's parameter set, with
/// matching shapes.
pub fn load_checkpoint(model: &mut MoEModel, path: &Path) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let mut next_line = move || -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))
    };
    let header = next_line()?;
    if header.trim() != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!(
            "unsupported header {header:?}, expected {CHECKPOINT_HEADER:?}"
        )));
    }
    let count_line = next_line()?;
    let count: usize = count_line
        .trim()
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad params line {count_line:?}")))?;
    let mut entries: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let head = next_line()?;
        let mut parts = head.split_whitespace();
        let (tag, name, rows, cols) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(tag), Some(name), Some(r), Some(c)) => (tag, name.to_string(), r, c),
            _ => return Err(Error::Checkpoint(format!("bad param line {head:?}"))),
        };
        if tag != "param" || parts.next().is_some() {
            return Err(Error::Checkpoint(format!("bad param line {head:?}")));
        }
        let rows: usize = rows
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad row count in {head:?}")))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad column count in {head:?}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = next_line()?;
            for v in line.split_whitespace() {
                let parsed: f64 = v
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value {v:?} in {name}")))?;
                data.push(parsed);
            }
        }
        let tensor = Tensor::from_vec(rows, cols, data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    for (name, target) in model.named_params_mut() {
        let loaded = entries
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if loaded.shape() != target.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint is {:?}, model is {:?}",
                loaded.shape(),
                target.shape()
            )));
        }
        *target = loaded;
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has unknown parameter {extra}"
        )));
    }
    Ok(())
}
