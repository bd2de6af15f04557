//! End-to-end gradient self-diagnosis.
//!
//! Re-derives the analytic gradients of the four differentiable pillars —
//! the gating stack, the balance loss, the clustering loss, and the full
//! model objective — with central finite differences, and reports the worst
//! relative error per pillar. Probe points are screened so no discrete
//! decision (top-1 pick, relu kink, cluster-mean argmax) sits within a
//! finite-difference step of flipping; failures therefore indicate real
//! gradient bugs, not screening noise.
//!
//! The optional fault injection flips the *gradient* of the clustering loss
//! while leaving its value untouched (`-x + 2·stopgrad(x)` evaluates to `x`
//! but differentiates to `-1`). A healthy checker must flag exactly that
//! pillar; this proves the report can actually fail.

use crate::dropout::inference_mask;
use crate::error::Result;
use crate::gating::{gate_values, routing_scores, GatingKind, RouterParams, RouterVars};
use crate::losses::{balance_loss, clustering_loss, token_fractions, total_loss, ClusterConfig};
use crate::model::{task_loss, MoEModel, ModelDims, ModelSpec, ModelVars, TaskKind, TaskTargets};
use crate::numerics::{finite_difference_check_multi, Tape, Tensor, Var, GRAD_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one pillar's check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    /// Worst relative error between analytic and numeric gradients across
    /// all probe points and coordinates.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn from_err(name: &'static str, max_rel_err: f64) -> Self {
        GradCheckReport {
            name,
            max_rel_err,
            tolerance: GRAD_TOL,
            pass: max_rel_err < GRAD_TOL,
        }
    }
}

/// Random probe points evaluated per loss/gating pillar in one report.
pub const PROBE_POINTS: usize = 8;
/// Margin-screened probe points for the end-to-end pillar in one report.
pub const MODEL_PROBE_POINTS: usize = 3;

/// Value-preserving gradient sabotage: returns a node that evaluates to `x`
/// but back-propagates `-1` times the true gradient.
fn flip_gradient_sign(tape: &mut Tape, x: Var) -> Result<Var> {
    let neg = tape.mul_scalar(x, -1.0)?;
    let frozen = tape.stop_grad(x)?;
    let twice = tape.mul_scalar(frozen, 2.0)?;
    tape.add(neg, twice)
}

fn check_gating_stack(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mask = inference_mask(3);
    let mut worst = 0.0f64;
    for _ in 0..PROBE_POINTS {
        let kind = if rng.random_bool(0.5) {
            GatingKind::Softmax
        } else {
            GatingKind::Sigmoid
        };
        let hidden =
            Tensor::from_vec(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let embed = Tensor::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let proj = Tensor::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let log_temp = Tensor::scalar(rng.random_range(-0.3..0.3));
        let weights =
            Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(0.5..1.5)).collect())?;
        let mask = mask.clone();
        let err = finite_difference_check_multi(
            move |tape, leaves| {
                let params = RouterParams::new(
                    tape.value(leaves[1]).clone(),
                    Some(tape.value(leaves[2]).clone()),
                    Some(tape.value(leaves[3]).clone()),
                    true,
                    kind,
                )?;
                let vars = RouterVars {
                    expert_embed: leaves[1],
                    projection: Some(leaves[2]),
                    log_temperature: Some(leaves[3]),
                };
                let scores = routing_scores(tape, leaves[0], &params, &vars, &mask)?;
                let alpha = gate_values(tape, scores, kind)?;
                let w = tape.constant(weights.clone())?;
                let weighted = tape.mul(alpha, w)?;
                tape.sum(weighted)
            },
            &[hidden, embed, proj, log_temp],
        )?;
        worst = worst.max(err);
    }
    Ok(GradCheckReport::from_err("gating-stack", worst))
}

fn check_balance_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..PROBE_POINTS {
        // Gate matrix for 8 tokens over 4 experts: positive, row-normalized.
        let mut alpha = Tensor::zeros(8, 4);
        for r in 0..8 {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for (c, v) in raw.iter().enumerate() {
                alpha.set(r, c, v / sum);
            }
        }
        // Dispatch fractions are hard counts — held fixed during probing, as
        // in training, where they carry no gradient.
        let fractions = vec![0.375, 0.25, 0.25, 0.125];
        let err = finite_difference_check_multi(
            move |tape, leaves| {
                let p = crate::losses::mean_routing_prob(tape, leaves[0])?;
                balance_loss(tape, &fractions, p, 0.01, 4)
            },
            &[alpha],
        )?;
        worst = worst.max(err);
    }
    Ok(GradCheckReport::from_err("balance-loss", worst))
}

fn check_clustering_loss(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    mu: f64,
    flip_sign: bool,
) -> Result<GradCheckReport> {
    let cfg = ClusterConfig::new(8, 2)?;
    let mask = inference_mask(8);
    let mut worst = 0.0f64;
    for _ in 0..PROBE_POINTS {
        // Mean gate probabilities near uniform, with cluster 0 boosted so the
        // leading cluster-mean gap (~0.05) dwarfs the finite-difference step
        // and the internal argmax cannot flip during probing.
        let mut p = Tensor::zeros(1, 8);
        for e in 0..8 {
            let boost = if e < 4 { 0.05 } else { 0.0 };
            p.set(0, e, 0.125 + boost + rng.random_range(-0.01..0.01));
        }
        let cfg = cfg.clone();
        let mask = mask.clone();
        // Unit coefficient: the check probes the gradient machinery, and a
        // tiny coefficient would shrink a flipped gradient toward the
        // tolerance instead of leaving it unmistakable.
        let err = finite_difference_check_multi(
            move |tape, leaves| {
                let terms = clustering_loss(tape, leaves[0], &cfg, &mask, 1.0, mu)?;
                if flip_sign {
                    flip_gradient_sign(tape, terms.loss)
                } else {
                    Ok(terms.loss)
                }
            },
            &[p],
        )?;
        worst = worst.max(err);
    }
    Ok(GradCheckReport::from_err(name, worst))
}

fn check_full_model(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let spec = ModelSpec {
        dims: ModelDims {
            input_dim: 3,
            hidden_dim: 4,
            ffn_dim: 5,
            routing_dim: 2,
            output_dim: 2,
        },
        clusters: ClusterConfig::new(4, 2)?,
        capacity_factor: 2.0,
        normalize_routing: false,
        gating: GatingKind::Softmax,
        task: TaskKind::Regression,
    };
    let mask = inference_mask(4);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < MODEL_PROBE_POINTS && attempts < 200 {
        attempts += 1;
        let model = MoEModel::init(&spec, rng)?;
        let inputs =
            Tensor::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let targets =
            Tensor::from_vec(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        if !margins_clear(&model, &inputs, &mask)? {
            continue;
        }
        accepted += 1;
        let flat: Vec<Tensor> = model
            .named_params()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let model_c = model.clone();
        let inputs_c = inputs.clone();
        let mask_c = mask.clone();
        let err = finite_difference_check_multi(
            move |tape, leaves| {
                let mut probe = model_c.clone();
                for ((_, target), leaf) in probe.named_params_mut().into_iter().zip(leaves) {
                    *target = tape.value(*leaf).clone();
                }
                let vars = ModelVars::from_flat(&probe, leaves)?;
                let out = probe.forward(tape, &vars, &inputs_c, &mask_c)?;
                let task = task_loss(
                    tape,
                    out.prediction,
                    &TaskTargets::Regression(targets.clone()),
                )?;
                let fractions = token_fractions(&out.routing.dispatch.routes(), 4)?;
                let balance = balance_loss(tape, &fractions, out.routing.mean_probs, 0.01, 4)?;
                let terms = clustering_loss(
                    tape,
                    out.routing.mean_probs,
                    &probe.layer.clusters,
                    &mask_c,
                    0.01,
                    0.0,
                )?;
                total_loss(tape, task, balance, terms.loss)
            },
            &flat,
        )?;
        worst = worst.max(err);
    }
    if accepted < MODEL_PROBE_POINTS {
        return Err(crate::error::Error::contract(
            "check_full_model",
            "could not find margin-clean probe points in 200 attempts",
        ));
    }
    Ok(GradCheckReport::from_err("full-model", worst))
}

/// True when every discrete decision in the model's forward pass sits far
/// enough from its flip point for finite differences to be trustworthy.
fn margins_clear(
    model: &MoEModel,
    inputs: &Tensor,
    mask: &crate::dropout::ExpertMask,
) -> Result<bool> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &vars, inputs, mask)?;
    let alpha = tape.value(out.routing.alpha);
    for t in 0..alpha.rows() {
        let mut row: Vec<f64> = alpha.row(t).to_vec();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if row[0] - row[1] < 1e-3 {
            return Ok(false);
        }
    }
    // Expert relu pre-activations, recomputed value-level.
    let mut hidden = inputs.matmul(&model.input_w)?;
    for r in 0..hidden.rows() {
        for c in 0..hidden.cols() {
            hidden.set(r, c, hidden.get(r, c) + model.input_b.get(0, c));
        }
    }
    for (e, ffn) in model.layer.experts.iter().enumerate() {
        for t in out.routing.dispatch.tokens_for(e) {
            let row = Tensor::row_vector(hidden.row(t).to_vec());
            let pre = row.matmul(&ffn.w1)?;
            for c in 0..pre.cols() {
                if (pre.get(0, c) + ffn.b1.get(0, c)).abs() < 1e-4 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Runs every pillar check: the gating stack, the balance loss, the
/// clustering loss with the inter-cluster term off (μ=0) and on (μ=1), and
/// the full end-to-end objective. `flip_clustering_sign` injects the
/// value-preserving gradient fault into both clustering pillars, which a
/// working checker must then fail.
pub fn run_gradient_report(seed: u64, flip_clustering_sign: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        check_gating_stack(&mut rng)?,
        check_balance_loss(&mut rng)?,
        check_clustering_loss(&mut rng, "clustering-loss-mu0", 0.0, flip_clustering_sign)?,
        check_clustering_loss(&mut rng, "clustering-loss-mu1", 1.0, flip_clustering_sign)?,
        check_full_model(&mut rng)?,
    ])
}
