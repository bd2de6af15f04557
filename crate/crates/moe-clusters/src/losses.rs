//! Routing losses: load balance, intra/inter-cluster regularization, totals.
//!
//! Two auxiliary losses shape the router. The **balance loss** spreads tokens
//! across experts:
//!
//! ```text
//! L_balance = coef · N · Σ_i f_i · p_i
//! ```
//!
//! where `f_i` is the fraction of tokens dispatched to expert `i` (a hard
//! count, treated as data — no gradient) and `p_i` is the batch-mean gate
//! probability of expert `i`. At a uniform distribution the sum is exactly
//! `1/N`, so the loss floor is `coef` itself.
//!
//! The **clustering loss** makes experts inside a cluster interchangeable
//! while keeping distinct clusters specialized:
//!
//! ```text
//! L_cluster = coef · N · C_intra · C_inter
//! C_intra   = (1/m) Σ_clusters population-variance(p over the cluster)
//! C_inter   = exp(-mu · (max(p̄) - max2(p̄)) / max(p̄))
//! ```
//!
//! with `p̄` the per-cluster means of `p`. `C_intra` shrinks as the experts
//! of each cluster receive equal routing mass; `C_inter` (active when
//! `mu > 0`) grows toward 1 when the two leading clusters tie, penalizing
//! blurred cluster identities. Under expert dropout every statistic is taken
//! over the *surviving* experts only, and cluster variances divide by the
//! survivor count of that cluster.

use crate::dispatch::DispatchResult;
use crate::dropout::ExpertMask;
use crate::error::{Error, Result};
use crate::gating::MASK_SENTINEL;
use crate::numerics::{Tape, Tensor, Var};
use std::ops::Range;

/// Threshold under which a max cluster mean counts as degenerate (all gate
/// mass vanished), which the inter-cluster term refuses to divide by.
pub const DEGENERATE_MEAN_EPS: f64 = 1e-12;

/// Static partition of `N` experts into `m` equal, contiguous clusters.
///
/// Expert `e` belongs to cluster `e / (N/m)`; cluster `c` owns the index
/// range `[c·L, (c+1)·L)` with `L = N/m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    num_experts: usize,
    num_clusters: usize,
}

impl ClusterConfig {
    /// Validates `N ≥ 1`, `m ≥ 1`, and `m | N`.
    pub fn new(num_experts: usize, num_clusters: usize) -> Result<Self> {
        if num_experts == 0 || num_clusters == 0 {
            return Err(Error::contract(
                "ClusterConfig::new",
                "expert and cluster counts must be at least 1",
            ));
        }
        if !num_experts.is_multiple_of(num_clusters) {
            return Err(Error::contract(
                "ClusterConfig::new",
                format!("{num_experts} experts do not divide into {num_clusters} equal clusters"),
            ));
        }
        Ok(ClusterConfig {
            num_experts,
            num_clusters,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    /// Experts per cluster (`L`).
    pub fn cluster_size(&self) -> usize {
        self.num_experts / self.num_clusters
    }

    /// Cluster that owns expert `e`.
    pub fn cluster_of(&self, expert: usize) -> usize {
        debug_assert!(expert < self.num_experts);
        expert / self.cluster_size()
    }

    /// Expert index range of cluster `c`.
    pub fn members(&self, cluster: usize) -> Range<usize> {
        debug_assert!(cluster < self.num_clusters);
        let l = self.cluster_size();
        cluster * l..(cluster + 1) * l
    }
}

/// Per-batch routing statistics, all value-level (no gradients).
///
/// Under dropout the cluster views cover surviving experts only; a cluster
/// with no survivors reports an empty probability list and a zero mean.
#[derive(Debug, Clone)]
pub struct RoutingStats {
    /// Fraction of tokens dispatched to each expert (`Count_i / T`).
    pub fractions: Vec<f64>,
    /// Batch-mean gate probability per expert.
    pub mean_probs: Vec<f64>,
    /// Surviving members' mean probabilities, per cluster.
    pub cluster_probs: Vec<Vec<f64>>,
    /// Mean of `cluster_probs` per cluster (0 when the cluster is empty).
    pub cluster_means: Vec<f64>,
    /// Tokens in the batch (`T`).
    pub tokens: usize,
    /// Tokens dispatched per expert, after capacity drops.
    pub counts: Vec<usize>,
}

impl RoutingStats {
    /// Assembles statistics from a dispatch outcome and the batch-mean gate
    /// probabilities.
    pub fn collect(
        dispatch: &DispatchResult,
        mean_probs: &[f64],
        cfg: &ClusterConfig,
        mask: &ExpertMask,
    ) -> Result<Self> {
        let n = cfg.num_experts();
        if mean_probs.len() != n {
            return Err(Error::dim(
                "RoutingStats::collect",
                format!("{} mean probabilities for {n} experts", mean_probs.len()),
            ));
        }
        if dispatch.counts.len() != n || mask.num_experts() != n {
            return Err(Error::dim(
                "RoutingStats::collect",
                "dispatch counts, mask, and cluster config disagree on expert count",
            ));
        }
        let tokens = dispatch.num_tokens();
        let fractions = token_fractions(&dispatch.routes(), n)?;
        let mut cluster_probs = Vec::with_capacity(cfg.num_clusters());
        let mut cluster_means = Vec::with_capacity(cfg.num_clusters());
        for c in 0..cfg.num_clusters() {
            let probs: Vec<f64> = cfg
                .members(c)
                .filter(|&e| mask.is_alive(e))
                .map(|e| mean_probs[e])
                .collect();
            let mean = if probs.is_empty() {
                0.0
            } else {
                probs.iter().sum::<f64>() / probs.len() as f64
            };
            cluster_probs.push(probs);
            cluster_means.push(mean);
        }
        Ok(RoutingStats {
            fractions,
            mean_probs: mean_probs.to_vec(),
            cluster_probs,
            cluster_means,
            tokens,
            counts: dispatch.counts.clone(),
        })
    }

    /// Mean over clusters of the population variance of surviving members'
    /// mean probabilities (value-level mirror of
    /// [`intra_cluster_variance`]).
    pub fn c_intra(&self) -> f64 {
        let m = self.cluster_probs.len();
        if m == 0 {
            return 0.0;
        }
        let total: f64 = self
            .cluster_probs
            .iter()
            .map(|probs| {
                if probs.is_empty() {
                    return 0.0;
                }
                let mean = probs.iter().sum::<f64>() / probs.len() as f64;
                probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / probs.len() as f64
            })
            .sum();
        total / m as f64
    }
}

/// Scalar pieces of the clustering loss, all live on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ClusterTerms {
    /// Mean within-cluster population variance (1×1).
    pub c_intra: Var,
    /// Inter-cluster separation factor in `[exp(-mu), 1]` (1×1).
    pub c_inter: Var,
    /// `coef · N · C_intra · C_inter` (1×1).
    pub loss: Var,
}

/// Histogram of per-token expert assignments normalized by the token count.
///
/// `None` marks a token dropped for capacity: it contributes to the
/// denominator but to no expert's count, so the fractions sum to
/// `1 - overflow/T`.
pub fn token_fractions(assignments: &[Option<usize>], num_experts: usize) -> Result<Vec<f64>> {
    if assignments.is_empty() {
        return Err(Error::contract("token_fractions", "empty assignment list"));
    }
    let mut counts = vec![0usize; num_experts];
    for e in assignments.iter().flatten() {
        if *e >= num_experts {
            return Err(Error::contract(
                "token_fractions",
                format!("expert id {e} out of range for {num_experts} experts"),
            ));
        }
        counts[*e] += 1;
    }
    let t = assignments.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / t).collect())
}

/// Column mean of the T×N gate matrix: the batch-mean probability `p` as a
/// differentiable 1×N row.
pub fn mean_routing_prob(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let (t, _) = tape.shape(alpha);
    if t == 0 {
        return Err(Error::contract("mean_routing_prob", "no tokens in batch"));
    }
    let weights = tape.constant(Tensor::filled(1, t, 1.0 / t as f64))?;
    tape.matmul(weights, alpha)
}

/// Load-balance loss `coef · n_scale · Σ f_i p_i`.
///
/// `fractions` enters as plain data (hard dispatch counts carry no gradient),
/// so the loss differentiates through `p` only. `n_scale` is the expert count
/// to scale by — the full `N` normally, or the survivor count when the
/// trainer is configured to renormalize under dropout.
pub fn balance_loss(
    tape: &mut Tape,
    fractions: &[f64],
    mean_prob: Var,
    coef: f64,
    n_scale: usize,
) -> Result<Var> {
    let (rows, cols) = tape.shape(mean_prob);
    if rows != 1 || cols != fractions.len() {
        return Err(Error::dim(
            "balance_loss",
            format!(
                "p is {rows}x{cols}, fractions have length {}",
                fractions.len()
            ),
        ));
    }
    let f = tape.constant(Tensor::row_vector(fractions.to_vec()))?;
    let prod = tape.mul(f, mean_prob)?;
    let dot = tape.sum(prod)?;
    tape.mul_scalar(dot, coef * n_scale as f64)
}

/// The constant matrices that express survivor-aware cluster statistics as
/// matrix products:
///
/// * `averager` (N×m): column `c` holds `1/L'_c` at surviving members of
///   cluster `c`, so `p · averager = p̄`; it also averages squared
///   deviations back into per-cluster variances.
/// * `membership` (m×N): row `c` holds 1 at surviving members, spreading
///   `p̄_c` back over the cluster.
///
/// Clusters with no survivors produce zero columns/rows (their variance
/// contribution is 0 and their mean reads 0).
fn survivor_matrices(cfg: &ClusterConfig, mask: &ExpertMask) -> (Tensor, Tensor) {
    let (n, m) = (cfg.num_experts(), cfg.num_clusters());
    let mut averager = Tensor::zeros(n, m);
    let mut membership = Tensor::zeros(m, n);
    for c in 0..m {
        let members: Vec<usize> = cfg.members(c).filter(|&e| mask.is_alive(e)).collect();
        if members.is_empty() {
            continue;
        }
        let inv = 1.0 / members.len() as f64;
        for &e in &members {
            averager.set(e, c, inv);
            membership.set(c, e, 1.0);
        }
    }
    (averager, membership)
}

fn check_p_shape(op: &'static str, tape: &Tape, p: Var, cfg: &ClusterConfig) -> Result<()> {
    let (rows, cols) = tape.shape(p);
    if rows != 1 || cols != cfg.num_experts() {
        return Err(Error::dim(
            op,
            format!("p is {rows}x{cols}, expected 1x{}", cfg.num_experts()),
        ));
    }
    Ok(())
}

/// Per-cluster means `p̄` of the surviving members of each cluster, as a
/// differentiable 1×m row (0 for clusters with no survivors).
pub fn cluster_means(
    tape: &mut Tape,
    mean_prob: Var,
    cfg: &ClusterConfig,
    mask: &ExpertMask,
) -> Result<Var> {
    check_p_shape("cluster_means", tape, mean_prob, cfg)?;
    let (averager, _) = survivor_matrices(cfg, mask);
    let a = tape.constant(averager)?;
    tape.matmul(mean_prob, a)
}

/// `C_intra`: mean over clusters of the population variance of surviving
/// members' mean probabilities. Differentiable through `p`.
pub fn intra_cluster_variance(
    tape: &mut Tape,
    mean_prob: Var,
    cfg: &ClusterConfig,
    mask: &ExpertMask,
) -> Result<Var> {
    check_p_shape("intra_cluster_variance", tape, mean_prob, cfg)?;
    let (averager, membership) = survivor_matrices(cfg, mask);
    let indicator = {
        let mut ind = Tensor::zeros(1, cfg.num_experts());
        for e in 0..cfg.num_experts() {
            if mask.is_alive(e) {
                ind.set(0, e, 1.0);
            }
        }
        ind
    };
    let a = tape.constant(averager)?;
    let s = tape.constant(membership)?;
    let ind = tape.constant(indicator)?;

    let pbar = tape.matmul(mean_prob, a)?; // 1×m
    let spread = tape.matmul(pbar, s)?; // 1×N, p̄ at survivors, 0 elsewhere
    let dev = tape.sub(mean_prob, spread)?;
    // Restrict deviations to survivors: dropped experts must not contribute
    // even when the caller's p carries nonzero mass there.
    let dev_alive = tape.mul(dev, ind)?;
    let sq = tape.mul(dev_alive, dev_alive)?;
    let variances = tape.matmul(sq, a)?; // 1×m, each divided by that cluster's survivor count
    tape.mean(variances)
}

/// `C_inter = exp(-mu · (max p̄ - max2 p̄) / max p̄)`, in `[exp(-mu), 1]`.
///
/// With `mu = 0` this is the constant 1 (and a single cluster is allowed);
/// with `mu > 0` at least two clusters are required. The max and runner-up
/// break ties toward the lowest cluster index, and the gradient follows that
/// choice.
pub fn inter_cluster_constraint(tape: &mut Tape, cluster_means: Var, mu: f64) -> Result<Var> {
    let (rows, m) = tape.shape(cluster_means);
    if rows != 1 || m == 0 {
        return Err(Error::dim(
            "inter_cluster_constraint",
            format!("cluster means must be 1xm, got {rows}x{m}"),
        ));
    }
    if mu < 0.0 {
        return Err(Error::contract(
            "inter_cluster_constraint",
            format!("mu must be non-negative, got {mu}"),
        ));
    }
    let top = tape
        .value(cluster_means)
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if top <= DEGENERATE_MEAN_EPS {
        return Err(Error::contract(
            "inter_cluster_constraint",
            format!(
                "max cluster mean {top} is at or below {DEGENERATE_MEAN_EPS}; gate mass vanished"
            ),
        ));
    }
    if mu == 0.0 {
        // exp(-0 · gap/max) ≡ 1 with zero gradient; emit the constant
        // directly rather than a degenerate max2 on a possible 1-cluster
        // layout.
        return tape.constant(Tensor::scalar(1.0));
    }
    if m < 2 {
        return Err(Error::contract(
            "inter_cluster_constraint",
            "mu > 0 needs at least two clusters to compare",
        ));
    }
    let max1 = tape.row_max(cluster_means)?; // 1×1, ties -> lowest index
                                             // Mask the argmax entry with the sentinel so a second row_max reads the
                                             // runner-up; the index choice is made on values, the gradient then flows
                                             // through the surviving entries.
    let argmax = {
        let row = tape.value(cluster_means).row(0);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best
    };
    let sentinel = {
        let mut t = Tensor::zeros(1, m);
        t.set(0, argmax, MASK_SENTINEL);
        t
    };
    let sent = tape.constant(sentinel)?;
    let without_top = tape.add(cluster_means, sent)?;
    let max2 = tape.row_max(without_top)?;
    let gap = tape.sub(max1, max2)?;
    let ratio = tape.div(gap, max1)?;
    let scaled = tape.mul_scalar(ratio, -mu)?;
    tape.exp(scaled)
}

/// Full clustering loss `coef · N · C_intra · C_inter` with its factor terms.
pub fn clustering_loss(
    tape: &mut Tape,
    mean_prob: Var,
    cfg: &ClusterConfig,
    mask: &ExpertMask,
    coef: f64,
    mu: f64,
) -> Result<ClusterTerms> {
    check_p_shape("clustering_loss", tape, mean_prob, cfg)?;
    if mask.num_experts() != cfg.num_experts() {
        return Err(Error::dim(
            "clustering_loss",
            format!(
                "mask covers {} experts, cluster config has {}",
                mask.num_experts(),
                cfg.num_experts()
            ),
        ));
    }
    let c_intra = intra_cluster_variance(tape, mean_prob, cfg, mask)?;
    let means = cluster_means(tape, mean_prob, cfg, mask)?;
    let c_inter = inter_cluster_constraint(tape, means, mu)?;
    let product = tape.mul(c_intra, c_inter)?;
    let loss = tape.mul_scalar(product, coef * cfg.num_experts() as f64)?;
    Ok(ClusterTerms {
        c_intra,
        c_inter,
        loss,
    })
}

/// Total objective: `task + balance + clustering`. All three must be scalars.
pub fn total_loss(tape: &mut Tape, task: Var, balance: Var, clustering: Var) -> Result<Var> {
    for (name, v) in [
        ("task", task),
        ("balance", balance),
        ("clustering", clustering),
    ] {
        if tape.shape(v) != (1, 1) {
            let (r, c) = tape.shape(v);
            return Err(Error::contract(
                "total_loss",
                format!("{name} loss must be 1x1, got {r}x{c}"),
            ));
        }
    }
    let partial = tape.add(task, balance)?;
    tape.add(partial, clustering)
}
