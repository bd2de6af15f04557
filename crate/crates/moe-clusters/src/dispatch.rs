//! Capacity-limited token-to-expert dispatch.
//!
//! After top-1 selection every token wants exactly one expert, but each
//! expert only has room for
//!
//! ```text
//! C = ceil(capacity_factor · T / N)
//! ```
//!
//! tokens per batch. Tokens claim slots in batch order (earlier tokens win);
//! a token whose expert is full is *overflowed*: it still records its chosen
//! expert and gate value, but no expert processes it and the layer passes its
//! residual through unchanged.
//!
//! The result also feeds the routing statistics: per-expert counts, the
//! overflow tally, and the per-cluster aggregation used for reporting.

use crate::error::{Error, Result};
use crate::losses::ClusterConfig;
use crate::numerics::Tensor;

/// Outcome of assigning one batch of tokens to experts.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchResult {
    /// Top-1 expert per token (always an unmasked expert).
    pub chosen: Vec<usize>,
    /// True where the chosen expert was already at capacity.
    pub overflowed: Vec<bool>,
    /// Gate value at the chosen expert, recorded for every token.
    pub gate_values: Vec<f64>,
    /// Tokens actually dispatched per expert; never exceeds `capacity`.
    pub counts: Vec<usize>,
    /// Number of overflowed tokens (`Σ counts + overflow = T`).
    pub overflow: usize,
    /// Per-expert slot budget `C` for this batch.
    pub capacity: usize,
}

impl DispatchResult {
    /// Batch size `T`.
    pub fn num_tokens(&self) -> usize {
        self.chosen.len()
    }

    /// Per-token destination: `Some(expert)` if dispatched, `None` if the
    /// token overflowed.
    pub fn routes(&self) -> Vec<Option<usize>> {
        self.chosen
            .iter()
            .zip(&self.overflowed)
            .map(|(&e, &o)| if o { None } else { Some(e) })
            .collect()
    }

    /// Fraction of the batch dropped for capacity.
    pub fn overflow_rate(&self) -> f64 {
        self.overflow as f64 / self.num_tokens() as f64
    }

    /// Token indices dispatched to `expert`, in batch order.
    pub fn tokens_for(&self, expert: usize) -> Vec<usize> {
        (0..self.num_tokens())
            .filter(|&t| self.chosen[t] == expert && !self.overflowed[t])
            .collect()
    }
}

/// Per-expert slot budget: `ceil(capacity_factor · tokens / experts)`.
pub fn expert_capacity(capacity_factor: f64, tokens: usize, num_experts: usize) -> Result<usize> {
    if capacity_factor <= 0.0 || !capacity_factor.is_finite() {
        return Err(Error::contract(
            "expert_capacity",
            format!("capacity factor must be positive and finite, got {capacity_factor}"),
        ));
    }
    if tokens == 0 || num_experts == 0 {
        return Err(Error::contract(
            "expert_capacity",
            "need at least one token and one expert",
        ));
    }
    Ok((capacity_factor * tokens as f64 / num_experts as f64).ceil() as usize)
}

/// Assigns tokens to their chosen experts under the capacity limit, in batch
/// order.
///
/// `chosen[t]` is token `t`'s top-1 expert; `alpha` is the full T×N gate
/// matrix from which per-token gate values are read.
pub fn dispatch(chosen: &[usize], alpha: &Tensor, capacity_factor: f64) -> Result<DispatchResult> {
    let (t, n) = alpha.shape();
    if chosen.len() != t {
        return Err(Error::dim(
            "dispatch",
            format!("{} selections for {t} tokens", chosen.len()),
        ));
    }
    if let Some(&bad) = chosen.iter().find(|&&e| e >= n) {
        return Err(Error::contract(
            "dispatch",
            format!("chosen expert {bad} out of range for {n} experts"),
        ));
    }
    let capacity = expert_capacity(capacity_factor, t, n)?;
    let mut counts = vec![0usize; n];
    let mut overflowed = vec![false; t];
    let mut gate_values = vec![0.0; t];
    let mut overflow = 0usize;
    for (token, &expert) in chosen.iter().enumerate() {
        gate_values[token] = alpha.get(token, expert);
        if counts[expert] < capacity {
            counts[expert] += 1;
        } else {
            overflowed[token] = true;
            overflow += 1;
        }
    }
    Ok(DispatchResult {
        chosen: chosen.to_vec(),
        overflowed,
        gate_values,
        counts,
        overflow,
        capacity,
    })
}

/// Dispatch fractions viewed at expert and cluster granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFractions {
    /// `Count_i / T` per expert.
    pub per_expert: Vec<f64>,
    /// Sum of member fractions per cluster (fraction of the batch the
    /// cluster absorbed).
    pub per_cluster: Vec<f64>,
    /// Each expert's share of its own cluster's traffic (0 when the cluster
    /// received nothing).
    pub within_cluster: Vec<f64>,
}

/// Aggregates a dispatch outcome per cluster.
pub fn cluster_fractions(result: &DispatchResult, cfg: &ClusterConfig) -> Result<ClusterFractions> {
    if result.counts.len() != cfg.num_experts() {
        return Err(Error::dim(
            "cluster_fractions",
            format!(
                "dispatch covers {} experts, cluster config has {}",
                result.counts.len(),
                cfg.num_experts()
            ),
        ));
    }
    let t = result.num_tokens() as f64;
    let per_expert: Vec<f64> = result.counts.iter().map(|&c| c as f64 / t).collect();
    let mut per_cluster = Vec::with_capacity(cfg.num_clusters());
    let mut within_cluster = vec![0.0; cfg.num_experts()];
    for c in 0..cfg.num_clusters() {
        let total: f64 = cfg.members(c).map(|e| per_expert[e]).sum();
        per_cluster.push(total);
        if total > 0.0 {
            for e in cfg.members(c) {
                within_cluster[e] = per_expert[e] / total;
            }
        }
    }
    Ok(ClusterFractions {
        per_expert,
        per_cluster,
        within_cluster,
    })
}
