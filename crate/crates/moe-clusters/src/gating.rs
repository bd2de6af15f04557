//! Routing scores, gate values, top-k selection, and output combination.
//!
//! A token with hidden state `h` scores each expert by a dot product with
//! that expert's embedding, `s_i = h·e_i`. With the `normalize` option the
//! dot product happens on a low-dimensional unit sphere instead: `h` is
//! projected to the routing dimension, both the projected token and the
//! expert embeddings are L2-normalized (so scores become cosines), and the
//! result is divided by a learnable temperature. That keeps every score in
//! `[-1/τ, 1/τ]` and stops the embedding-norm race that makes plain dot-score
//! routers collapse onto a few experts.
//!
//! Scores turn into gate values α through a row softmax (default) or an
//! element-wise sigmoid. Masked experts carry the additive [`MASK_SENTINEL`]
//! in their scores; `exp` underflows the sentinel to exactly 0, so masked
//! gates are *exactly* zero, receive no tokens, and propagate no gradient.
//!
//! The layer output combines the selected experts as `y = Σ_{i∈K} α_i·E_i(x)`
//! with the gate values taken as-is — deliberately *not* renormalized over
//! the selected set.

use crate::dropout::ExpertMask;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Additive sentinel for masked routing scores. Large enough that softmax
/// and sigmoid underflow it to an exact zero gate, small enough to stay
/// finite in every intermediate.
pub const MASK_SENTINEL: f64 = -1e30;

/// Epsilon added under the square root of row norms so a zero row normalizes
/// to zero instead of NaN. Perturbs cosines by O(1e-12) at unit scale.
pub const NORM_EPS: f64 = 1e-12;

/// Score-to-gate transfer function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingKind {
    /// Row softmax over candidate experts (gates sum to 1 per token).
    Softmax,
    /// Independent per-expert sigmoid (gates in (0,1), no coupling).
    Sigmoid,
}

/// Trainable router state.
#[derive(Debug, Clone)]
pub struct RouterParams {
    /// One embedding per expert (N×r).
    pub expert_embed: Tensor,
    /// Projection from the hidden to the routing dimension (d×r); absent when
    /// the two agree and tokens are scored raw.
    pub projection: Option<Tensor>,
    /// Natural log of the score temperature (1×1); present iff `normalize`.
    /// Parameterized in log space so the temperature stays positive under
    /// unconstrained updates.
    pub log_temperature: Option<Tensor>,
    /// Score on the unit sphere with temperature when true.
    pub normalize: bool,
    /// Transfer function from scores to gates.
    pub gating: GatingKind,
}

/// Tape handles for the router parameters of one step.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub expert_embed: Var,
    pub projection: Option<Var>,
    pub log_temperature: Option<Var>,
}

impl RouterParams {
    /// Validates shape consistency between the pieces.
    pub fn new(
        expert_embed: Tensor,
        projection: Option<Tensor>,
        log_temperature: Option<Tensor>,
        normalize: bool,
        gating: GatingKind,
    ) -> Result<Self> {
        let (n, r) = expert_embed.shape();
        if n == 0 || r == 0 {
            return Err(Error::contract(
                "RouterParams::new",
                "need at least one expert and a positive routing dimension",
            ));
        }
        if let Some(p) = &projection {
            if p.cols() != r {
                return Err(Error::dim(
                    "RouterParams::new",
                    format!(
                        "projection is {}x{}, expert embeddings live in dimension {r}",
                        p.rows(),
                        p.cols()
                    ),
                ));
            }
        }
        if normalize != log_temperature.is_some() {
            return Err(Error::contract(
                "RouterParams::new",
                "log_temperature must be present exactly when normalize is on",
            ));
        }
        if let Some(lt) = &log_temperature {
            if lt.shape() != (1, 1) {
                return Err(Error::dim(
                    "RouterParams::new",
                    format!(
                        "log_temperature must be 1x1, got {}x{}",
                        lt.rows(),
                        lt.cols()
                    ),
                ));
            }
        }
        Ok(RouterParams {
            expert_embed,
            projection,
            log_temperature,
            normalize,
            gating,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.expert_embed.rows()
    }

    pub fn routing_dim(&self) -> usize {
        self.expert_embed.cols()
    }

    /// Hidden dimension the router expects on input.
    pub fn input_dim(&self) -> usize {
        self.projection
            .as_ref()
            .map_or(self.routing_dim(), Tensor::rows)
    }

    /// Current temperature value (`exp(log_temperature)`); 1 when the router
    /// runs without normalization.
    pub fn temperature(&self) -> f64 {
        self.log_temperature
            .as_ref()
            .map_or(1.0, |lt| lt.get(0, 0).exp())
    }

    /// Registers the router parameters on a tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<RouterVars> {
        let expert_embed = tape.leaf(self.expert_embed.clone())?;
        let projection = match &self.projection {
            Some(p) => Some(tape.leaf(p.clone())?),
            None => None,
        };
        let log_temperature = match &self.log_temperature {
            Some(lt) => Some(tape.leaf(lt.clone())?),
            None => None,
        };
        Ok(RouterVars {
            expert_embed,
            projection,
            log_temperature,
        })
    }
}

/// L2-normalizes every row of `x` (safe on zero rows via [`NORM_EPS`]).
pub fn row_l2_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, cols) = tape.shape(x);
    let sq = tape.mul(x, x)?;
    let row_norms_sq = tape.row_sum(sq)?;
    let safe = tape.add_scalar(row_norms_sq, NORM_EPS)?;
    let norms = tape.sqrt(safe)?;
    let denom = tape.broadcast_cols(norms, cols)?;
    tape.div(x, denom)
}

/// Computes the T×N routing score matrix with the mask applied.
///
/// Surviving experts keep their scores bit-for-bit; masked experts' scores
/// are zeroed (killing their gradient path) and then shifted by
/// [`MASK_SENTINEL`], so downstream gates read an exact sentinel.
pub fn routing_scores(
    tape: &mut Tape,
    hidden: Var,
    params: &RouterParams,
    vars: &RouterVars,
    mask: &ExpertMask,
) -> Result<Var> {
    let (t, d) = tape.shape(hidden);
    let n = params.num_experts();
    if d != params.input_dim() {
        return Err(Error::dim(
            "routing_scores",
            format!(
                "hidden dimension {d}, router expects {}",
                params.input_dim()
            ),
        ));
    }
    if mask.num_experts() != n {
        return Err(Error::dim(
            "routing_scores",
            format!("mask covers {} experts, router has {n}", mask.num_experts()),
        ));
    }
    if mask.num_alive() == 0 {
        return Err(Error::contract(
            "routing_scores",
            "every token needs at least one unmasked expert",
        ));
    }

    let tokens = match vars.projection {
        Some(p) => tape.matmul(hidden, p)?, // T×r
        None => hidden,
    };
    let raw = if params.normalize {
        let tn = row_l2_normalize(tape, tokens)?;
        let en = row_l2_normalize(tape, vars.expert_embed)?;
        let ent = tape.transpose(en)?;
        let cosines = tape.matmul(tn, ent)?; // T×N in [-1, 1]
                                             // Divide by τ = exp(log τ): multiply by exp(-log τ), broadcast T×N.
        let lt = vars.log_temperature.ok_or_else(|| {
            Error::contract(
                "routing_scores",
                "normalize is on but no temperature was bound",
            )
        })?;
        let neg = tape.mul_scalar(lt, -1.0)?;
        let inv_temp = tape.exp(neg)?; // 1×1
        let inv_row = tape.broadcast_cols(inv_temp, n)?; // 1×N
        let inv_mat = tape.broadcast_rows(inv_row, t)?; // T×N
        tape.mul(cosines, inv_mat)?
    } else {
        let et = tape.transpose(vars.expert_embed)?;
        tape.matmul(tokens, et)? // T×N
    };

    // Mask: multiply dead columns to zero (cuts the gradient exactly), then
    // add the sentinel there.
    let mut keep = Tensor::zeros(t, n);
    let mut shift = Tensor::zeros(t, n);
    for row in 0..t {
        for e in 0..n {
            if mask.is_alive(e) {
                keep.set(row, e, 1.0);
            } else {
                shift.set(row, e, MASK_SENTINEL);
            }
        }
    }
    let keep = tape.constant(keep)?;
    let shift = tape.constant(shift)?;
    let kept = tape.mul(raw, keep)?;
    tape.add(kept, shift)
}

/// Turns masked scores into gate values α (T×N).
///
/// Softmax: numerically stabilized by row-max subtraction; candidate gates
/// sum to 1 per token and masked gates are exactly 0. Sigmoid: the stable
/// two-branch form `e^{s-max(s,0)} / (e^{-max(s,0)} + e^{s-max(s,0)})`,
/// element-wise; masked gates are exactly 0.
pub fn gate_values(tape: &mut Tape, scores: Var, kind: GatingKind) -> Result<Var> {
    let (_, n) = tape.shape(scores);
    // A row whose maximum is still at sentinel depth has no candidates; that
    // means the caller handed in an all-masked row.
    let row_max_ok = tape
        .value(scores)
        .data()
        .chunks(n)
        .all(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > MASK_SENTINEL / 2.0);
    if !row_max_ok {
        return Err(Error::contract(
            "gate_values",
            "a token has every expert masked; at least one candidate is required",
        ));
    }
    match kind {
        GatingKind::Softmax => {
            let m = tape.row_max(scores)?;
            let mb = tape.broadcast_cols(m, n)?;
            let centered = tape.sub(scores, mb)?;
            let exped = tape.exp(centered)?;
            let denom = tape.row_sum(exped)?;
            let denom_b = tape.broadcast_cols(denom, n)?;
            tape.div(exped, denom_b)
        }
        GatingKind::Sigmoid => {
            let m = tape.relu(scores)?; // max(s, 0), element-wise
            let shifted = tape.sub(scores, m)?; // s - max(s,0) ≤ 0
            let num = tape.exp(shifted)?; // e^{s-m} ∈ (0, 1]
            let neg_m = tape.mul_scalar(m, -1.0)?;
            let base = tape.exp(neg_m)?; // e^{-m} ∈ (0, 1]
            let denom = tape.add(base, num)?;
            tape.div(num, denom)
        }
    }
}

/// Indices of the `k` largest gates per token, restricted to unmasked
/// experts, in descending gate order with ties broken toward the lower
/// index.
pub fn top_k_select(alpha: &Tensor, k: usize, mask: &ExpertMask) -> Result<Vec<Vec<usize>>> {
    let (t, n) = alpha.shape();
    if mask.num_experts() != n {
        return Err(Error::dim(
            "top_k_select",
            format!("mask covers {} experts, gates have {n}", mask.num_experts()),
        ));
    }
    let candidates = mask.alive_indices();
    if k == 0 || k > candidates.len() {
        return Err(Error::contract(
            "top_k_select",
            format!("k = {k} with {} candidate experts", candidates.len()),
        ));
    }
    let mut selections = Vec::with_capacity(t);
    for row in 0..t {
        let mut taken = vec![false; n];
        let mut picks = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for &e in &candidates {
                if taken[e] {
                    continue;
                }
                // Strict `>` keeps the earliest (lowest-index) maximum.
                if best.is_none_or(|b| alpha.get(row, e) > alpha.get(row, b)) {
                    best = Some(e);
                }
            }
            let chosen = best.expect("k <= candidate count");
            taken[chosen] = true;
            picks.push(chosen);
        }
        selections.push(picks);
    }
    Ok(selections)
}

/// Combines per-token expert outputs with their gate values:
/// `y_t = Σ_{i ∈ selection[t]} α[t,i] · outputs[t][i]`.
///
/// `expert_outputs[t]` lists `(expert id, output row)` pairs for token `t`;
/// every selected expert must appear (missing entries are a contract error).
/// Gate values are used exactly as given — top-k gates are not renormalized.
pub fn combine_outputs(
    expert_outputs: &[Vec<(usize, Vec<f64>)>],
    alpha: &Tensor,
    selection: &[Vec<usize>],
) -> Result<Tensor> {
    let (t, n) = alpha.shape();
    if expert_outputs.len() != t || selection.len() != t {
        return Err(Error::dim(
            "combine_outputs",
            format!(
                "{} output lists and {} selections for {t} tokens",
                expert_outputs.len(),
                selection.len()
            ),
        ));
    }
    let width = expert_outputs
        .iter()
        .flat_map(|outs| outs.iter().map(|(_, row)| row.len()))
        .next()
        .ok_or_else(|| Error::contract("combine_outputs", "no expert outputs to infer width"))?;
    let mut y = Tensor::zeros(t, width);
    for token in 0..t {
        for (e, row) in &expert_outputs[token] {
            if row.len() != width {
                return Err(Error::dim(
                    "combine_outputs",
                    format!(
                        "token {token}: output of expert {e} has width {}",
                        row.len()
                    ),
                ));
            }
            if *e >= n {
                return Err(Error::contract(
                    "combine_outputs",
                    format!("token {token}: expert id {e} out of range"),
                ));
            }
        }
        for &chosen in &selection[token] {
            if chosen >= n {
                return Err(Error::contract(
                    "combine_outputs",
                    format!("token {token}: selected expert {chosen} out of range"),
                ));
            }
            let out = expert_outputs[token]
                .iter()
                .find(|(e, _)| *e == chosen)
                .map(|(_, row)| row)
                .ok_or_else(|| {
                    Error::contract(
                        "combine_outputs",
                        format!("token {token}: no output recorded for selected expert {chosen}"),
                    )
                })?;
            let gate = alpha.get(token, chosen);
            for (c, v) in out.iter().enumerate() {
                y.set(token, c, y.get(token, c) + gate * v);
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{inference_mask, ExpertMask};
    use crate::numerics::finite_difference_check_multi;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain_router(embed: Tensor) -> RouterParams {
        RouterParams::new(embed, None, None, false, GatingKind::Softmax).unwrap()
    }

    fn scores_for(hidden: Tensor, params: &RouterParams, mask: &ExpertMask) -> (Tape, Var) {
        let mut tape = Tape::new();
        let h = tape.leaf(hidden).unwrap();
        let vars = params.bind(&mut tape).unwrap();
        let s = routing_scores(&mut tape, h, params, &vars, mask).unwrap();
        (tape, s)
    }

    #[test]
    fn plain_scores_are_dot_products() {
        // h = [1, 2] against e_0 = [1, 0], e_1 = [0, 1], e_2 = [1, 1]:
        // scores [1, 2, 3].
        let params = plain_router(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        );
        let (tape, s) = scores_for(
            Tensor::row_vector(vec![1.0, 2.0]),
            &params,
            &inference_mask(3),
        );
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn normalized_scores_are_cosines_over_temperature() {
        let embed = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let params = RouterParams::new(
            embed.clone(),
            None,
            Some(Tensor::scalar(0.0)), // τ = 1
            true,
            GatingKind::Softmax,
        )
        .unwrap();
        let (tape, s) = scores_for(
            Tensor::row_vector(vec![2.0, 0.0]),
            &params,
            &inference_mask(2),
        );
        // cos(h, e_0) = 1, cos(h, e_1) = 0, τ = 1.
        assert!((tape.value(s).get(0, 0) - 1.0).abs() < 1e-9);
        assert!(tape.value(s).get(0, 1).abs() < 1e-9);

        // Halving the temperature doubles every score.
        let sharp = RouterParams::new(
            embed,
            None,
            Some(Tensor::scalar(0.5f64.ln())),
            true,
            GatingKind::Softmax,
        )
        .unwrap();
        let (tape2, s2) = scores_for(
            Tensor::row_vector(vec![2.0, 0.0]),
            &sharp,
            &inference_mask(2),
        );
        assert!((tape2.value(s2).get(0, 0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn normalized_scores_ignore_token_scale() {
        let embed = Tensor::from_rows(&[vec![0.3, -0.8], vec![-0.5, 0.2]]).unwrap();
        let params = RouterParams::new(
            embed,
            None,
            Some(Tensor::scalar(0.0)),
            true,
            GatingKind::Softmax,
        )
        .unwrap();
        let (t1, s1) = scores_for(
            Tensor::row_vector(vec![0.4, 1.1]),
            &params,
            &inference_mask(2),
        );
        let (t2, s2) = scores_for(
            Tensor::row_vector(vec![0.4 * 7.5, 1.1 * 7.5]),
            &params,
            &inference_mask(2),
        );
        for e in 0..2 {
            assert!((t1.value(s1).get(0, e) - t2.value(s2).get(0, e)).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_reduces_the_scoring_dimension() {
        // Hidden dim 3, routing dim 2 via an explicit projection.
        let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let embed = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let params =
            RouterParams::new(embed, Some(proj), None, false, GatingKind::Softmax).unwrap();
        assert_eq!(params.input_dim(), 3);
        let (tape, s) = scores_for(
            Tensor::row_vector(vec![1.0, 2.0, 3.0]),
            &params,
            &inference_mask(2),
        );
        // Projected token: [1+3, 2-3] = [4, -1]; scores against the identity
        // embeddings are just its coordinates.
        assert_eq!(tape.value(s).data(), &[4.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_frozen_case() {
        let mut tape = Tape::new();
        let s = tape
            .leaf(Tensor::row_vector(vec![0.0, 2.0f64.ln()]))
            .unwrap();
        let a = gate_values(&mut tape, s, GatingKind::Softmax).unwrap();
        // exp(0)=1, exp(ln 2)=2 → α = [1/3, 2/3].
        assert!((tape.value(a).get(0, 0) - 1.0 / 3.0).abs() <= 1e-12);
        assert!((tape.value(a).get(0, 1) - 2.0 / 3.0).abs() <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let data: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::from_vec(2, 4, data).unwrap()).unwrap();
            let a = gate_values(&mut tape, s, GatingKind::Softmax).unwrap();
            for row in 0..2 {
                let sum: f64 = tape.value(a).row(row).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_invariant_to_per_row_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let base: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shift = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = base.iter().map(|v| v + shift).collect();
            let mut tape = Tape::new();
            let s0 = tape.leaf(Tensor::row_vector(base)).unwrap();
            let s1 = tape.leaf(Tensor::row_vector(shifted)).unwrap();
            let a0 = gate_values(&mut tape, s0, GatingKind::Softmax).unwrap();
            let a1 = gate_values(&mut tape, s1, GatingKind::Softmax).unwrap();
            for e in 0..4 {
                assert!((tape.value(a0).get(0, e) - tape.value(a1).get(0, e)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_matches_the_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let a = gate_values(&mut tape, zero, GatingKind::Sigmoid).unwrap();
        assert_eq!(tape.value(a).item().unwrap(), 0.5);
        for _ in 0..100 {
            let s: f64 = rng.random_range(-20.0..20.0);
            let mut tape = Tape::new();
            let sv = tape.leaf(Tensor::scalar(s)).unwrap();
            let a = gate_values(&mut tape, sv, GatingKind::Sigmoid).unwrap();
            let want = 1.0 / (1.0 + (-s).exp());
            assert!((tape.value(a).item().unwrap() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_experts_gate_to_exact_zero_and_get_no_gradient() {
        let embed = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let params = plain_router(embed);
        let mask = ExpertMask::from_alive(vec![true, false, true]).unwrap();
        for kind in [GatingKind::Softmax, GatingKind::Sigmoid] {
            let mut tape = Tape::new();
            let h = tape
                .leaf(Tensor::from_rows(&[vec![0.3, 0.7], vec![-1.0, 0.4]]).unwrap())
                .unwrap();
            let vars = params.bind(&mut tape).unwrap();
            let s = routing_scores(&mut tape, h, &params, &vars, &mask).unwrap();
            let a = gate_values(&mut tape, s, kind).unwrap();
            for row in 0..2 {
                assert_eq!(
                    tape.value(a).get(row, 1),
                    0.0,
                    "masked gate must be exact 0"
                );
            }
            // Candidate softmax gates renormalize over survivors only.
            if kind == GatingKind::Softmax {
                for row in 0..2 {
                    let sum: f64 = tape.value(a).row(row).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
            let total = tape.sum(a).unwrap();
            let grads = tape.backward(total).unwrap();
            let ge = grads.wrt(vars.expert_embed).unwrap();
            for c in 0..2 {
                assert_eq!(
                    ge.get(1, c),
                    0.0,
                    "masked embedding row must get zero gradient"
                );
            }
            // Selection never returns the masked expert.
            let picks = top_k_select(tape.value(a), 2, &mask).unwrap();
            for row_picks in picks {
                assert!(!row_picks.contains(&1));
            }
        }
    }

    #[test]
    fn masked_softmax_equals_softmax_over_the_candidate_subset() {
        let embed = Tensor::from_rows(&[
            vec![0.4, -0.2],
            vec![1.0, 0.3],
            vec![-0.6, 0.8],
            vec![0.1, 0.1],
        ])
        .unwrap();
        let params = plain_router(embed);
        let mask = ExpertMask::from_alive(vec![true, false, true, true]).unwrap();
        let hidden = Tensor::row_vector(vec![0.9, -1.4]);
        let (tape, _) = {
            let mut tape = Tape::new();
            let h = tape.leaf(hidden.clone()).unwrap();
            let vars = params.bind(&mut tape).unwrap();
            let s = routing_scores(&mut tape, h, &params, &vars, &mask).unwrap();
            let a = gate_values(&mut tape, s, GatingKind::Softmax).unwrap();
            // Direct softmax over the three candidate dot products.
            let dots: [f64; 3] = [
                0.9 * 0.4 + -1.4 * -0.2,
                0.9 * -0.6 + -1.4 * 0.8,
                0.9 * 0.1 + -1.4 * 0.1,
            ];
            let z: f64 = dots.iter().map(|d| d.exp()).sum();
            let want = [dots[0].exp() / z, dots[1].exp() / z, dots[2].exp() / z];
            let got = tape.value(a);
            assert!((got.get(0, 0) - want[0]).abs() <= 1e-12);
            assert!((got.get(0, 2) - want[1]).abs() <= 1e-12);
            assert!((got.get(0, 3) - want[2]).abs() <= 1e-12);
            (tape, a)
        };
        drop(tape);
    }

    #[test]
    fn all_masked_rows_are_rejected() {
        // Hand in raw sentinel scores: gate_values must refuse.
        let mut tape = Tape::new();
        let s = tape
            .leaf(Tensor::row_vector(vec![MASK_SENTINEL, MASK_SENTINEL]))
            .unwrap();
        assert!(gate_values(&mut tape, s, GatingKind::Softmax).is_err());
    }

    #[test]
    fn top_k_breaks_ties_toward_the_lower_index_and_orders_by_rank() {
        let alpha = Tensor::from_rows(&[vec![0.4, 0.4, 0.2], vec![0.1, 0.5, 0.4]]).unwrap();
        let picks = top_k_select(&alpha, 1, &inference_mask(3)).unwrap();
        assert_eq!(picks, vec![vec![0], vec![1]]);
        let picks = top_k_select(&alpha, 2, &inference_mask(3)).unwrap();
        assert_eq!(picks, vec![vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn top_k_respects_the_candidate_budget() {
        let alpha = Tensor::from_rows(&[vec![0.4, 0.4, 0.2]]).unwrap();
        let mask = ExpertMask::from_alive(vec![true, false, true]).unwrap();
        assert!(top_k_select(&alpha, 3, &mask).is_err());
        assert!(top_k_select(&alpha, 0, &mask).is_err());
        let picks = top_k_select(&alpha, 2, &mask).unwrap();
        assert_eq!(picks, vec![vec![0, 2]]);
    }

    #[test]
    fn combine_outputs_weights_without_renormalizing() {
        // α = [0.2, 0.7, 0.1], K = {1, 2}: y = 0.7·E_1 + 0.1·E_2. The gates
        // sum to 0.8 and stay that way.
        let alpha = Tensor::row_vector(vec![0.2, 0.7, 0.1]);
        let outputs = vec![vec![(1usize, vec![1.0, 0.0]), (2usize, vec![0.0, 2.0])]];
        let y = combine_outputs(&outputs, &alpha, &[vec![1, 2]]).unwrap();
        assert!((y.get(0, 0) - 0.7).abs() <= 1e-12);
        assert!((y.get(0, 1) - 0.2).abs() <= 1e-12);
    }

    #[test]
    fn combine_outputs_requires_every_selected_expert() {
        let alpha = Tensor::row_vector(vec![0.2, 0.8]);
        let outputs = vec![vec![(0usize, vec![1.0])]];
        assert!(combine_outputs(&outputs, &alpha, &[vec![1]]).is_err());
        // Ragged widths are rejected.
        let ragged = vec![vec![(0usize, vec![1.0]), (1usize, vec![1.0, 2.0])]];
        assert!(combine_outputs(&ragged, &alpha, &[vec![0]]).is_err());
    }

    #[test]
    fn full_gating_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mask = inference_mask(3);
        for kind in [GatingKind::Softmax, GatingKind::Sigmoid] {
            for _ in 0..20 {
                let hidden_data: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let embed_data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let proj_data: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let weights: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..1.5)).collect();
                let hidden = Tensor::from_vec(4, 4, hidden_data).unwrap();
                let embed = Tensor::from_vec(3, 2, embed_data).unwrap();
                let proj = Tensor::from_vec(4, 2, proj_data).unwrap();
                let log_temp = Tensor::scalar(rng.random_range(-0.3..0.3));
                let w = Tensor::from_vec(4, 3, weights).unwrap();
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
                        let s = routing_scores(tape, leaves[0], &params, &vars, &mask)?;
                        let a = gate_values(tape, s, kind)?;
                        let wc = tape.constant(w.clone())?;
                        let p = tape.mul(a, wc)?;
                        tape.sum(p)
                    },
                    &[hidden, embed, proj, log_temp],
                )
                .unwrap();
                assert!(err < 1e-4, "gating stack FD err {err} ({kind:?})");
            }
        }
    }

    #[test]
    fn router_params_validate_their_shapes() {
        let embed = Tensor::zeros(2, 3);
        // Projection output dim must match the embedding dim.
        assert!(RouterParams::new(
            embed.clone(),
            Some(Tensor::zeros(4, 2)),
            None,
            false,
            GatingKind::Softmax
        )
        .is_err());
        // Temperature and normalize must agree.
        assert!(RouterParams::new(embed.clone(), None, None, true, GatingKind::Softmax).is_err());
        assert!(RouterParams::new(
            embed,
            None,
            Some(Tensor::scalar(0.0)),
            false,
            GatingKind::Softmax
        )
        .is_err());
    }
}
