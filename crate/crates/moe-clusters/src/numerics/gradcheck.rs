//! Central finite-difference gradient checking.
//!
//! The checker treats the tape's backward pass as the thing under test and an
//! independent two-sided difference quotient as ground truth: for a scalar
//! function `f` it perturbs one coordinate at a time by ±[`FD_STEP`] and
//! compares `(f(x+h) - f(x-h)) / 2h` against the analytic gradient. The
//! reported figure is the worst relative error over all coordinates, with the
//! denominator floored at 1 so that near-zero gradients are compared
//! absolutely:
//!
//! ```text
//! rel_err = |analytic - numeric| / max(1, |numeric|)
//! ```
//!
//! Checks pass at [`GRAD_TOL`]. Callers are responsible for choosing
//! evaluation points away from kinks (relu origins, argmax ties): a central
//! difference straddling a kink measures the average of two one-sided slopes,
//! not the subgradient the tape deliberately picks.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Perturbation used by the central difference quotient.
pub const FD_STEP: f64 = 1e-6;

/// Acceptance threshold for the worst-coordinate relative error.
pub const GRAD_TOL: f64 = 1e-4;

/// Checks the gradient of `f` with respect to every entry of every input
/// tensor and returns the worst relative error.
///
/// `f` must build a 1×1 scalar on the tape from leaves bound to `points`, and
/// must be a pure function of those values: it is re-evaluated
/// `2 × (total entries)` times at perturbed inputs.
pub fn finite_difference_check_multi<F>(f: F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(points.len());
    for p in points {
        vars.push(tape.leaf(p.clone())?);
    }
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.dense(v)).collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(pts.len());
        for p in pts {
            vars.push(tape.leaf(p.clone())?);
        }
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for pi in 0..points.len() {
        for k in 0..points[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (analytic[pi].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-vector form of [`finite_difference_check_multi`]: `f` receives one
/// 1×n leaf holding `point`.
pub fn finite_difference_check<F>(f: F, point: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let t = Tensor::row_vector(point.to_vec());
    finite_difference_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(&t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Points per primitive in the sweep tests.
    const POINTS: usize = 100;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Random tensor whose entries all satisfy |x| ≥ margin (for relu and
    /// denominators, where a perturbation must not cross zero).
    fn random_tensor_away_from_zero(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        margin: f64,
    ) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let mag = rng.random_range(margin..2.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Contracts a tensor-valued node to a scalar through fixed random
    /// weights, so upstream gradients are non-uniform.
    fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
        let w = tape.constant(weights.clone())?;
        let p = tape.mul(x, w)?;
        tape.sum(p)
    }

    fn weights_for(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        random_tensor_away_from_zero(rng, rows, cols, 0.5)
    }

    #[test]
    fn checker_reports_near_zero_error_on_smooth_frozen_case() {
        // f(x) = Σ x² at x = [3, -1]: analytic [6, -2] matches the quotient
        // to O(h²).
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &[3.0, -1.0],
        )
        .unwrap();
        assert!(err < 1e-9, "smooth case should check out, got {err}");
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        // f(x) = Σ stop(x)·x has true derivative 2x but analytic derivative x
        // (stop_grad blocks one path), so the checker must report ~0.5, not
        // pass. This is the liveness proof for the checker itself.
        let err = finite_difference_check(
            |tape, x| {
                let frozen = tape.stop_grad(x)?;
                let p = tape.mul(frozen, x)?;
                tape.sum(p)
            },
            &[3.0],
        )
        .unwrap();
        assert!(
            (err - 0.5).abs() < 1e-6,
            "expected rel err ≈ 0.5, got {err}"
        );
    }

    #[test]
    fn fd_sweep_arithmetic_ops() {
        let mut r = rng(101);
        for _ in 0..POINTS {
            let a = random_tensor(&mut r, 2, 3, -2.0, 2.0);
            let b = random_tensor_away_from_zero(&mut r, 2, 3, 0.5);
            let w = weights_for(&mut r, 2, 3);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let s = tape.add(vars[0], vars[1])?;
                    let d = tape.sub(vars[0], vars[1])?;
                    let m = tape.mul(vars[0], vars[1])?;
                    let q = tape.div(vars[0], vars[1])?;
                    let sm = tape.add(s, d)?;
                    let mq = tape.add(m, q)?;
                    let all = tape.add(sm, mq)?;
                    weighted_sum(tape, all, &w)
                },
                &[a, b],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "arithmetic rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_scalar_ops() {
        let mut r = rng(102);
        for _ in 0..POINTS {
            let a = random_tensor(&mut r, 2, 3, -2.0, 2.0);
            let w = weights_for(&mut r, 2, 3);
            let c = r.random_range(-1.5..1.5);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let shifted = tape.add_scalar(vars[0], c)?;
                    let scaled = tape.mul_scalar(shifted, 1.7)?;
                    weighted_sum(tape, scaled, &w)
                },
                &[a],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "scalar-op rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_matmul_transpose_reshape() {
        let mut r = rng(103);
        for _ in 0..POINTS {
            let a = random_tensor(&mut r, 2, 3, -1.5, 1.5);
            let b = random_tensor(&mut r, 3, 2, -1.5, 1.5);
            let w = weights_for(&mut r, 1, 4);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let p = tape.matmul(vars[0], vars[1])?; // 2×2
                    let pt = tape.transpose(p)?;
                    let flat = tape.reshape(pt, 1, 4)?;
                    weighted_sum(tape, flat, &w)
                },
                &[a, b],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "matmul rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_exp_ln_sqrt() {
        let mut r = rng(104);
        for _ in 0..POINTS {
            let a = random_tensor(&mut r, 2, 3, 0.2, 3.0); // positive domain
            let w = weights_for(&mut r, 2, 3);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let e = tape.exp(vars[0])?;
                    let l = tape.ln(vars[0])?;
                    let s = tape.sqrt(vars[0])?;
                    let el = tape.add(e, l)?;
                    let all = tape.add(el, s)?;
                    weighted_sum(tape, all, &w)
                },
                &[a],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "exp/ln/sqrt rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_relu_away_from_kink() {
        let mut r = rng(105);
        for _ in 0..POINTS {
            // Entries at least 1e-3 from the origin: the ±1e-6 probe must not
            // cross the kink.
            let a = random_tensor_away_from_zero(&mut r, 2, 4, 1e-3);
            let w = weights_for(&mut r, 2, 4);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let y = tape.relu(vars[0])?;
                    weighted_sum(tape, y, &w)
                },
                &[a],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "relu rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_reductions() {
        let mut r = rng(106);
        for _ in 0..POINTS {
            let a = random_tensor(&mut r, 3, 4, -2.0, 2.0);
            let w = weights_for(&mut r, 3, 1);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let s = tape.sum(vars[0])?;
                    let m = tape.mean(vars[0])?;
                    let rs = tape.row_sum(vars[0])?; // 3×1
                    let rsw = weighted_sum(tape, rs, &w)?;
                    let sm = tape.add(s, m)?;
                    tape.add(sm, rsw)
                },
                &[a],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "reduction rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_row_max_with_clear_gaps() {
        let mut r = rng(107);
        let mut done = 0;
        while done < POINTS {
            let a = random_tensor(&mut r, 3, 5, -2.0, 2.0);
            // Skip draws where the top two entries of any row are closer than
            // the probe can safely straddle.
            let ambiguous = (0..3).any(|row| {
                let mut vals: Vec<f64> = a.row(row).to_vec();
                vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
                vals[0] - vals[1] < 1e-4
            });
            if ambiguous {
                continue;
            }
            let w = weights_for(&mut r, 3, 1);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let m = tape.row_max(vars[0])?;
                    weighted_sum(tape, m, &w)
                },
                &[a],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "row_max rel err {err}");
            done += 1;
        }
    }

    #[test]
    fn fd_sweep_broadcasts() {
        let mut r = rng(108);
        for _ in 0..POINTS {
            let col = random_tensor(&mut r, 3, 1, -2.0, 2.0);
            let row = random_tensor(&mut r, 1, 4, -2.0, 2.0);
            let w = weights_for(&mut r, 3, 4);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let c = tape.broadcast_cols(vars[0], 4)?; // 3×4
                    let rr = tape.broadcast_rows(vars[1], 3)?; // 3×4
                    let p = tape.mul(c, rr)?;
                    weighted_sum(tape, p, &w)
                },
                &[col, row],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "broadcast rel err {err}");
        }
    }

    #[test]
    fn fd_sweep_gather_scatter_select() {
        let mut r = rng(109);
        for _ in 0..POINTS {
            let a = random_tensor(&mut r, 4, 3, -2.0, 2.0);
            let gather_idx: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
            let scatter_idx: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
            let col_idx: Vec<usize> = (0..2).map(|_| r.random_range(0..3)).collect();
            let sel_idx: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
            let w_scat = weights_for(&mut r, 6, 3);
            let w_cols = weights_for(&mut r, 4, 2);
            let w_sel = weights_for(&mut r, 4, 1);
            let err = finite_difference_check_multi(
                |tape, vars| {
                    let g = tape.gather_rows(vars[0], gather_idx.clone())?; // 5×3
                    let s = tape.scatter_rows(g, scatter_idx.clone(), 6)?; // 6×3
                    let c = tape.gather_cols(vars[0], col_idx.clone())?; // 4×2
                    let sel = tape.select_per_row(vars[0], sel_idx.clone())?; // 4×1
                    let t1 = weighted_sum(tape, s, &w_scat)?;
                    let t2 = weighted_sum(tape, c, &w_cols)?;
                    let t3 = weighted_sum(tape, sel, &w_sel)?;
                    let t12 = tape.add(t1, t2)?;
                    tape.add(t12, t3)
                },
                &[a],
            )
            .unwrap();
            assert!(err < GRAD_TOL, "gather/scatter/select rel err {err}");
        }
    }
}
