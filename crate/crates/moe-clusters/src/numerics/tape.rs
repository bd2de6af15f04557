//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every tensor operation as a node in evaluation order;
//! [`Tape::backward`] replays the record once, in reverse, accumulating
//! gradients of a scalar root with respect to every recorded node. Handles
//! ([`Var`]) are plain indices into the tape, so they are `Copy` and cheap to
//! pass around, but they are only meaningful on the tape that produced them.
//!
//! Design constraints the rules below encode:
//!
//! * every operation validates shapes up front and checks that its output is
//!   finite, so a NaN/inf surfaces at the op that produced it rather than as
//!   a corrupted loss many steps later;
//! * subgradients at kinks are deterministic: `relu` uses 0 at the origin and
//!   `row_max` routes the full gradient to the lowest-index argmax on ties;
//! * [`Tape::stop_grad`] is an identity in the forward pass that blocks the
//!   backward pass, which is how hard token counts enter losses as data.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Index of the node on its tape (stable for the tape's lifetime).
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation, holding whatever the backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    /// Trainable input (parameters).
    Leaf,
    /// Non-trainable input (data, masks, fixed coefficients).
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    /// Per-row maximum; `argmax[r]` is the lowest column index attaining it.
    RowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Repeat a T×1 column across `cols` columns.
    BroadcastCols(Var),
    /// Repeat a 1×N row across `rows` rows.
    BroadcastRows(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    /// Rows of `x` added into a zero R×C output at positions `idx`
    /// (duplicate targets accumulate).
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    /// Pick one entry per row: `out[r, 0] = x[r, idx[r]]`.
    SelectPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    /// Identity forward, no gradient backward. The input handle is never
    /// read again (backward skips the node entirely); it is kept so tape
    /// dumps show where the frozen value came from.
    StopGrad(#[allow(dead_code)] Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar root with respect to every tape node.
///
/// Nodes the root does not depend on have no gradient entry; [`Gradients::dense`]
/// substitutes zeros of the node's shape for those.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, if the root depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, densified to zeros when absent.
    pub fn dense(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// A Wengert tape: append-only list of evaluated ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::contract(
                op,
                "produced a non-finite value (NaN or ±inf)".to_string(),
            ));
        }
        self.nodes.push(Node { value, op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Registers a non-trainable input (data, index masks, coefficients).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    /// Matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a))
    }

    /// Entry-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b))
    }

    /// Entry-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    /// Entry-wise quotient. Zero denominators surface as the non-finite
    /// output check.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push("div", value, Op::Div(a, b))
    }

    /// Adds a compile-time constant to every entry.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    /// Scales every entry by a constant.
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("mul_scalar", value, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a))
    }

    /// Natural log; requires strictly positive input.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("ln", "input must be strictly positive"));
        }
        let value = self.value(a).map(f64::ln);
        self.push("ln", value, Op::Ln(a))
    }

    /// Square root; requires strictly positive input so the backward pass
    /// (1 / (2·√x)) stays finite.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("sqrt", "input must be strictly positive"));
        }
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a))
    }

    /// Rectifier; the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a))
    }

    /// Mean of all entries, as a 1×1 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean", "mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(a))
    }

    /// Per-row sum: R×C → R×1.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            out.set(r, 0, t.row(r).iter().sum());
        }
        self.push("row_sum", out, Op::RowSum(a))
    }

    /// Per-row maximum: R×C → R×1. On ties the gradient flows to the
    /// lowest column index.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::contract("row_max", "rows must be non-empty"));
        }
        let mut out = Tensor::zeros(t.rows(), 1);
        let mut argmax = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                // Strict `>` keeps the first (lowest-index) maximum on ties.
                if v > row[best] {
                    best = c;
                }
            }
            out.set(r, 0, row[best]);
            argmax.push(best);
        }
        self.push("row_max", out, Op::RowMax { x: a, argmax })
    }

    /// Repeats an R×1 column `cols` times: R×1 → R×cols.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 {
            return Err(Error::dim(
                "broadcast_cols",
                format!("expected a column vector, got {}x{}", t.rows(), t.cols()),
            ));
        }
        let mut out = Tensor::zeros(t.rows(), cols);
        for r in 0..t.rows() {
            let v = t.get(r, 0);
            for c in 0..cols {
                out.set(r, c, v);
            }
        }
        self.push("broadcast_cols", out, Op::BroadcastCols(a))
    }

    /// Repeats a 1×C row `rows` times: 1×C → rows×C.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(Error::dim(
                "broadcast_rows",
                format!("expected a row vector, got {}x{}", t.rows(), t.cols()),
            ));
        }
        let mut out = Tensor::zeros(rows, t.cols());
        for r in 0..rows {
            for c in 0..t.cols() {
                out.set(r, c, t.get(0, c));
            }
        }
        self.push("broadcast_rows", out, Op::BroadcastRows(a))
    }

    /// Selects rows by index (duplicates allowed): R×C → len(idx)×C.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(
                "gather_rows",
                format!("row index {bad} out of range for {} rows", t.rows()),
            ));
        }
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..t.cols() {
                out.set(k, c, t.get(i, c));
            }
        }
        self.push("gather_rows", out, Op::GatherRows { x: a, idx })
    }

    /// Adds the rows of a K×C input into a zero `rows`×C output at positions
    /// `idx` (duplicate targets accumulate).
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} indices for {} input rows", idx.len(), t.rows()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(
                "scatter_rows",
                format!("target row {bad} out of range for {rows} rows"),
            ));
        }
        let mut out = Tensor::zeros(rows, t.cols());
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..t.cols() {
                out.set(i, c, out.get(i, c) + t.get(k, c));
            }
        }
        self.push("scatter_rows", out, Op::ScatterRows { x: a, idx })
    }

    /// Selects columns by index (duplicates allowed): R×C → R×len(idx).
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.cols()) {
            return Err(Error::contract(
                "gather_cols",
                format!("column index {bad} out of range for {} columns", t.cols()),
            ));
        }
        let mut out = Tensor::zeros(t.rows(), idx.len());
        for r in 0..t.rows() {
            for (k, &c) in idx.iter().enumerate() {
                out.set(r, k, t.get(r, c));
            }
        }
        self.push("gather_cols", out, Op::GatherCols { x: a, idx })
    }

    /// Picks one entry per row: `out[r, 0] = x[r, idx[r]]`. R×C → R×1.
    pub fn select_per_row(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() {
            return Err(Error::dim(
                "select_per_row",
                format!("{} indices for {} rows", idx.len(), t.rows()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= t.cols()) {
            return Err(Error::contract(
                "select_per_row",
                format!("column index {bad} out of range for {} columns", t.cols()),
            ));
        }
        let mut out = Tensor::zeros(t.rows(), 1);
        for (r, &c) in idx.iter().enumerate() {
            out.set(r, 0, t.get(r, c));
        }
        self.push("select_per_row", out, Op::SelectPerRow { x: a, idx })
    }

    /// Row-major reshape; total size must be preserved.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(Error::dim(
                "reshape",
                format!(
                    "cannot reshape {}x{} into {rows}x{cols}",
                    t.rows(),
                    t.cols()
                ),
            ));
        }
        let value = Tensor::from_vec(rows, cols, t.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward
    /// pass. Used to feed measured quantities (token counts) into losses as
    /// plain data.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push("stop_grad", value, Op::StopGrad(a))
    }

    /// Reverse pass from a scalar root: visits every node at most once, in
    /// reverse recording order, and accumulates gradients into its inputs.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::contract(
                "backward",
                format!("root must be a 1x1 scalar, got {r}x{c}"),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.map(|x| -x))?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gi, bi| gi * bi)?;
                    let db = g.zip_map(self.value(*a), |gi, ai| gi * ai)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = g.zip_map(bv, |gi, bi| gi / bi)?;
                    // d(a/b)/db = -a / b², written via the output a/b.
                    let quotient = &self.nodes[i].value;
                    let db = g
                        .zip_map(quotient, |gi, qi| gi * qi)?
                        .zip_map(bv, |x, bi| -x / bi)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g)?,
                Op::MulScalar(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c))?,
                Op::Exp(a) => {
                    let da = g.zip_map(&self.nodes[i].value, |gi, yi| gi * yi)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Ln(a) => {
                    let da = g.zip_map(self.value(*a), |gi, xi| gi / xi)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sqrt(a) => {
                    let da = g.zip_map(&self.nodes[i].value, |gi, yi| gi / (2.0 * yi))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()?))?;
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let v = g.item()? / (r * c) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(r, c, v))?;
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            da.set(rr, cc, g.get(rr, 0));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::RowMax { x, argmax } => {
                    let (r, c) = self.shape(*x);
                    let mut da = Tensor::zeros(r, c);
                    for (rr, &am) in argmax.iter().enumerate() {
                        da.set(rr, am, g.get(rr, 0));
                    }
                    accumulate(&mut grads, *x, da)?;
                }
                Op::BroadcastCols(a) => {
                    let (r, _) = self.shape(*a);
                    let mut da = Tensor::zeros(r, 1);
                    for rr in 0..r {
                        da.set(rr, 0, g.row(rr).iter().sum());
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::BroadcastRows(a) => {
                    let (_, c) = self.shape(*a);
                    let mut da = Tensor::zeros(1, c);
                    for rr in 0..g.rows() {
                        for cc in 0..c {
                            da.set(0, cc, da.get(0, cc) + g.get(rr, cc));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::GatherRows { x, idx } => {
                    let (r, c) = self.shape(*x);
                    let mut da = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for cc in 0..c {
                            da.set(i, cc, da.get(i, cc) + g.get(k, cc));
                        }
                    }
                    accumulate(&mut grads, *x, da)?;
                }
                Op::ScatterRows { x, idx } => {
                    let (r, c) = self.shape(*x);
                    let mut da = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for cc in 0..c {
                            da.set(k, cc, g.get(i, cc));
                        }
                    }
                    accumulate(&mut grads, *x, da)?;
                }
                Op::GatherCols { x, idx } => {
                    let (r, c) = self.shape(*x);
                    let mut da = Tensor::zeros(r, c);
                    for rr in 0..r {
                        for (k, &cc) in idx.iter().enumerate() {
                            da.set(rr, cc, da.get(rr, cc) + g.get(rr, k));
                        }
                    }
                    accumulate(&mut grads, *x, da)?;
                }
                Op::SelectPerRow { x, idx } => {
                    let (r, c) = self.shape(*x);
                    let mut da = Tensor::zeros(r, c);
                    for (rr, &cc) in idx.iter().enumerate() {
                        da.set(rr, cc, g.get(rr, 0));
                    }
                    accumulate(&mut grads, *x, da)?;
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    let da = Tensor::from_vec(r, c, g.data().to_vec())?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::StopGrad(_) => {}
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(t) => t.axpy(1.0, &delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}
