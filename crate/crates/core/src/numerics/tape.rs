//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! Every value on the tape is a row-major `[rows, cols]` matrix; vectors are
//! `[1, n]` rows and scalars are `[1, 1]`. A [`Graph`] records operations as
//! they are evaluated and [`Graph::backward`] walks the record in reverse.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::cell::Cell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const PROB_CLAMP: f64 = 1e-9;

thread_local! {
    static CORRUPT_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while enabled, the sigmoid backward rule on this thread is
/// deliberately wrong. Used as the negative control of gradient checking.
#[doc(hidden)]
pub fn set_backward_fault(enabled: bool) {
    CORRUPT_BACKWARD.with(|c| c.set(enabled));
}

fn backward_fault() -> bool {
    CORRUPT_BACKWARD.with(Cell::get)
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, F),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    PoolRows(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout(Var, Vec<F>),
    Sum(Var),
    BceLogits {
        logits: Var,
        target: Vec<F>,
    },
    SentenceLoss {
        logits: Var,
        targets: Vec<usize>,
        candidates: Vec<Vec<usize>>,
        smoothing: F,
    },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    /// `None` for parameter nodes, whose data lives in the store.
    data: Option<Vec<F>>,
    op: Op<F>,
}

/// Per-row breakdown of the sentence objective, in log-probability space.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SentenceTerms {
    /// Label-smoothed negative log-likelihood averaged over positions.
    pub nll: f64,
    /// Sum of `-log(1 - p(c))` over every position's candidate set.
    pub unlikelihood: f64,
    /// Candidate probabilities clamped to `1 - 1e-9`.
    pub clamped: usize,
}

/// Computation tape.
pub struct Graph<'p, F: Real> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<usize, Var>,
    training: bool,
    dropout: f64,
    rng: ChaCha8Rng,
    clamped: usize,
}

impl<F: Real> Graph<'static, F> {
    /// A tape without parameters.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            training: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            clamped: 0,
        }
    }
}

impl<'p, F: Real> Graph<'p, F> {
    /// Evaluation-mode tape over `store` (dropout disabled).
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::with_capacity(1024),
            param_nodes: HashMap::new(),
            training: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            clamped: 0,
        }
    }

    /// Training-mode tape: dropout masks drawn from a generator seeded with `seed`.
    pub fn training(store: &'p ParamStore<F>, dropout: f64, seed: u64) -> Self {
        let mut g = Self::new(store);
        g.training = dropout > 0.0;
        g.dropout = dropout;
        g.rng = ChaCha8Rng::seed_from_u64(seed);
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of candidate probabilities clamped by sentence losses on this tape.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[F] {
        let node = &self.nodes[v.0];
        match (&node.data, &node.op) {
            (Some(d), _) => d,
            (None, Op::Param(id)) => self.store.expect("param node without store").get(ParamId(*id)).data(),
            _ => unreachable!("node without data"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    fn push(&mut self, op: &'static str, rows: usize, cols: usize, data: Vec<F>, record: Op<F>) -> Result<Var> {
        debug_assert_eq!(rows * cols, data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        self.nodes.push(Node {
            rows,
            cols,
            data: Some(data),
            op: record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        Error::Shape {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    /// Constant input. Gradients flow into it but are not reported.
    pub fn constant(&mut self, t: &Tensor<F>) -> Result<Var> {
        let (r, c) = (t.rows(), t.cols());
        self.push("constant", r, c, t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        self.push("constant", rows, cols, data, Op::Leaf)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let (r, c) = self.shape(v);
        let data = self.value(v).to_vec();
        self.push("detach", r, c, data, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id.0) {
            return v;
        }
        let t = self.store.expect("graph has no parameter store").get(id);
        let (rows, cols) = (t.rows(), t.cols());
        self.nodes.push(Node {
            rows,
            cols,
            data: None,
            op: Op::Param(id.0),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id.0, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a), k as isize, 1, self.value(b), n as isize, 1, &mut out, false);
        self.push("matmul", m, n, out, Op::MatMul(a, b))
    }

    /// `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a), k as isize, 1, self.value(b), 1, k as isize, &mut out, false);
        self.push("matmul_nt", m, n, out, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", c, r, out, Op::Transpose(a))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push("add", r, c, out, Op::Add(a, b))
    }

    /// Adds the `[1, n]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(self.shape_err("add_row", a, b));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x + *y))
            .collect();
        self.push("add_row", r, c, out, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        self.push("mul", r, c, out, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `[1, n]` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(self.shape_err("mul_row", a, b));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x * *y))
            .collect();
        self.push("mul_row", r, c, out, Op::MulRow(a, b))
    }

    /// Scales row `t` of `a` by `s[t]`, where `s` is a `[rows, 1]` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(s) != (r, 1) {
            return Err(self.shape_err("scale_rows", a, s));
        }
        let sv = self.value(s);
        let out = self
            .value(a)
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, k)| row.iter().map(move |x| *x * *k))
            .collect();
        self.push("scale_rows", r, c, out, Op::ScaleRows(a, s))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| *x * scale + shift).collect();
        self.push("affine", r, c, out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        self.affine(a, s, F::zero())
    }

    // ---- structure ------------------------------------------------------

    /// Concatenation along the last axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[r * pc..(r + 1) * pc]);
            }
        }
        self.push("concat_cols", rows, cols, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Concatenation along the first axis; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", rows, cols, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.push("slice_cols", r, w, out, Op::SliceCols(a, start))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        self.push("slice_rows", end - start, c, out, Op::SliceRows(a, start))
    }

    /// Averages consecutive groups of `stride` rows; the last group may be short.
    pub fn pool_rows(&mut self, a: Var, stride: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if stride == 0 {
            return Err(Error::invalid("pool stride must be positive"));
        }
        let groups = r.div_ceil(stride);
        let src = self.value(a);
        let mut out = vec![F::zero(); groups * c];
        for g in 0..groups {
            let lo = g * stride;
            let hi = (lo + stride).min(r);
            let inv = F::one() / F::from_usize(hi - lo).unwrap();
            for row in lo..hi {
                for j in 0..c {
                    out[g * c + j] = out[g * c + j] + src[row * c + j] * inv;
                }
            }
        }
        self.push("pool_rows", groups, c, out, Op::PoolRows(a, stride))
    }

    /// Mean over the row (frame) axis: `[T, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).0;
        self.pool_rows(a, r)
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", r, c, out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push("tanh", r, c, out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        self.push("gelu", r, c, out, Op::Gelu(a))
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns
    /// `j <= i + (cols - rows)`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.shape(a);
        if causal && c < r {
            return Err(Error::Shape {
                op: "causal softmax",
                lhs: vec![r, c],
                rhs: vec![],
            });
        }
        let src = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let visible = if causal { i + 1 + (c - r) } else { c };
            let row = &src[i * c..i * c + visible];
            softmax_into(row, &mut out[i * c..i * c + visible]);
        }
        self.push("softmax", r, c, out, Op::Softmax(a))
    }

    /// Row-wise layer normalization with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if self.shape(beta) != (1, c) {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let eps = F::from_f64_lossy(LN_EPS);
        let n = F::from_usize(c).unwrap();
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows of `table` (`[vocab, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup of no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let src = self.value(table);
        let out = ids.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        self.push(
            "embedding",
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, a: Var) -> Result<Var> {
        if !self.training || self.dropout <= 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - self.dropout;
        let scale = F::from_f64_lossy(1.0 / keep);
        let mask: Vec<F> = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { F::zero() })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        self.push("dropout", r, c, out, Op::Dropout(a, mask))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push("sum", 1, 1, vec![s], Op::Sum(a))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[F]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if target.len() != r * c {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: vec![r, c],
                rhs: vec![target.len()],
            });
        }
        let n = F::from_usize(r * c).unwrap();
        let loss = self
            .value(logits)
            .iter()
            .zip(target)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<F>()
            / n;
        self.push(
            "bce_with_logits",
            1,
            1,
            vec![loss],
            Op::BceLogits {
                logits,
                target: target.to_vec(),
            },
        )
    }

    /// Sentence objective on `[J, V]` next-token logits: label-smoothed
    /// negative log-likelihood averaged over the `J` positions plus the
    /// unlikelihood penalty `sum_j sum_{c in candidates[j]} -log(1 - p_j(c))`.
    pub fn sentence_loss(
        &mut self,
        logits: Var,
        targets: &[usize],
        candidates: &[Vec<usize>],
        smoothing: F,
    ) -> Result<Var> {
        let (j, v) = self.shape(logits);
        if targets.len() != j || candidates.len() != j {
            return Err(Error::Shape {
                op: "sentence_loss",
                lhs: vec![j, v],
                rhs: vec![targets.len(), candidates.len()],
            });
        }
        if targets.iter().chain(candidates.iter().flatten()).any(|&t| t >= v) {
            return Err(Error::invalid("sentence_loss token id outside vocabulary"));
        }
        let log_probs = log_softmax_rows(self.value(logits), v);
        let terms = sentence_terms(&log_probs, v, targets, candidates, smoothing.to_f64_lossy());
        self.clamped += terms.clamped;
        let total = F::from_f64_lossy(terms.nll + terms.unlikelihood);
        self.push(
            "sentence_loss",
            1,
            1,
            vec![total],
            Op::SentenceLoss {
                logits,
                targets: targets.to_vec(),
                candidates: candidates.to_vec(),
                smoothing,
            },
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse pass from the scalar `loss`, returning gradients for every
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: vec![r, c],
                rhs: vec![1, 1],
            });
        }
        let fault = backward_fault();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut by_param: Vec<Option<Vec<F>>> = vec![None; self.store.map_or(0, ParamStore::len)];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            let out = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    by_param[*id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, &g, n as isize, 1, self.value(*b), 1, n as isize, &mut da, false);
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, self.value(*a), 1, k as isize, &g, n as isize, 1, &mut db, false);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, &g, n as isize, 1, self.value(*b), k as isize, 1, &mut da, false);
                    let mut db = vec![F::zero(); n * k];
                    F::gemm(n, m, k, &g, 1, n as isize, self.value(*a), k as isize, 1, &mut db, false);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let mut da = vec![F::zero(); rows * cols];
                    // out is [rows, cols]; input is [cols, rows]
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] = g[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = vec![F::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d = *d + *x;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.iter().zip(bv).map(|(x, y)| *x * *y).collect();
                    let db = g.iter().zip(av).map(|(x, y)| *x * *y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![F::zero(); rows * cols];
                    let mut db = vec![F::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let k = i * cols + j;
                            da[k] = g[k] * bv[j];
                            db[j] = db[j] + g[k] * av[k];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ScaleRows(a, s) => {
                    let (av, sv) = (self.value(*a), self.value(*s));
                    let mut da = vec![F::zero(); rows * cols];
                    let mut ds = vec![F::zero(); rows];
                    for i in 0..rows {
                        for j in 0..cols {
                            let k = i * cols + j;
                            da[k] = g[k] * sv[i];
                            ds[i] = ds[i] + g[k] * av[k];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *s, ds);
                }
                Op::Affine(a, s) => {
                    let da = g.iter().map(|x| *x * *s).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let mut dp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                        }
                        offset += pc;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.shape(p).0 * cols;
                        accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let mut da = vec![F::zero(); ar * ac];
                    for r in 0..rows {
                        da[r * ac + start..r * ac + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let mut da = vec![F::zero(); ar * ac];
                    da[start * ac..start * ac + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::PoolRows(a, stride) => {
                    let (ar, ac) = self.shape(*a);
                    let mut da = vec![F::zero(); ar * ac];
                    for grp in 0..rows {
                        let lo = grp * stride;
                        let hi = (lo + stride).min(ar);
                        let inv = F::one() / F::from_usize(hi - lo).unwrap();
                        for r in lo..hi {
                            for j in 0..ac {
                                da[r * ac + j] = g[grp * ac + j] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g
                        .iter()
                        .zip(out)
                        .map(|(d, y)| {
                            let local = *y * (F::one() - *y);
                            if fault {
                                *d * local * F::from_f64_lossy(1.1)
                            } else {
                                *d * local
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.iter().zip(out).map(|(d, y)| *d * (F::one() - *y * *y)).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(d, x)| *d * gelu(*x).1)
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let mut da = vec![F::zero(); rows * cols];
                    for i in 0..rows {
                        let y = &out[i * cols..(i + 1) * cols];
                        let dy = &g[i * cols..(i + 1) * cols];
                        let dot: F = y.iter().zip(dy).map(|(p, q)| *p * *q).sum();
                        for j in 0..cols {
                            da[i * cols + j] = y[j] * (dy[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = F::from_usize(cols).unwrap();
                    let mut dx = vec![F::zero(); rows * cols];
                    let mut dg = vec![F::zero(); cols];
                    let mut db = vec![F::zero(); cols];
                    for i in 0..rows {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..cols {
                            let k = i * cols + j;
                            dg[j] = dg[j] + g[k] * xhat[k];
                            db[j] = db[j] + g[k];
                            let dh = g[k] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[k];
                        }
                        for j in 0..cols {
                            let k = i * cols + j;
                            let dh = g[k] * gv[j];
                            dx[k] = inv_std[i] / n * (n * dh - sum_dh - xhat[k] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Embedding { table, ids } => {
                    let (v, d) = self.shape(*table);
                    let mut dt = vec![F::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Dropout(a, mask) => {
                    let da = g.iter().zip(mask).map(|(d, m)| *d * *m).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.shape(*a);
                    accumulate(&mut grads, *a, vec![g[0]; ar * ac]);
                }
                Op::BceLogits { logits, target } => {
                    let n = F::from_usize(target.len()).unwrap();
                    let scale = g[0] / n;
                    let da = self
                        .value(*logits)
                        .iter()
                        .zip(target)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    accumulate(&mut grads, *logits, da);
                }
                Op::SentenceLoss {
                    logits,
                    targets,
                    candidates,
                    smoothing,
                } => {
                    let (j, v) = self.shape(*logits);
                    let log_probs = log_softmax_rows(self.value(*logits), v);
                    let da = sentence_grad(&log_probs, v, targets, candidates, *smoothing, g[0]);
                    debug_assert_eq!(da.len(), j * v);
                    accumulate(&mut grads, *logits, da);
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, d: Vec<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(a, b)| *a = *a + *b),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// GELU value and derivative (tanh approximation).
fn gelu<F: Real>(x: F) -> (F, F) {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (F::one() + t);
    let deriv = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
    (value, deriv)
}

fn softmax_into<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Row-wise log-softmax in `f64`.
pub(crate) fn log_softmax_rows<F: Real>(logits: &[F], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v.to_f64_lossy() - lse));
    }
    out
}

/// Smoothed target mass for token `v` at a position whose gold token is `gold`.
pub(crate) fn smoothed_target(v: usize, gold: usize, vocab: usize, eps: f64) -> f64 {
    if vocab == 1 {
        return 1.0;
    }
    if v == gold {
        1.0 - eps
    } else {
        eps / (vocab - 1) as f64
    }
}

/// Evaluates both sentence-objective terms from row-wise log-probabilities.
pub(crate) fn sentence_terms(
    log_probs: &[f64],
    vocab: usize,
    targets: &[usize],
    candidates: &[Vec<usize>],
    eps: f64,
) -> SentenceTerms {
    let positions = targets.len();
    let mut terms = SentenceTerms::default();
    if positions == 0 {
        return terms;
    }
    for (j, (&gold, cands)) in targets.iter().zip(candidates).enumerate() {
        let row = &log_probs[j * vocab..(j + 1) * vocab];
        let mut nll = 0.0;
        for (v, &lp) in row.iter().enumerate() {
            let q = smoothed_target(v, gold, vocab, eps);
            if q > 0.0 {
                nll -= q * lp;
            }
        }
        terms.nll += nll / positions as f64;
        for &c in cands {
            let p = row[c].exp();
            let p = if p > 1.0 - PROB_CLAMP {
                terms.clamped += 1;
                1.0 - PROB_CLAMP
            } else {
                p
            };
            terms.unlikelihood -= (1.0 - p).ln();
        }
    }
    terms
}

fn sentence_grad<F: Real>(
    log_probs: &[f64],
    vocab: usize,
    targets: &[usize],
    candidates: &[Vec<usize>],
    eps: F,
    upstream: F,
) -> Vec<F> {
    let positions = targets.len() as f64;
    let eps = eps.to_f64_lossy();
    let up = upstream.to_f64_lossy();
    let mut out = Vec::with_capacity(log_probs.len());
    for (j, (&gold, cands)) in targets.iter().zip(candidates).enumerate() {
        let p: Vec<f64> = log_probs[j * vocab..(j + 1) * vocab].iter().map(|lp| lp.exp()).collect();
        let mut d: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(v, pv)| (pv - smoothed_target(v, gold, vocab, eps)) / positions)
            .collect();
        for &c in cands {
            if p[c] > 1.0 - PROB_CLAMP {
                continue;
            }
            let w = p[c] / (1.0 - p[c]);
            for (v, dv) in d.iter_mut().enumerate() {
                let delta = if v == c { 1.0 } else { 0.0 };
                *dv += w * (delta - p[v]);
            }
        }
        out.extend(d.into_iter().map(|x| F::from_f64_lossy(x * up)));
    }
    out
}
