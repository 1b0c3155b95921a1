//! Operation tape for reverse-mode differentiation over matrices.
//!
//! A forward pass records every operation on a [`Tape`]; nodes are stored in
//! topological order, so a single reverse sweep produces exact gradients.
//! Model parameters enter via [`Tape::param`] and receive their gradients in
//! their shared buffers when [`Tape::backward`] runs.

use crate::gradcore::{GradError, Matrix, ParamRef};
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode; dropout is active only in [`Mode::Train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Node {
    value: Matrix,
    param: Option<ParamRef>,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Relu { x: usize },
    MeanMats { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    StackRows { xs: Vec<usize> },
    SoftmaxCol { x: usize },
    SoftmaxRows { x: usize },
    Mse { a: usize, b: usize },
    CosSim { a: usize, b: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Dropout { x: usize, mask: Vec<f64> },
    Hadamard { a: usize, b: usize },
    RowSums { x: usize },
    MulCol { x: usize, c: usize },
    Col { x: usize, k: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sum { x: usize },
}

/// Records a forward computation and replays it in reverse for gradients.
/// One tape per training step; `backward` may run at most once.
pub struct Tape {
    nodes: Vec<Node>,
    done: bool,
}

const COS_EPS: f64 = 1e-8;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            param: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input matrix that needs no gradient.
    pub fn constant(&mut self, m: Matrix) -> Result<Var, GradError> {
        self.push(m, Op::Leaf, "constant")
    }

    /// Adds a trainable parameter; its gradient is written back into the
    /// shared buffer by [`Tape::backward`].
    pub fn param(&mut self, p: &ParamRef) -> Result<Var, GradError> {
        let value = p.borrow().clone();
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: "param" });
        }
        self.nodes.push(Node {
            value,
            param: Some(p.clone()),
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if am.cols() != bm.rows() {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let data = mm(am.data(), am.rows(), am.cols(), bm.data(), bm.cols());
        let out = Matrix::new(am.rows(), bm.cols(), data)?;
        self.push(out, Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    /// x·W + b with b (1×out) broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GradError> {
        let (xm, wm, bm) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if xm.cols() != wm.rows() {
            return Err(GradError::ShapeMismatch {
                op: "linear",
                lhs: xm.shape(),
                rhs: wm.shape(),
            });
        }
        if bm.shape() != (1, wm.cols()) {
            return Err(GradError::ShapeMismatch {
                op: "linear bias",
                lhs: wm.shape(),
                rhs: bm.shape(),
            });
        }
        let mut data = mm(xm.data(), xm.rows(), xm.cols(), wm.data(), wm.cols());
        let (rows, cols) = (xm.rows(), wm.cols());
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bm.data()[c];
            }
        }
        let out = Matrix::new(rows, cols, data)?;
        self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            "linear",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        let data = xm.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Matrix::new(xm.rows(), xm.cols(), data)?;
        self.push(out, Op::Relu { x: x.0 }, "relu")
    }

    /// Elementwise mean of equally shaped matrices.
    pub fn mean_mats(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        if xs.is_empty() {
            return Err(GradError::EmptyList { op: "mean_mats" });
        }
        let shape = self.nodes[xs[0].0].value.shape();
        for v in xs {
            let s = self.nodes[v.0].value.shape();
            if s != shape {
                return Err(GradError::ShapeMismatch {
                    op: "mean_mats",
                    lhs: shape,
                    rhs: s,
                });
            }
        }
        let n = xs.len() as f64;
        let mut data = vec![0.0; shape.0 * shape.1];
        for v in xs {
            for (d, s) in data.iter_mut().zip(self.nodes[v.0].value.data()) {
                *d += s;
            }
        }
        data.iter_mut().for_each(|d| *d /= n);
        let out = Matrix::new(shape.0, shape.1, data)?;
        self.push(
            out,
            Op::MeanMats {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            "mean_mats",
        )
    }

    /// Horizontal concatenation; all inputs share the row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        if xs.is_empty() {
            return Err(GradError::EmptyList { op: "concat_cols" });
        }
        let rows = self.nodes[xs[0].0].value.rows();
        let mut total = 0;
        for v in xs {
            let m = &self.nodes[v.0].value;
            if m.rows() != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0].0].value.shape(),
                    rhs: m.shape(),
                });
            }
            total += m.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                data.extend_from_slice(self.nodes[v.0].value.row(r));
            }
        }
        let out = Matrix::new(rows, total, data)?;
        self.push(
            out,
            Op::ConcatCols {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            "concat_cols",
        )
    }

    /// Vertical stacking; all inputs share the column count.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        if xs.is_empty() {
            return Err(GradError::EmptyList { op: "stack_rows" });
        }
        let cols = self.nodes[xs[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in xs {
            let m = &self.nodes[v.0].value;
            if m.cols() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.nodes[xs[0].0].value.shape(),
                    rhs: m.shape(),
                });
            }
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Matrix::new(rows, cols, data)?;
        self.push(
            out,
            Op::StackRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            "stack_rows",
        )
    }

    /// Softmax of an n×1 column vector, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        if xm.cols() != 1 {
            return Err(GradError::ShapeMismatch {
                op: "softmax",
                lhs: xm.shape(),
                rhs: (xm.rows(), 1),
            });
        }
        let data = softmax_slice(xm.data());
        let out = Matrix::new(xm.rows(), 1, data)?;
        self.push(out, Op::SoftmaxCol { x: x.0 }, "softmax")
    }

    /// Row-wise softmax of a batch×k matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        let (rows, cols) = xm.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(softmax_slice(xm.row(r)));
        }
        let out = Matrix::new(rows, cols, data)?;
        self.push(out, Op::SoftmaxRows { x: x.0 }, "softmax_rows")
    }

    /// Mean squared difference over all elements; returns a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if am.shape() != bm.shape() {
            return Err(GradError::ShapeMismatch {
                op: "mse",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let n = am.len() as f64;
        let sum: f64 = am
            .data()
            .iter()
            .zip(bm.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Matrix::scalar(sum / n), Op::Mse { a: a.0, b: b.0 }, "mse")
    }

    /// Mean per-row cosine similarity between equally shaped matrices, with a
    /// 1e-8 guard added to each norm. Returns a 1×1 node in [−1, 1].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if am.shape() != bm.shape() {
            return Err(GradError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let rows = am.rows();
        let mut total = 0.0;
        for r in 0..rows {
            total += row_cosine(am.row(r), bm.row(r)).0;
        }
        self.push(
            Matrix::scalar(total / rows as f64),
            Op::CosSim { a: a.0, b: b.0 },
            "cosine_similarity",
        )
    }

    /// Mean negative log-softmax of the true class, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GradError> {
        let lm = &self.nodes[logits.0].value;
        let (rows, cols) = lm.shape();
        if labels.len() != rows {
            return Err(GradError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lm.shape(),
                rhs: (labels.len(), cols),
            });
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(GradError::LabelOutOfRange {
                    label: y,
                    num_cls: cols,
                });
            }
            let row = lm.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss -= row[y] - lse;
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        self.push(
            Matrix::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `p` and survivors are scaled by 1/(1−p); eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var, GradError> {
        if !(0.0..1.0).contains(&p) {
            return Err(GradError::InvalidDropoutRate(p));
        }
        let xm = &self.nodes[x.0].value;
        if mode == Mode::Eval || p == 0.0 {
            let out = xm.clone();
            let mask = vec![1.0; out.len()];
            return self.push(out, Op::Dropout { x: x.0, mask }, "dropout");
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xm.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xm.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Matrix::new(xm.rows(), xm.cols(), data)?;
        self.push(out, Op::Dropout { x: x.0, mask }, "dropout")
    }

    /// Elementwise product of equally shaped matrices.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if am.shape() != bm.shape() {
            return Err(GradError::ShapeMismatch {
                op: "hadamard",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let data = am.data().iter().zip(bm.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::new(am.rows(), am.cols(), data)?;
        self.push(out, Op::Hadamard { a: a.0, b: b.0 }, "hadamard")
    }

    /// Per-row sum: batch×d → batch×1.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        let data = (0..xm.rows()).map(|r| xm.row(r).iter().sum()).collect();
        let out = Matrix::new(xm.rows(), 1, data)?;
        self.push(out, Op::RowSums { x: x.0 }, "row_sums")
    }

    /// Scales every row of `x` by the matching entry of the column `c`
    /// (batch×d times batch×1).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var, GradError> {
        let (xm, cm) = (&self.nodes[x.0].value, &self.nodes[c.0].value);
        if cm.shape() != (xm.rows(), 1) {
            return Err(GradError::ShapeMismatch {
                op: "mul_col",
                lhs: xm.shape(),
                rhs: cm.shape(),
            });
        }
        let cols = xm.cols();
        let mut data = Vec::with_capacity(xm.len());
        for r in 0..xm.rows() {
            let s = cm.data()[r];
            data.extend(xm.row(r).iter().map(|v| v * s));
        }
        let out = Matrix::new(xm.rows(), cols, data)?;
        self.push(out, Op::MulCol { x: x.0, c: c.0 }, "mul_col")
    }

    /// Extracts column `k` as a batch×1 matrix.
    pub fn col(&mut self, x: Var, k: usize) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        if k >= xm.cols() {
            return Err(GradError::ShapeMismatch {
                op: "col",
                lhs: xm.shape(),
                rhs: (xm.rows(), k + 1),
            });
        }
        let data = (0..xm.rows()).map(|r| xm.get(r, k)).collect();
        let out = Matrix::new(xm.rows(), 1, data)?;
        self.push(out, Op::Col { x: x.0, k }, "col")
    }

    /// Elementwise sum of equally shaped matrices.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if am.shape() != bm.shape() {
            return Err(GradError::ShapeMismatch {
                op: "add",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let data = am.data().iter().zip(bm.data()).map(|(x, y)| x + y).collect();
        let out = Matrix::new(am.rows(), am.cols(), data)?;
        self.push(out, Op::Add { a: a.0, b: b.0 }, "add")
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        let data = xm.data().iter().map(|v| v * c).collect();
        let out = Matrix::new(xm.rows(), xm.cols(), data)?;
        self.push(out, Op::Scale { x: x.0, c }, "scale")
    }

    /// Sum of all elements; returns a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        let xm = &self.nodes[x.0].value;
        let total = xm.data().iter().sum();
        self.push(Matrix::scalar(total), Op::Sum { x: x.0 }, "sum")
    }

    /// Reverse sweep from a scalar root. Accumulates into the gradient buffer
    /// of every parameter reachable from `root`. A second call on the same
    /// tape is an error.
    pub fn backward(&mut self, root: Var) -> Result<(), GradError> {
        if self.done {
            return Err(GradError::DoubleBackward);
        }
        let shape = self.nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(GradError::NotScalar { shape });
        }
        self.done = true;

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let go = std::mem::take(&mut grads[i]);
            self.apply_backward(i, &go, &mut grads);
            grads[i] = go;
        }

        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let Some(p) = &node.param {
                let mut m = p.borrow_mut();
                if m.requires_grad() {
                    m.accumulate_grad(grad);
                }
            }
        }
        Ok(())
    }

    fn apply_backward(&self, i: usize, go: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = mm_nt(go, am.rows(), bm.cols(), bm.data(), bm.rows());
                let db = mm_tn(am.data(), am.rows(), am.cols(), go, bm.cols());
                axpy(&mut grads[*a], &da);
                axpy(&mut grads[*b], &db);
            }
            Op::Linear { x, w, b } => {
                let (xm, wm) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let dx = mm_nt(go, xm.rows(), wm.cols(), wm.data(), wm.rows());
                let dw = mm_tn(xm.data(), xm.rows(), xm.cols(), go, wm.cols());
                axpy(&mut grads[*x], &dx);
                axpy(&mut grads[*w], &dw);
                let cols = wm.cols();
                for r in 0..xm.rows() {
                    for c in 0..cols {
                        grads[*b][c] += go[r * cols + c];
                    }
                }
            }
            Op::Relu { x } => {
                let xm = &self.nodes[*x].value;
                for (k, v) in xm.data().iter().enumerate() {
                    if *v > 0.0 {
                        grads[*x][k] += go[k];
                    }
                }
            }
            Op::MeanMats { xs } => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    for (g, o) in grads[x].iter_mut().zip(go) {
                        *g += o * inv;
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = self.nodes[x].value.cols();
                    for r in 0..rows {
                        for c in 0..w {
                            grads[x][r * w + c] += go[r * total + offset + c];
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.nodes[x].value.len();
                    for k in 0..len {
                        grads[x][k] += go[offset + k];
                    }
                    offset += len;
                }
            }
            Op::SoftmaxCol { x } => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(go).map(|(yi, gi)| yi * gi).sum();
                for (k, yi) in y.iter().enumerate() {
                    grads[*x][k] += yi * (go[k] - dot);
                }
            }
            Op::SoftmaxRows { x } => {
                let (rows, cols) = node.value.shape();
                for r in 0..rows {
                    let y = &node.value.data()[r * cols..(r + 1) * cols];
                    let g = &go[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..cols {
                        grads[*x][r * cols + c] += y[c] * (g[c] - dot);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let scale = 2.0 * go[0] / am.len() as f64;
                for k in 0..am.len() {
                    let d = (am.data()[k] - bm.data()[k]) * scale;
                    grads[*a][k] += d;
                    grads[*b][k] -= d;
                }
            }
            Op::CosSim { a, b } => {
                let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let rows = am.rows();
                let cols = am.cols();
                let scale = go[0] / rows as f64;
                for r in 0..rows {
                    let (ar, br) = (am.row(r), bm.row(r));
                    let (cs, na, nb) = row_cosine(ar, br);
                    let (nae, nbe) = (na + COS_EPS, nb + COS_EPS);
                    for c in 0..cols {
                        let mut da = br[c] / (nae * nbe);
                        let mut db = ar[c] / (nae * nbe);
                        if na > 0.0 {
                            da -= cs * ar[c] / (na * nae);
                        }
                        if nb > 0.0 {
                            db -= cs * br[c] / (nb * nbe);
                        }
                        grads[*a][r * cols + c] += scale * da;
                        grads[*b][r * cols + c] += scale * db;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let cols = self.nodes[*logits].value.cols();
                let scale = go[0] / labels.len() as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for c in 0..cols {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        grads[*logits][r * cols + c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for (k, m) in mask.iter().enumerate() {
                    grads[*x][k] += go[k] * m;
                }
            }
            Op::Hadamard { a, b } => {
                let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                for k in 0..am.len() {
                    grads[*a][k] += go[k] * bm.data()[k];
                    grads[*b][k] += go[k] * am.data()[k];
                }
            }
            Op::RowSums { x } => {
                let xm = &self.nodes[*x].value;
                let cols = xm.cols();
                for r in 0..xm.rows() {
                    for c in 0..cols {
                        grads[*x][r * cols + c] += go[r];
                    }
                }
            }
            Op::MulCol { x, c } => {
                let (xm, cm) = (&self.nodes[*x].value, &self.nodes[*c].value);
                let cols = xm.cols();
                for r in 0..xm.rows() {
                    let s = cm.data()[r];
                    let mut acc = 0.0;
                    for k in 0..cols {
                        grads[*x][r * cols + k] += go[r * cols + k] * s;
                        acc += go[r * cols + k] * xm.data()[r * cols + k];
                    }
                    grads[*c][r] += acc;
                }
            }
            Op::Col { x, k } => {
                let cols = self.nodes[*x].value.cols();
                for r in 0..node.value.rows() {
                    grads[*x][r * cols + k] += go[r];
                }
            }
            Op::Add { a, b } => {
                axpy(&mut grads[*a], go);
                axpy(&mut grads[*b], go);
            }
            Op::Scale { x, c } => {
                for (g, o) in grads[*x].iter_mut().zip(go) {
                    *g += o * c;
                }
            }
            Op::Sum { x } => {
                for g in grads[*x].iter_mut() {
                    *g += go[0];
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// C = A·B, A is m×k, B is k×n.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C = A·Bᵀ, A is m×k, B is n×k.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = Aᵀ·B, A is m×k, B is m×n; result is k×n.
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for p in 0..m {
        for i in 0..k {
            let api = a[p * k + i];
            if api == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
    c
}

fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// (cosine, |a|, |b|) for one row, with the ε guard on each norm.
fn row_cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / ((na + COS_EPS) * (nb + COS_EPS)), na, nb)
}
