use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Concat(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>),
    Neg(Var),
    Log(Var),
    Scale(Var, f64),
    Mean(Var),
    GradReverse(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every forward op rejects non-finite outputs when enabled.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`]; `None` for
    /// nodes that do not require grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix_shape();
        let (k2, n) = self.value(b).as_matrix_shape();
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            n,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("sub", a, b));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(self.mismatch("add_row", a, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Row-wise concatenation along the last axis; `a`'s columns come first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.shape().len() != tb.shape().len() {
            return Err(self.mismatch("concat", a, b));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let shape = if ta.shape().len() == 1 {
            vec![ca + cb]
        } else {
            vec![ta.rows(), ca + cb]
        };
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start > end || end > t.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = t.cols();
        let out = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())?;
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    /// Stacks the selected rows of `a` (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        self.push(out, Op::GatherRows(a, index.to_vec()), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != targets.len() || targets.iter().any(|&c| c >= t.cols()) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = t.row(r);
            total += log_sum_exp(row) - row[c];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        self.push(out, Op::CrossEntropy(logits, targets.to_vec()), &[logits])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gradient reversal lambda must be >= 0, got {lambda}"
            )));
        }
        let out = self.value(a).clone();
        self.push(out, Op::GradReverse(a, lambda), &[a])
    }

    /// Reverse sweep from a scalar `root`. Clears gradients from any
    /// previous sweep first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, &g, i)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, op: &Op, g: &Tensor, out_idx: usize) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).as_matrix_shape();
                let n = self.value(b).cols();
                if self.wants(a) {
                    // dA = G B^T
                    let da = gemm(g.data(), (m, n), false, self.value(b).data(), k, true);
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::new(shape, da)?);
                }
                if self.wants(b) {
                    // dB = A^T G
                    let db = gemm(self.value(a).data(), (k, m), true, g.data(), n, false);
                    self.accumulate(b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = self.value(b).zip_map(g, |y, gx| y * gx);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let db = self.value(a).zip_map(g, |x, gx| x * gx);
                    self.accumulate(b, db);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(a, g.clone());
                if self.wants(bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (acc, x) in db.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    let shape = self.value(bias).shape().to_vec();
                    self.accumulate(bias, Tensor::new(shape, db)?);
                }
            }
            Op::Relu(a) => {
                let da = self
                    .value(a)
                    .zip_map(g, |x, gx| if x > 0.0 { gx } else { 0.0 });
                self.accumulate(a, da);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
                let mut da = Vec::with_capacity(self.value(a).len());
                let mut db = Vec::with_capacity(self.value(b).len());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                self.accumulate(a, Tensor::new(sa, da)?);
                self.accumulate(b, Tensor::new(sb, db)?);
            }
            Op::SliceRows(a, start) => {
                if self.wants(a) {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    let c = g.cols();
                    da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(a, da);
                }
            }
            Op::GatherRows(a, ref index) => {
                if self.wants(a) {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    let c = g.cols();
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut da.data_mut()[i * c..(i + 1) * c];
                        for (d, x) in dst.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            Op::Softmax(a) => {
                let s = &self.nodes[out_idx].value;
                let c = s.cols();
                let mut da = Vec::with_capacity(s.len());
                for (srow, grow) in s.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    da.extend(srow.iter().zip(grow).map(|(si, gi)| si * (gi - dot)));
                }
                let shape = s.shape().to_vec();
                self.accumulate(a, Tensor::new(shape, da)?);
            }
            Op::CrossEntropy(logits, ref targets) => {
                let upstream = g.item();
                let mut p = softmax_rows(self.value(logits));
                let c = p.cols();
                let n = targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    p.data_mut()[r * c + t] -= 1.0;
                }
                let dz = p.map(|x| x * upstream / n);
                self.accumulate(logits, dz);
            }
            Op::Neg(a) => self.accumulate(a, g.map(|x| -x)),
            Op::Log(a) => {
                let da = self.value(a).zip_map(g, |x, gx| gx / x);
                self.accumulate(a, da);
            }
            Op::Scale(a, k) => self.accumulate(a, g.map(|x| x * k)),
            Op::Mean(a) => {
                let t = self.value(a);
                let share = g.item() / t.len() as f64;
                let da = Tensor::full(t.shape(), share);
                self.accumulate(a, da);
            }
            Op::GradReverse(a, lambda) => self.accumulate(a, g.map(|x| -lambda * x)),
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}
