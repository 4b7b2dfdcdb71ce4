//! Dense `f64` tensors, a small reverse-mode expression tape, and Adam.
//!
//! The tape is an append-only arena: every builder call pushes a node whose
//! parents already exist, so node order is a topological order. Leaves hold
//! bound values; interior values are produced by [`Tape::evaluate`] and the
//! adjoints by [`Tape::gradient`].
//!
//! Builder methods never fail. A shape mismatch is recorded on the tape and
//! surfaced by the next `evaluate`/`gradient` call, which keeps model code
//! free of `?` on every arithmetic step.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite entry at flat index {0}")]
    NonFiniteInput(usize),
    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteInput(idx));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadLength {
                    shape: vec![r, c],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(r, c, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the entries. Callers are responsible for keeping
    /// them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self::from_fn(c, r, |i, j| self.data[j * c + i])
    }

    /// Plain matrix product; panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out += aᵀ · b, a is k×n, b is k×m, out is n×m
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out += a · bᵀ, a is n×k, b is m×k, out is n×m
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * m + j] += dot;
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Tanh(Var),
    Logistic(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    /// Each row divided by its Euclidean norm; zero rows map to `e_0`.
    RowNormalize(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    /// Row-wise Householder reflection carrying `e_0` onto each row of the
    /// first operand, applied to the matching row of the second operand.
    Householder(Var, Var),
    /// Expands a `1×d(d+1)/2` row-major upper triangle into a symmetric `d×d`.
    SymmetricFromUpper(Var, usize),
    /// Divides a matrix by its largest row sum (identity for a zero bound).
    MaxRowSumNormalize(Var),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scalar-mul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Logistic(..) => "logistic",
            Op::Softplus(..) => "softplus",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::RowNormalize(..) => "row-normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SquaredNorm(..) => "squared-norm",
            Op::Householder(..) => "householder",
            Op::SymmetricFromUpper(..) => "symmetric-from-upper",
            Op::MaxRowSumNormalize(..) => "max-row-sum-normalize",
        }
    }

    fn parents(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::Householder(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Logistic(a)
            | Op::Softplus(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::RowNormalize(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SquaredNorm(a)
            | Op::SymmetricFromUpper(a, _)
            | Op::MaxRowSumNormalize(a) => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

/// Expression arena for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    error: Option<TensorError>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf bound to `value`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let shape = value.shape.clone();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Rebinds a leaf and invalidates every cached interior value.
    pub fn set_leaf(&mut self, var: Var, value: Tensor) -> Result<()> {
        let node = &self.nodes[var.0];
        if node.op != Op::Leaf {
            return Err(TensorError::NotLeaf(var.0));
        }
        if node.shape != value.shape {
            return Err(TensorError::ShapeMismatch {
                op: "input",
                left: node.shape.clone(),
                right: value.shape.clone(),
            });
        }
        self.nodes[var.0].value = Some(value);
        for n in &mut self.nodes {
            if n.op != Op::Leaf {
                n.value = None;
            }
        }
        Ok(())
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    /// Cached value, if already evaluated.
    pub fn value(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].value.as_ref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&mut self, op: &'static str, a: Var, b: Var) {
        if self.error.is_none() {
            self.error = Some(TensorError::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        let r = s.first().copied().unwrap_or(1);
        let c = if s.len() >= 2 { s[1..].iter().product() } else { 1 };
        (r, c)
    }

    fn elementwise(&mut self, op: Op, name: &'static str, a: Var, b: Var) -> Var {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            self.mismatch(name, a, b);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(op, shape)
    }

    fn unary(&mut self, op: Op, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        self.push(op, shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.rows_cols(a);
        let (k2, m) = self.rows_cols(b);
        if k != k2 || self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 {
            self.mismatch("matmul", a, b);
        }
        self.push(Op::MatMul(a, b), vec![n, m])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(Op::Add(a, b), "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(Op::Sub(a, b), "sub", a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(Op::Hadamard(a, b), "hadamard", a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Scale(a, k), a)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        self.push(Op::Transpose(a), vec![c, r])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a)
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(Op::Logistic(a), a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a)
    }

    pub fn row_normalize(&mut self, a: Var) -> Var {
        self.unary(Op::RowNormalize(a), a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), vec![1, 1])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a), vec![1, 1])
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        self.push(Op::SquaredNorm(a), vec![1, 1])
    }

    pub fn householder(&mut self, mu: Var, w: Var) -> Var {
        self.elementwise(Op::Householder(mu, w), "householder", mu, w)
    }

    pub fn symmetric_from_upper(&mut self, upper: Var, dim: usize) -> Var {
        if self.nodes[upper.0].shape != [1, dim * (dim + 1) / 2] && self.error.is_none() {
            self.error = Some(TensorError::ShapeMismatch {
                op: "symmetric-from-upper",
                left: self.nodes[upper.0].shape.clone(),
                right: vec![1, dim * (dim + 1) / 2],
            });
        }
        self.push(Op::SymmetricFromUpper(upper, dim), vec![dim, dim])
    }

    pub fn max_row_sum_normalize(&mut self, a: Var) -> Var {
        self.unary(Op::MaxRowSumNormalize(a), a)
    }

    fn reachable(&self, root: Var) -> Vec<bool> {
        let mut mark = vec![false; root.0 + 1];
        mark[root.0] = true;
        for i in (0..=root.0).rev() {
            if !mark[i] {
                continue;
            }
            for p in self.nodes[i].op.parents().into_iter().flatten() {
                mark[p.0] = true;
            }
        }
        mark
    }

    /// Forward pass for every ancestor of `root`; returns the root value.
    pub fn evaluate(&mut self, root: Var) -> Result<Tensor> {
        if let Some(e) = &self.error {
            return Err(e.clone());
        }
        let mark = self.reachable(root);
        for i in 0..=root.0 {
            if !mark[i] || self.nodes[i].value.is_some() {
                continue;
            }
            let op = self.nodes[i].op;
            let value = self.forward(op, i);
            if !value.is_finite() {
                return Err(TensorError::NonFinite { op: op.name() });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(self.nodes[root.0].value.clone().expect("evaluated root"))
    }

    fn val(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref().expect("parent evaluated")
    }

    fn forward(&self, op: Op, idx: usize) -> Tensor {
        let shape = self.nodes[idx].shape.clone();
        let zip = |a: Var, b: Var, f: fn(f64, f64) -> f64| {
            let (x, y) = (self.val(a), self.val(b));
            Tensor {
                shape: shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            }
        };
        match op {
            Op::Leaf => unreachable!("leaves are bound"),
            Op::MatMul(a, b) => self.val(a).matmul(self.val(b)),
            Op::Add(a, b) => zip(a, b, |p, q| p + q),
            Op::Sub(a, b) => zip(a, b, |p, q| p - q),
            Op::Hadamard(a, b) => zip(a, b, |p, q| p * q),
            Op::Scale(a, k) => self.val(a).map(|v| v * k),
            Op::Transpose(a) => self.val(a).transpose(),
            Op::Tanh(a) => self.val(a).map(f64::tanh),
            Op::Logistic(a) => self.val(a).map(logistic),
            Op::Softplus(a) => self.val(a).map(softplus),
            Op::Log(a) => self.val(a).map(f64::ln),
            Op::Exp(a) => self.val(a).map(f64::exp),
            Op::RowNormalize(a) => {
                let x = self.val(a);
                let (r, c) = (x.rows(), x.cols());
                let mut out = x.clone();
                for i in 0..r {
                    let row = out.row_mut(i);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.iter_mut().for_each(|v| *v /= norm);
                    } else if c > 0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        row[0] = 1.0;
                    }
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(self.val(a).sum()),
            Op::Mean(a) => {
                let x = self.val(a);
                Tensor::scalar(x.sum() / x.len().max(1) as f64)
            }
            Op::SquaredNorm(a) => Tensor::scalar(self.val(a).data.iter().map(|v| v * v).sum()),
            Op::Householder(mu, w) => {
                let (m, x) = (self.val(mu), self.val(w));
                let mut out = x.clone();
                for i in 0..m.rows() {
                    let refl = reflect(m.row(i), x.row(i));
                    out.row_mut(i).copy_from_slice(&refl);
                }
                out
            }
            Op::SymmetricFromUpper(u, d) => {
                let u = self.val(u);
                let mut out = Tensor::zeros(&[d, d]);
                let mut k = 0;
                for i in 0..d {
                    for j in i..d {
                        out.data[i * d + j] = u.data[k];
                        out.data[j * d + i] = u.data[k];
                        k += 1;
                    }
                }
                out
            }
            Op::MaxRowSumNormalize(a) => {
                let x = self.val(a);
                match max_row_sum(x) {
                    Some((_, s)) => x.map(|v| v / s),
                    None => x.clone(),
                }
            }
        }
    }

    /// Reverse accumulation from a scalar root. Leaves unreachable from the
    /// root get a zero tensor of their own shape.
    pub fn gradient(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.nodes[root.0].shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        self.evaluate(root)?;
        let mark = self.reachable(root);
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(&self.nodes[root.0].shape, 1.0));
        for i in (0..=root.0).rev() {
            if !mark[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = self.nodes[i].op;
            self.backward(op, i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|v| match adj.get(v.0).and_then(Option::clone) {
                Some(t) => t,
                None => Tensor::zeros(&self.nodes[v.0].shape),
            })
            .collect())
    }

    fn backward(&self, op: Op, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        fn acc(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
            let slot = adj[v.0].get_or_insert_with(|| Tensor::zeros(shape));
            f(&mut slot.data);
        }
        let out = self.nodes[idx].value.as_ref().expect("forward cached");
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                let (n, k, m) = (x.rows(), x.cols(), y.cols());
                acc(adj, a, &x.shape, |d| matmul_nt_acc(&g.data, &y.data, d, n, m, k));
                acc(adj, b, &y.shape, |d| matmul_tn_acc(&x.data, &g.data, d, n, k, m));
            }
            Op::Add(a, b) => {
                acc(adj, a, &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(o, v)| *o += v));
                acc(adj, b, &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(o, v)| *o += v));
            }
            Op::Sub(a, b) => {
                acc(adj, a, &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(o, v)| *o += v));
                acc(adj, b, &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(o, v)| *o -= v));
            }
            Op::Hadamard(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                acc(adj, a, &g.shape, |d| {
                    for ((o, gv), yv) in d.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gv * yv;
                    }
                });
                acc(adj, b, &g.shape, |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(&g.data).zip(&x.data) {
                        *o += gv * xv;
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(adj, a, &g.shape, |d| d.iter_mut().zip(&g.data).for_each(|(o, v)| *o += k * v));
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(adj, a, &gt.shape, |d| d.iter_mut().zip(&gt.data).for_each(|(o, v)| *o += v));
            }
            Op::Tanh(a) => acc(adj, a, &g.shape, |d| {
                for ((o, gv), y) in d.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Logistic(a) => acc(adj, a, &g.shape, |d| {
                for ((o, gv), y) in d.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Softplus(a) => {
                let x = self.val(a);
                acc(adj, a, &g.shape, |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(&g.data).zip(&x.data) {
                        *o += gv * logistic(*xv);
                    }
                })
            }
            Op::Log(a) => {
                let x = self.val(a);
                acc(adj, a, &g.shape, |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(&g.data).zip(&x.data) {
                        *o += gv / xv;
                    }
                })
            }
            Op::Exp(a) => acc(adj, a, &g.shape, |d| {
                for ((o, gv), y) in d.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gv * y;
                }
            }),
            Op::RowNormalize(a) => {
                let x = self.val(a);
                let c = x.cols();
                acc(adj, a, &x.shape, |d| {
                    for i in 0..x.rows() {
                        let xr = x.row(i);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = &out.data[i * c..(i + 1) * c];
                        let gr = &g.data[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            d[i * c + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                })
            }
            Op::Sum(a) => {
                let gv = g.data[0];
                let shape = self.nodes[a.0].shape.clone();
                acc(adj, a, &shape, |d| d.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mean(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let n = shape.iter().product::<usize>().max(1) as f64;
                let gv = g.data[0] / n;
                acc(adj, a, &shape, |d| d.iter_mut().for_each(|o| *o += gv));
            }
            Op::SquaredNorm(a) => {
                let x = self.val(a);
                let gv = g.data[0];
                acc(adj, a, &x.shape, |d| {
                    d.iter_mut().zip(&x.data).for_each(|(o, v)| *o += 2.0 * gv * v)
                });
            }
            Op::Householder(mu, w) => {
                let (m, x) = (self.val(mu), self.val(w));
                let c = m.cols();
                let mut gmu = vec![0.0; m.len()];
                let mut gw = vec![0.0; x.len()];
                for i in 0..m.rows() {
                    let (dm, dw) = reflect_backward(m.row(i), x.row(i), &g.data[i * c..(i + 1) * c]);
                    gmu[i * c..(i + 1) * c].copy_from_slice(&dm);
                    gw[i * c..(i + 1) * c].copy_from_slice(&dw);
                }
                acc(adj, mu, &m.shape, |d| d.iter_mut().zip(&gmu).for_each(|(o, v)| *o += v));
                acc(adj, w, &x.shape, |d| d.iter_mut().zip(&gw).for_each(|(o, v)| *o += v));
            }
            Op::SymmetricFromUpper(u, dim) => {
                let shape = self.nodes[u.0].shape.clone();
                acc(adj, u, &shape, |d| {
                    let mut k = 0;
                    for i in 0..dim {
                        for j in i..dim {
                            d[k] += if i == j {
                                g.data[i * dim + i]
                            } else {
                                g.data[i * dim + j] + g.data[j * dim + i]
                            };
                            k += 1;
                        }
                    }
                })
            }
            Op::MaxRowSumNormalize(a) => {
                let x = self.val(a);
                let c = x.cols();
                match max_row_sum(x) {
                    None => acc(adj, a, &g.shape, |d| {
                        d.iter_mut().zip(&g.data).for_each(|(o, v)| *o += v)
                    }),
                    Some((r, s)) => {
                        let ga: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                        let corr = ga / (s * s);
                        acc(adj, a, &g.shape, |d| {
                            d.iter_mut().zip(&g.data).for_each(|(o, v)| *o += v / s);
                            for j in 0..c {
                                d[r * c + j] -= corr;
                            }
                        })
                    }
                }
            }
        }
    }

    /// Largest relative disagreement between reverse-mode and central
    /// differences, `|fd − ad| / max(1, |fd|, |ad|)`, over the entries of
    /// `leaf`. The leaf is restored afterwards.
    pub fn finite_difference_check(&mut self, root: Var, leaf: Var, epsilon: f64) -> Result<f64> {
        if !(epsilon > 0.0) {
            return Err(TensorError::BadEpsilon(epsilon));
        }
        if self.nodes[leaf.0].op != Op::Leaf {
            return Err(TensorError::NotLeaf(leaf.0));
        }
        let ad = self.gradient(root, &[leaf])?.remove(0);
        let base = self.nodes[leaf.0].value.clone().expect("leaf bound");
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data[k] += epsilon;
            self.set_leaf(leaf, plus)?;
            let fp = self.evaluate(root)?.item();
            let mut minus = base.clone();
            minus.data[k] -= epsilon;
            self.set_leaf(leaf, minus)?;
            let fm = self.evaluate(root)?.item();
            let fd = (fp - fm) / (2.0 * epsilon);
            let a = ad.data[k];
            let err = (fd - a).abs() / 1f64.max(fd.abs()).max(a.abs());
            worst = worst.max(err);
        }
        self.set_leaf(leaf, base)?;
        Ok(worst)
    }
}

fn max_row_sum(x: &Tensor) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..x.rows() {
        let s: f64 = x.row(i).iter().sum();
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.filter(|&(_, s)| s > 0.0)
}

// Below this ‖e_0 − μ‖² the reflection is taken as the identity.
const POLE_EPS: f64 = 1e-30;

/// Householder reflection `H = I − 2uuᵀ/uᵀu`, `u = e_0 − μ`, applied to `w`.
pub fn reflect(mu: &[f64], w: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = mu.iter().map(|v| -v).collect();
    u[0] += 1.0;
    let q: f64 = u.iter().map(|v| v * v).sum();
    if q <= POLE_EPS {
        return w.to_vec();
    }
    let s: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    let k = 2.0 * s / q;
    w.iter().zip(&u).map(|(wv, uv)| wv - k * uv).collect()
}

fn reflect_backward(mu: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut u: Vec<f64> = mu.iter().map(|v| -v).collect();
    u[0] += 1.0;
    let q: f64 = u.iter().map(|v| v * v).sum();
    if q <= POLE_EPS {
        return (vec![0.0; mu.len()], g.to_vec());
    }
    let s: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    let a: f64 = u.iter().zip(g).map(|(x, y)| x * y).sum();
    // dL/du = −2[(a/q)w + (s/q)g − (2sa/q²)u]; μ = e_0 − u
    let gmu = (0..mu.len())
        .map(|i| 2.0 * ((a / q) * w[i] + (s / q) * g[i] - (2.0 * s * a / (q * q)) * u[i]))
        .collect();
    // H is symmetric, so dL/dw = Hg
    let gw = reflect(mu, g);
    (gmu, gw)
}

/// Adam optimizer state for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(&g.shape)).collect();
            self.second = self.first.clone();
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape != g.shape || m.shape != g.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    left: p.shape.clone(),
                    right: g.shape.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i].data;
            let m = &mut self.first[i].data;
            let v = &mut self.second[i].data;
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p.data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}
