//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order; [`Graph::backward`] walks it in reverse. Matrix ops work
//! on rank-2 tensors; scalars have shape `[]`. The only broadcasts are
//! [`Graph::add_row`] and [`Graph::mul_row`], which apply a `1 × n` row to
//! every row of an `m × n` matrix.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Mean(Var),
    Sum(Var),
    SumSquaredError(Var, Var),
    CosineSimilarity(Var, Var),
    Embedding { table: Var, index: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Single writer; independent graphs can run on separate
/// threads.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> Error {
    Error::Validation(format!("{op}: incompatible shapes {shapes:?}"))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`Graph::backward`] call; `None` for tensors
    /// that do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, &[s]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("hadamard", a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, name: &str, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(name, a)?;
        let (r, n2) = self.matrix_dims(name, row)?;
        if r != 1 || n != n2 {
            return Err(shape_err(name, &[self.shape(a), self.shape(row)]));
        }
        let rd = &self.value(row).data;
        let data = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, rd[i % n]))
            .collect();
        Ok(self.push(Tensor { shape: vec![m, n], data }, op, &[a, row]))
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x += c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::Validation("concat: need at least one input and axis 0 or 1".into()));
        }
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            dims.push(self.matrix_dims("concat", v)?);
        }
        let other = |d: (usize, usize)| if axis == 0 { d.1 } else { d.0 };
        if dims.iter().any(|&d| other(d) != other(dims[0])) {
            let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
            return Err(shape_err("concat", &shapes));
        }
        let value = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * dims[0].1);
            for &v in inputs {
                data.extend_from_slice(&self.value(v).data);
            }
            Tensor { shape: vec![rows, dims[0].1], data }
        } else {
            let rows = dims[0].0;
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row_slice(r));
                }
            }
            Tensor { shape: vec![rows, cols], data }
        };
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice", a)?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::Validation(format!(
                "slice: axis {axis} range {start}..{} out of bounds for shape [{m}, {n}]",
                start + len
            )));
        }
        let src = &self.value(a).data;
        let value = if axis == 0 {
            Tensor {
                shape: vec![len, n],
                data: src[start * n..(start + len) * n].to_vec(),
            }
        } else {
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&src[r * n + start..r * n + start + len]);
            }
            Tensor { shape: vec![m, len], data }
        };
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = f(*x));
        self.push(value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, Op::Cos(a), f64::cos)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Squared error normalized by element count: `mean((a − b)²)`.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sum_squared_error", a, b)?;
        let (x, y) = (&self.value(a).data, &self.value(b).data);
        let n = x.len() as f64;
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::SumSquaredError(a, b), &[a, b]))
    }

    /// Row-wise cosine similarity of two `m × n` matrices, giving `m × 1`.
    /// Rows with zero norm yield 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (m, n) = self.matrix_dims("cosine_similarity", a)?;
        let (x, y) = (&self.value(a).data, &self.value(b).data);
        let data = (0..m)
            .map(|r| {
                let (u, v) = (&x[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
                let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                if nu == 0.0 || nv == 0.0 {
                    0.0
                } else {
                    dot / (nu * nv)
                }
            })
            .collect();
        Ok(self.push(Tensor { shape: vec![m, 1], data }, Op::CosineSimilarity(a, b), &[a, b]))
    }

    /// Row `index` of a `N × d` table as a `1 × d` matrix.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("embedding_lookup", table)?;
        if index >= n {
            return Err(Error::Validation(format!("embedding_lookup: index {index} out of range for {n} rows")));
        }
        let row = self.value(table).row_slice(index).to_vec();
        Ok(self.push(Tensor { shape: vec![1, d], data: row }, Op::Embedding { table, index }, &[table]))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.nodes[v.0].value.shape));
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    /// Reverse pass from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Validation(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g.data);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let bd = self.value(b).data.clone();
                    self.accumulate(a, |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let grow = &g[r * n..(r + 1) * n];
                                ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data.clone();
                    self.accumulate(b, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::AddRow(a, row) => {
                let n = self.shape(row)[1];
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.accumulate(row, |gr| {
                    for (idx, x) in g.iter().enumerate() {
                        gr[idx % n] += x;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.shape(row)[1];
                let rd = self.value(row).data.clone();
                let ad = self.value(a).data.clone();
                self.accumulate(a, |ga| {
                    for (idx, o) in ga.iter_mut().enumerate() {
                        *o += g[idx] * rd[idx % n];
                    }
                });
                self.accumulate(row, |gr| {
                    for (idx, x) in g.iter().enumerate() {
                        gr[idx % n] += x * ad[idx];
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (ad, bd) = (self.value(a).data.clone(), self.value(b).data.clone());
                self.accumulate(a, |ga| ga.iter_mut().enumerate().for_each(|(k, o)| *o += g[k] * bd[k]));
                self.accumulate(b, |gb| gb.iter_mut().enumerate().for_each(|(k, o)| *o += g[k] * ad[k]));
            }
            Op::Scale(a, c) => self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x)),
            Op::AddScalar(a) => self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)),
            Op::Concat(ref inputs, axis) => {
                let cols = self.nodes[i].value.shape[1];
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = (self.shape(v)[0], self.shape(v)[1]);
                    if axis == 0 {
                        let start = offset * cols;
                        self.accumulate(v, |gv| {
                            gv.iter_mut().zip(&g[start..start + r * c]).for_each(|(o, x)| *o += x)
                        });
                        offset += r;
                    } else {
                        let start = offset;
                        self.accumulate(v, |gv| {
                            for row in 0..r {
                                let src = &g[row * cols + start..row * cols + start + c];
                                gv[row * c..(row + 1) * c].iter_mut().zip(src).for_each(|(o, x)| *o += x);
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let n = self.shape(input)[1];
                let (r, c) = (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                self.accumulate(input, |gi| {
                    if axis == 0 {
                        gi[start * n..(start + r) * n].iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    } else {
                        for row in 0..r {
                            gi[row * n + start..row * n + start + c]
                                .iter_mut()
                                .zip(&g[row * c..(row + 1) * c])
                                .for_each(|(o, x)| *o += x);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ad = self.value(a).data.clone();
                self.accumulate(a, |ga| {
                    for k in 0..ga.len() {
                        if ad[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data.clone();
                self.accumulate(a, |ga| ga.iter_mut().enumerate().for_each(|(k, o)| *o += g[k] * y[k] * (1.0 - y[k])));
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data.clone();
                self.accumulate(a, |ga| ga.iter_mut().enumerate().for_each(|(k, o)| *o += g[k] * (1.0 - y[k] * y[k])));
            }
            Op::Sin(a) => {
                let x = self.value(a).data.clone();
                self.accumulate(a, |ga| ga.iter_mut().enumerate().for_each(|(k, o)| *o += g[k] * x[k].cos()));
            }
            Op::Cos(a) => {
                let x = self.value(a).data.clone();
                self.accumulate(a, |ga| ga.iter_mut().enumerate().for_each(|(k, o)| *o -= g[k] * x[k].sin()));
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                self.accumulate(a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Sum(a) => self.accumulate(a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::SumSquaredError(a, b) => {
                let (ad, bd) = (self.value(a).data.clone(), self.value(b).data.clone());
                let scale = 2.0 * g[0] / ad.len() as f64;
                self.accumulate(a, |ga| ga.iter_mut().enumerate().for_each(|(k, o)| *o += scale * (ad[k] - bd[k])));
                self.accumulate(b, |gb| gb.iter_mut().enumerate().for_each(|(k, o)| *o -= scale * (ad[k] - bd[k])));
            }
            Op::CosineSimilarity(a, b) => {
                let n = self.shape(a)[1];
                let (ad, bd) = (self.value(a).data.clone(), self.value(b).data.clone());
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for r in 0..g.len() {
                    let (u, v) = (&ad[r * n..(r + 1) * n], &bd[r * n..(r + 1) * n]);
                    let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
                    let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                    if nu == 0.0 || nv == 0.0 {
                        continue;
                    }
                    let c = dot / (nu * nv);
                    for k in 0..n {
                        da[r * n + k] = g[r] * (v[k] / (nu * nv) - c * u[k] / (nu * nu));
                        db[r * n + k] = g[r] * (u[k] / (nu * nv) - c * v[k] / (nv * nv));
                    }
                }
                self.accumulate(a, |ga| ga.iter_mut().zip(&da).for_each(|(o, x)| *o += x));
                self.accumulate(b, |gb| gb.iter_mut().zip(&db).for_each(|(o, x)| *o += x));
            }
            Op::Embedding { table, index } => {
                let d = self.shape(table)[1];
                self.accumulate(table, |gt| {
                    gt[index * d..(index + 1) * d].iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
            }
        }
    }
}

/// Bound LSTM parameters: `w_x` is `in × 4h`, `w_h` is `h × 4h`, `b` is
/// `1 × 4h`, gates packed as input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

impl LstmCell {
    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.w_h)[0]
    }
}

/// One LSTM step on `1 × in` input `x` with state `(h, c)`.
pub fn lstm_cell_step(g: &mut Graph, cell: &LstmCell, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let xw = g.matmul(x, cell.w_x)?;
    let proj = g.add_row(xw, cell.b)?;
    lstm_cell_from_projection(g, cell, proj, h, c)
}

/// Step given the precomputed input projection `x·w_x + b`.
pub fn lstm_cell_from_projection(g: &mut Graph, cell: &LstmCell, proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let n = cell.hidden(g);
    if g.shape(h) != [1, n] || g.shape(c) != [1, n] || g.shape(proj) != [1, 4 * n] {
        return Err(shape_err("lstm_cell_step", &[g.shape(proj), g.shape(h), g.shape(c)]));
    }
    let hw = g.matmul(h, cell.w_h)?;
    let gates = g.add(proj, hw)?;
    let i = g.slice(gates, 1, 0, n)?;
    let f = g.slice(gates, 1, n, n)?;
    let cand = g.slice(gates, 1, 2 * n, n)?;
    let o = g.slice(gates, 1, 3 * n, n)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.hadamard(f, c)?;
    let write = g.hadamard(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next);
    let h_next = g.hadamard(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs the cell over the rows of `x` (`T × in`) from a zero state and
/// stacks the hidden states into `T × h`.
pub fn lstm_sequence(g: &mut Graph, cell: &LstmCell, x: Var) -> Result<Var> {
    let n = cell.hidden(g);
    let xw = g.matmul(x, cell.w_x)?;
    let proj = g.add_row(xw, cell.b)?;
    let frames = g.shape(x)[0];
    let mut h = g.constant(Tensor::zeros(&[1, n]));
    let mut c = g.constant(Tensor::zeros(&[1, n]));
    let mut outs = Vec::with_capacity(frames);
    for t in 0..frames {
        let p = g.slice(proj, 0, t, 1)?;
        (h, c) = lstm_cell_from_projection(g, cell, p, h, c)?;
        outs.push(h);
    }
    g.concat(&outs, 0)
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_defaults(params: &[Tensor]) -> Self {
        AdamState::new(params, 1e-3, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update. Parameters with `frozen[i] == true` and
/// their moments are left untouched.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, frozen: Option<&[bool]>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Validation(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err("adam_step", &[p.shape(), g.shape()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let (m, v) = (&mut state.m[i].data, &mut state.v[i].data);
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p.data[k] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Worst relative deviation between backprop gradients and central
/// differences of `f` at `params`. The denominator is floored at `1e-6`
/// so exactly-zero gradients compare absolutely.
pub fn gradient_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = work[pi].data[k];
            work[pi].data[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data[k];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_of_self_is_one() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::row(vec![0.3, -2.0, 1.5]));
        let c = g.cosine_similarity(u, u).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((g.value(c).at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(g.add(a, b).is_ok());
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.hadamard(a, c).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
        assert!(g.embedding_lookup(a, 2).is_err());
    }

    #[test]
    fn backward_of_mean_and_sse() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]), true);
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);

        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 0.5];
        let x = g.leaf(Tensor::row(data.clone()), true);
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let l = g.sum_squared_error(x, z).unwrap();
        g.backward(l).unwrap();
        for (gx, x) in g.grad(x).unwrap().data().iter().zip(&data) {
            assert!((gx - 2.0 * x / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn no_gradient_into_constants_and_fan_out_sums() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![2.0]), true);
        let c = g.constant(Tensor::row(vec![3.0]));
        let a = g.hadamard(x, c).unwrap();
        let b = g.hadamard(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        // d/dx (3x + x²) = 3 + 2x
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
        // A second call starts from clean gradients.
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![2.0]), true);
        let d = g.detach(x);
        let y = g.hadamard(x, d).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    fn check(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let err = gradient_check(f, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    /// Sums a weighted reduction so every output element affects the loss.
    fn reduce(g: &mut Graph, y: Var) -> Result<Var> {
        let n = g.value(y).len();
        let shape = g.shape(y).to_vec();
        let w: Vec<f64> = (0..n).map(|k| 0.3 + 0.1 * (k % 7) as f64).collect();
        let w = g.constant(Tensor::new(shape, w)?);
        let p = g.hadamard(y, w)?;
        Ok(g.sum(p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn primitive_gradients(seed in 0u64..1000) {
            check(&[&[3, 4], &[4, 2]], seed, |g, v| { let y = g.matmul(v[0], v[1])?; reduce(g, y) });
            check(&[&[2, 3], &[2, 3]], seed, |g, v| { let y = g.add(v[0], v[1])?; reduce(g, y) });
            check(&[&[2, 3], &[2, 3]], seed, |g, v| { let y = g.sub(v[0], v[1])?; reduce(g, y) });
            check(&[&[2, 3], &[2, 3]], seed, |g, v| { let y = g.hadamard(v[0], v[1])?; reduce(g, y) });
            check(&[&[3, 2], &[1, 2]], seed, |g, v| { let y = g.add_row(v[0], v[1])?; reduce(g, y) });
            check(&[&[3, 2], &[1, 2]], seed, |g, v| { let y = g.mul_row(v[0], v[1])?; reduce(g, y) });
            check(&[&[2, 2]], seed, |g, v| { let y = g.scale(v[0], -1.7); reduce(g, y) });
            check(&[&[2, 2]], seed, |g, v| { let y = g.add_scalar(v[0], 0.4); reduce(g, y) });
            check(&[&[2, 3], &[1, 3]], seed, |g, v| { let y = g.concat(&[v[0], v[1]], 0)?; reduce(g, y) });
            check(&[&[2, 3], &[2, 1]], seed, |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; reduce(g, y) });
            check(&[&[4, 3]], seed, |g, v| { let y = g.slice(v[0], 0, 1, 2)?; reduce(g, y) });
            check(&[&[4, 5]], seed, |g, v| { let y = g.slice(v[0], 1, 2, 3)?; reduce(g, y) });
            check(&[&[3, 3]], seed, |g, v| { let y = g.relu(v[0]); reduce(g, y) });
            check(&[&[3, 3]], seed, |g, v| { let y = g.sigmoid(v[0]); reduce(g, y) });
            check(&[&[3, 3]], seed, |g, v| { let y = g.tanh(v[0]); reduce(g, y) });
            check(&[&[3, 3]], seed, |g, v| { let y = g.sin(v[0]); reduce(g, y) });
            check(&[&[3, 3]], seed, |g, v| { let y = g.cos(v[0]); reduce(g, y) });
            check(&[&[3, 3]], seed, |g, v| Ok(g.mean(v[0])));
            check(&[&[3, 3]], seed, |g, v| Ok(g.sum(v[0])));
            check(&[&[2, 4], &[2, 4]], seed, |g, v| g.sum_squared_error(v[0], v[1]));
            check(&[&[3, 4], &[3, 4]], seed, |g, v| { let y = g.cosine_similarity(v[0], v[1])?; reduce(g, y) });
            check(&[&[5, 3]], seed, |g, v| { let y = g.embedding_lookup(v[0], 3)?; reduce(g, y) });
        }
    }

    #[test]
    fn mlp_gradient_check() {
        check(&[&[2, 4], &[4, 5], &[1, 5], &[5, 3], &[1, 3], &[3, 1]], 42, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.tanh(h);
            let h = g.matmul(h, v[3])?;
            let h = g.add_row(h, v[4])?;
            let h = g.relu(h);
            let y = g.matmul(h, v[5])?;
            let target = g.constant(Tensor::zeros(&[2, 1]));
            g.sum_squared_error(y, target)
        });
    }

    #[test]
    fn gradient_check_scalars() {
        let sq = gradient_check(|g, v| { let y = g.hadamard(v[0], v[0])?; Ok(g.sum(y)) }, &[Tensor::row(vec![3.0])], 1e-5).unwrap();
        assert!(sq < 1e-8);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0]), true);
        let s = g.sin(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }


    fn cell_params(g: &mut Graph, rng: &mut ChaCha8Rng, input: usize, n: usize, zero: bool) -> LstmCell {
        let mut mk = |shape: &[usize]| {
            if zero { Tensor::zeros(shape) } else { rand_tensor(rng, shape) }
        };
        let (wx, wh, b) = (mk(&[input, 4 * n]), mk(&[n, 4 * n]), mk(&[1, 4 * n]));
        LstmCell { w_x: g.leaf(wx, true), w_h: g.leaf(wh, true), b: g.leaf(b, true) }
    }

    #[test]
    fn lstm_zero_params_halves_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let cell = cell_params(&mut g, &mut rng, 3, 4, true);
        let x = g.constant(rand_tensor(&mut rng, &[1, 3]));
        let h = g.constant(rand_tensor(&mut rng, &[1, 4]));
        let c0 = rand_tensor(&mut rng, &[1, 4]);
        let c = g.constant(c0.clone());
        let (h1, c1) = lstm_cell_step(&mut g, &cell, x, h, c).unwrap();
        for k in 0..4 {
            let cv = c0.data()[k];
            assert!((g.value(c1).data()[k] - 0.5 * cv).abs() < 1e-15);
            assert!((g.value(h1).data()[k] - 0.5 * (0.5 * cv).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_bias_only_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let cell = cell_params(&mut g, &mut rng, 3, 4, false);
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let (h1, c1) = lstm_cell_step(&mut g, &cell, x, z, z).unwrap();
        let b = g.value(cell.b).data().to_vec();
        for k in 0..4 {
            let c = sigmoid(b[k]) * b[8 + k].tanh();
            assert!((g.value(c1).data()[k] - c).abs() < 1e-15);
            assert!((g.value(h1).data()[k] - sigmoid(b[12 + k]) * c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_cell_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<Tensor> = [&[3usize, 16][..], &[4, 16], &[1, 16], &[1, 3], &[1, 4], &[1, 4]]
            .iter()
            .map(|s| rand_tensor(&mut rng, s))
            .collect();
        let err = gradient_check(
            |g, v| {
                let cell = LstmCell { w_x: v[0], w_h: v[1], b: v[2] };
                let (h, c) = lstm_cell_step(g, &cell, v[3], v[4], v[5])?;
                let (h, _) = lstm_cell_step(g, &cell, v[3], h, c)?;
                reduce(g, h)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn lstm_sequence_matches_cell_chain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let cell = cell_params(&mut g, &mut rng, 3, 5, false);
        let xs = rand_tensor(&mut rng, &[6, 3]);
        let x = g.constant(xs.clone());
        let seq = lstm_sequence(&mut g, &cell, x).unwrap();
        let mut h = g.constant(Tensor::zeros(&[1, 5]));
        let mut c = g.constant(Tensor::zeros(&[1, 5]));
        for t in 0..6 {
            let xt = g.constant(Tensor::row(xs.row_slice(t).to_vec()));
            (h, c) = lstm_cell_step(&mut g, &cell, xt, h, c).unwrap();
            assert_eq!(g.value(h).data(), g.value(seq).row_slice(t));
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0])];
        let mut st = AdamState::with_defaults(&p);
        let before = p.clone();
        adam_step(&mut p, &[Tensor::zeros(&[1, 2])], &mut st, None).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = vec![Tensor::row(vec![0.0, 0.0])];
        let mut st = AdamState::with_defaults(&p);
        let g = Tensor::row(vec![0.5, -3.0]);
        let mut last = p[0].clone();
        for _ in 0..200 {
            adam_step(&mut p, std::slice::from_ref(&g), &mut st, None).unwrap();
            let d0 = p[0].data()[0] - last.data()[0];
            let d1 = p[0].data()[1] - last.data()[1];
            assert!((d0 + 1e-3).abs() < 1e-6 && (d1 - 1e-3).abs() < 1e-6);
            last = p[0].clone();
        }
    }

    #[test]
    fn adam_quadratic_trace() {
        // Recurrence evaluated independently for f(x) = x², x0 = 1, lr 0.1, default betas.
        let expected = [
            0.900_000_000_5, 0.800_412_228_691_792_8, 0.701_586_272_946_030_3, 0.603_939_060_573_746,
            0.507_963_659_264_342, 0.414_236_455_993_661_9, 0.323_420_704_939_102_1,
            0.236_263_724_521_041_88, 0.153_584_560_070_363_6, 0.076_249_155_606_912_21,
        ];
        let mut p = vec![Tensor::row(vec![1.0])];
        let mut st = AdamState::new(&p, 0.1, 0.9, 0.999, 1e-8);
        let mut prev = 1.0f64;
        for e in expected {
            let x = p[0].data()[0];
            adam_step(&mut p, &[Tensor::row(vec![2.0 * x])], &mut st, None).unwrap();
            let x = p[0].data()[0];
            assert!((x - e).abs() < 1e-12, "{x} vs {e}");
            assert!(x.abs() < prev.abs());
            prev = x;
        }
    }

    #[test]
    fn adam_respects_frozen_mask() {
        let mut p = vec![Tensor::row(vec![1.0]), Tensor::row(vec![1.0])];
        let mut st = AdamState::with_defaults(&p);
        let g = [Tensor::row(vec![1.0]), Tensor::row(vec![1.0])];
        adam_step(&mut p, &g, &mut st, Some(&[true, false])).unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        assert_ne!(p[1].data(), &[1.0]);
    }

    #[test]
    fn graphs_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::new();
            let a = g.leaf(rand_tensor(&mut rng, &[4, 4]), true);
            let b = g.leaf(rand_tensor(&mut rng, &[4, 4]), true);
            let c = g.matmul(a, b).unwrap();
            let d = g.tanh(c);
            let l = g.mean(d);
            g.backward(l).unwrap();
            (g.value(l).clone(), g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
