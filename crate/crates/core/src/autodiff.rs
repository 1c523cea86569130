//! Trainable parameters and a reverse-mode tape over [`Tensor`] operations.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the record in reverse and returns
//! [`Gradients`] keyed by parameter, which the caller folds into a
//! [`ParamStore`] with [`ParamStore::accumulate`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv3x3, conv3x3_backward, matmul_at_into, matmul_bt_into, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub frozen: bool,
}

/// Named parameters of one model. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

static EMPTY_STORE: ParamStore = ParamStore { params: Vec::new() };

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.id_of(&name).is_some() {
            return Err(Error::Contract(alloc::format!("duplicate parameter name {name:?}")));
        }
        let gradient = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            gradient,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn gradient(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].gradient
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients (`+=`, never overwrite).
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.entries {
            self.params[id.0].gradient.add_assign(g)?;
        }
        Ok(())
    }

    /// Plain gradient-descent update on every non-frozen parameter.
    pub fn sgd_step(&mut self, learning_rate: f64) {
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.gradient.data()) {
                *v -= learning_rate * g;
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(i, g)| (*i, g))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannel(Var, Var),
    MulRowScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Column(Var, usize),
    RepeatRows(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Conv3x3(Var, Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl Tape<'static> {
    /// A tape with no parameters; only constants may be recorded.
    pub fn standalone() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node { value: Some(t), .. } => t,
            Node { op: Op::Param(id), .. } => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(dim_err("matmul_bt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatmulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.as_matrix_dims();
        if tb.len() != cols {
            return Err(dim_err("add_row_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// Adds one value per channel to a `[c, h, w]` tensor.
    pub fn add_channel(&mut self, x: Var, per_channel: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(per_channel));
        if tx.shape().len() != 3 || tb.len() != tx.shape()[0] {
            return Err(dim_err("add_channel", tx.shape(), tb.shape()));
        }
        let plane = tx.shape()[1] * tx.shape()[2];
        let mut out = tx.clone();
        for (chunk, b) in out.data_mut().chunks_exact_mut(plane).zip(tb.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannel(x, per_channel)))
    }

    /// Multiplies row `r` of `x: [m, n]` by `s[r]` where `s: [m, 1]`.
    pub fn mul_row_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (rows, cols) = tx.as_matrix_dims();
        if ts.len() != rows {
            return Err(dim_err("mul_row_scalar", tx.shape(), ts.shape()));
        }
        let mut out = tx.clone();
        for (row, sv) in out.data_mut().chunks_exact_mut(cols).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.push(out, Op::MulRowScalar(x, s)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Selects rows of a `[v, d]` table by index, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(dim_err("gather_rows", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(dim_err("gather_rows", t.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    /// Column `i` of `x: [m, n]` as `[m, 1]`.
    pub fn column(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.as_matrix_dims();
        if i >= cols {
            return Err(dim_err("column", t.shape(), &[i]));
        }
        let out: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + i]).collect();
        let out = Tensor::new(&[rows, 1], out)?;
        Ok(self.push(out, Op::Column(x, i)))
    }

    /// Repeats a `[1, n]` row `m` times.
    pub fn repeat_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.as_matrix_dims();
        if rows != 1 || m == 0 {
            return Err(dim_err("repeat_rows", t.shape(), &[m]));
        }
        let mut out = Vec::with_capacity(m * cols);
        for _ in 0..m {
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[m, cols], out)?;
        Ok(self.push(out, Op::RepeatRows(x)))
    }

    /// Mean over rows of `[m, n]`, giving `[1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.as_matrix_dims();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let out = Tensor::new(&[1, cols], out).expect("positive extents");
        self.push(out, Op::MeanRows(x))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?);
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(dim_err("concat", first.shape(), t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Same-padded 3×3 convolution: `x: [c_in, h, w]`, `k: [c_out, c_in, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let ok = tx.shape().len() == 3 && tk.shape().len() == 4 && tk.shape()[1] == tx.shape()[0] && tk.shape()[2..] == [3, 3];
        if !ok {
            return Err(dim_err("conv3x3", tx.shape(), tk.shape()));
        }
        let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let c_out = tk.shape()[0];
        let out = conv3x3(tx.data(), tk.data(), c_in, c_out, h, w);
        let out = Tensor::new(&[c_out, h, w], out)?;
        Ok(self.push(out, Op::Conv3x3(x, kernel)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mse", ta.shape(), tb.shape()));
        }
        let total: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / ta.len() as f64);
        Ok(self.push(out, Op::Mse(a, b)))
    }

    /// Reverse pass from a scalar `loss`. Returns `∂loss/∂p` for every
    /// parameter recorded on the tape; parameters the loss does not reach
    /// get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut param_grads: Vec<(ParamId, Tensor)> = Vec::new();
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                if !param_grads.iter().any(|(p, _)| *p == id) {
                    param_grads.push((id, Tensor::zeros(self.store.value(id).shape())));
                }
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = param_grads.iter_mut().find(|(p, _)| p == id).expect("registered");
                    slot.1.add_assign(&g)?;
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(ta.data(), g.data(), &mut gb, m, k, n);
                    acc(&mut grads, *a, Tensor::new(ta.shape(), ga)?)?;
                    acc(&mut grads, *b, Tensor::new(tb.shape(), gb)?)?;
                }
                Op::MatmulBt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; n * k];
                    matmul_at_into(g.data(), ta.data(), &mut gb, m, n, k);
                    acc(&mut grads, *a, Tensor::new(ta.shape(), ga)?)?;
                    acc(&mut grads, *b, Tensor::new(tb.shape(), gb)?)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0))?;
                    acc(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::AddRowBias(x, bias) => {
                    let tb = self.value(*bias);
                    let cols = tb.len();
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks_exact(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, Tensor::new(tb.shape(), gb)?)?;
                    acc(&mut grads, *x, g)?;
                }
                Op::AddChannel(x, per_channel) => {
                    let tb = self.value(*per_channel);
                    let plane = g.len() / tb.len();
                    let gb: Vec<f64> = g.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
                    acc(&mut grads, *per_channel, Tensor::new(tb.shape(), gb)?)?;
                    acc(&mut grads, *x, g)?;
                }
                Op::MulRowScalar(x, s) => {
                    let (tx, ts) = (self.value(*x), self.value(*s));
                    let cols = tx.as_matrix_dims().1;
                    let mut gx = g.clone();
                    let mut gs = vec![0.0; ts.len()];
                    for (r, (grow, xrow)) in gx.data_mut().chunks_exact_mut(cols).zip(tx.data().chunks_exact(cols)).enumerate() {
                        gs[r] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        grow.iter_mut().for_each(|v| *v *= ts.data()[r]);
                    }
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *s, Tensor::new(ts.shape(), gs)?)?;
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s))?,
                Op::Relu(x) => {
                    let gx = g.zip_with(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let cols = y.as_matrix_dims().1;
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_exact_mut(cols).zip(y.data().chunks_exact(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()?)?,
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    acc(&mut grads, *x, g.reshape(&shape)?)?;
                }
                Op::GatherRows(table, ids) => {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let mut gt = Tensor::zeros(tt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                        for (o, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, gt)?;
                }
                Op::Column(x, col) => {
                    let tx = self.value(*x);
                    let cols = tx.as_matrix_dims().1;
                    let mut gx = Tensor::zeros(tx.shape());
                    for (r, v) in g.data().iter().enumerate() {
                        gx.data_mut()[r * cols + col] = *v;
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::RepeatRows(x) => {
                    let tx = self.value(*x);
                    let cols = tx.len();
                    let mut gx = vec![0.0; cols];
                    for row in g.data().chunks_exact(cols) {
                        for (o, v) in gx.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(tx.shape(), gx)?)?;
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let (rows, cols) = tx.as_matrix_dims();
                    let mut gx = Vec::with_capacity(tx.len());
                    for _ in 0..rows {
                        gx.extend(g.data()[..cols].iter().map(|v| v / rows as f64));
                    }
                    acc(&mut grads, *x, Tensor::new(tx.shape(), gx)?)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.shape(*p).to_vec();
                        let n: usize = shape.iter().product();
                        let piece = Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        acc(&mut grads, *p, piece)?;
                    }
                }
                Op::Conv3x3(x, kernel) => {
                    let (tx, tk) = (self.value(*x), self.value(*kernel));
                    let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let c_out = tk.shape()[0];
                    let (gx, gk) = conv3x3_backward(tx.data(), tk.data(), g.data(), c_in, c_out, h, w);
                    acc(&mut grads, *x, Tensor::new(tx.shape(), gx)?)?;
                    acc(&mut grads, *kernel, Tensor::new(tk.shape(), gk)?)?;
                }
                Op::Sum(x) => {
                    let gx = Tensor::filled(self.shape(*x), g.item());
                    acc(&mut grads, *x, gx)?;
                }
                Op::Mean(x) => {
                    let tx = self.value(*x);
                    let gx = Tensor::filled(tx.shape(), g.item() / tx.len() as f64);
                    acc(&mut grads, *x, gx)?;
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.item() / ta.len() as f64;
                    let ga = ta.zip_with(tb, "mse", |x, y| k * (x - y))?;
                    acc(&mut grads, *b, ga.scale(-1.0))?;
                    acc(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(Gradients { entries: param_grads })
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[2, 3], vec![0.5; 6]).unwrap()).unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let v = tape.param(p);
            let loss = tape.sum(v);
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.gradient(p).data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let v = tape.param(p);
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.gradient(p).data(), &[2.0, 4.0]);
        // accumulation adds rather than overwrites
        store.accumulate(&grads).unwrap();
        assert_eq!(store.gradient(p).data(), &[4.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.gradient(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn detached_loss_leaves_gradient_zero() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let _unused = tape.param(p);
            let c = tape.constant(Tensor::vector(vec![1.0, 1.0]));
            let loss = tape.sum(c);
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.gradient(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(2.0)).is_err());
    }
}
