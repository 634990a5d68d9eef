use super::kernels;
use super::scan::{self, ScanInputs};
use super::{matmul_dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Neg,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Sum(Var),
    MeanGroups(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ReverseRows(Var),
    TileRows(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<F>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        inputs: [Var; 6],
        states: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Computation record: nodes are appended in evaluation order, so every
/// node's inputs precede it and a reverse sweep is a valid backward pass.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Probability floor applied before the logarithm in cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor; its `requires_grad` flag decides whether
    /// gradients are accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor::from_vec(shape, data)
            .expect("op produced data matching its shape")
            .with_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.data(a), r, c);
        Ok(self.push(&[c, r], out, Op::Transpose(a), &[a]))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x + bias` with `bias` broadcast along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(b).map(|(&u, &v)| u + v))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x ⊙ w` with `w` broadcast along the last axis.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if self.value(w).numel() != cols {
            return Err(Error::shape("mul_row", self.shape(x), self.shape(w)));
        }
        let wd = self.data(w);
        let out = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(wd).map(|(&u, &v)| u * v))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::MulRow(x, w), &[x, w]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Scale(x, s), &[x])
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let out = self.data(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::ScaleBy(x, s), &[x, s]))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(F) -> F = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Silu => kernels::silu,
            Unary::Softplus => kernels::softplus,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => F::tanh,
            Unary::Exp => F::exp,
            Unary::Neg => |v: F| -v,
        };
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Unary(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("NaN input to softmax"));
        }
        let (_, cols) = self.dims(x);
        let mut out = vec![F::zero(); self.value(x).numel()];
        kernels::softmax_rows(self.data(x), &mut out, cols);
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= F::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let n = rows * cols;
        let mut out = vec![F::zero(); n];
        let mut xhat = vec![F::zero(); n];
        let mut inv_std = vec![F::zero(); rows];
        kernels::layer_norm_rows(
            self.data(x),
            self.data(gain),
            self.data(bias),
            eps,
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(&shape, out, op, &[x, gain, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<F>();
        self.push(&[1], vec![s], Op::Sum(x), &[x])
    }

    /// Averages consecutive groups of `group` rows: `(g·r) × c → r × c`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_groups", self.shape(x), &[group]));
        }
        let out_rows = rows / group;
        let inv = F::one() / F::from_usize_lossy(group);
        let mut out = vec![F::zero(); out_rows * cols];
        for (r, row) in self.data(x).chunks_exact(cols).enumerate() {
            let o = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = *ov + v;
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        Ok(self.push(&[out_rows, cols], out, Op::MeanGroups(x, group), &[x]))
    }

    /// Mean over all rows: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = self.dims(x);
        self.mean_groups(x, rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let out = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(&[rows, len], out, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (rows, _) = self.dims(first);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(&[rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.data(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(&[len, cols], out, Op::SliceRows(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, cols) = self.dims(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(&[rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims(x);
        let out = self
            .data(x)
            .chunks_exact(cols)
            .rev()
            .flatten()
            .copied()
            .collect();
        self.push(&[rows, cols], out, Op::ReverseRows(x), &[x])
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if times == 0 {
            return Err(Error::shape("tile_rows", self.shape(x), &[times]));
        }
        let out = self.data(x).repeat(times);
        Ok(self.push(&[rows * times, cols], out, Op::TileRows(x), &[x]))
    }

    /// Repeats every row of `x` `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if times == 0 {
            return Err(Error::shape("repeat_rows", self.shape(x), &[times]));
        }
        let out = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|r| std::iter::repeat_n(r, times).flatten().copied())
            .collect();
        Ok(self.push(&[rows * times, cols], out, Op::RepeatRows(x, times), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Mean-reduced cross-entropy `−(1/B) Σ_i Σ_c y_ic · ln max(ŷ_ic, 1e-12)`
    /// between a `B × C` probability batch and one-hot targets.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor<F>) -> Result<Var> {
        if self.shape(probs) != targets.shape() {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(probs),
                targets.shape(),
            ));
        }
        let (rows, cols) = self.dims(probs);
        for row in targets.data().chunks_exact(cols) {
            let ones = row.iter().filter(|&&v| v == F::one()).count();
            let zeros = row.iter().filter(|&&v| v == F::zero()).count();
            if ones != 1 || ones + zeros != cols {
                return Err(Error::contract("cross_entropy target row is not one-hot"));
            }
        }
        let clamp = F::lit(PROB_CLAMP);
        let total = self
            .data(probs)
            .iter()
            .zip(targets.data())
            .filter(|(_, &y)| y != F::zero())
            .map(|(&p, &y)| y * p.max(clamp).ln())
            .sum::<F>();
        let loss = -total / F::from_usize_lossy(rows);
        let op = Op::CrossEntropy {
            probs,
            targets: targets.data().to_vec(),
        };
        Ok(self.push(&[1], vec![loss], op, &[probs]))
    }

    /// Causal depthwise convolution over rows (time) of `x[len × ch]` with
    /// kernel `w[k × ch]` and bias `b[ch]`; the last kernel tap multiplies
    /// the current row.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (len, ch) = self.dims(x);
        let (k, wc) = self.dims(w);
        if wc != ch || self.value(b).numel() != ch {
            return Err(Error::shape("depthwise_conv", self.shape(x), self.shape(w)));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![F::zero(); len * ch];
        for t in 0..len {
            for c in 0..ch {
                let mut acc = bd[c];
                for j in 0..k {
                    let src = t as isize - (k - 1 - j) as isize;
                    if src >= 0 {
                        acc = acc + wd[j * ch + c] * xd[src as usize * ch + c];
                    }
                }
                out[t * ch + c] = acc;
            }
        }
        Ok(self.push(&[len, ch], out, Op::DepthwiseConv { x, w, b }, &[x, w, b]))
    }

    /// Selective scan (see [`super::scan`]) with `x, delta: len × ch`,
    /// `a: ch × n`, `b, c: len × n`, `d: ch`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        block: Option<usize>,
    ) -> Result<Var> {
        let (len, ch) = self.dims(x);
        let (ach, ns) = self.dims(a);
        if self.shape(delta) != self.shape(x)
            || ach != ch
            || self.dims(b) != (len, ns)
            || self.dims(c) != (len, ns)
            || self.value(d).numel() != ch
        {
            return Err(Error::shape("selective_scan", self.shape(x), self.shape(a)));
        }
        let inputs = ScanInputs {
            x: self.data(x),
            delta: self.data(delta),
            a: self.data(a),
            b: self.data(b),
            c: self.data(c),
            d: self.data(d),
            len,
            channels: ch,
            state: ns,
        };
        let out = match block {
            None => scan::scan_sequential(&inputs),
            Some(bs) => scan::scan_blocked(&inputs, bs),
        };
        if out.y.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("NaN in selective scan output"));
        }
        let op = Op::SelectiveScan {
            inputs: [x, delta, a, b, c, d],
            states: out.states,
        };
        Ok(self.push(&[len, ch], out.y, op, &[x, delta, a, b, c, d]))
    }

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every
    /// requires-grad node reachable from the loss; frozen leaves never
    /// receive a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            let t = &nodes[v.0].value;
            if !t.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); t.numel()]);
            f(buf);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| {
                    kernels::matmul_nt_acc(g, tb.data(), ga, m, k, n)
                });
                acc(*b, &mut |gb| {
                    kernels::matmul_tn_acc(ta.data(), g, gb, m, k, n)
                });
            }
            Op::Transpose(a) => {
                let s = out.shape();
                let gt = kernels::transpose(g, s[0], s[1]);
                acc(*a, &mut |ga| add_into(ga, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(db) {
                        *o = *o + gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(da) {
                        *o = *o + gv * av;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let cols = out.cols();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let cols = out.cols();
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                acc(*x, &mut |gx| {
                    for (gr, orow) in g.chunks_exact(cols).zip(gx.chunks_exact_mut(cols)) {
                        for ((o, &gv), &wv) in orow.iter_mut().zip(gr).zip(wd) {
                            *o = *o + gv * wv;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (gr, xr) in g.chunks_exact(cols).zip(xd.chunks_exact(cols)) {
                        for ((o, &gv), &xv) in gw.iter_mut().zip(gr).zip(xr) {
                            *o = *o + gv * xv;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * *s;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let sv = nodes[s.0].value.data()[0];
                let xd = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * sv;
                    }
                });
                acc(*s, &mut |gs| {
                    gs[0] = gs[0] + g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<F>();
                });
            }
            Op::Unary(x, kind) => {
                let xd = nodes[x.0].value.data();
                let yd = out.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        let d = match kind {
                            Unary::Gelu => kernels::gelu_grad(xd[j]),
                            Unary::Silu => kernels::silu_grad(xd[j]),
                            Unary::Softplus => kernels::sigmoid(xd[j]),
                            Unary::Sigmoid => yd[j] * (F::one() - yd[j]),
                            Unary::Tanh => F::one() - yd[j] * yd[j],
                            Unary::Exp => yd[j],
                            Unary::Neg => -F::one(),
                        };
                        gx[j] = gx[j] + g[j] * d;
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let yd = out.data();
                acc(*x, &mut |gx| {
                    for ((gr, yr), or) in g
                        .chunks_exact(cols)
                        .zip(yd.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>();
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = out.cols();
                let gd = nodes[gain.0].value.data();
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((o, &gv), &hv) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gv * hv;
                        }
                    }
                });
                let n = F::from_usize_lossy(cols);
                acc(*x, &mut |gx| {
                    let mut dh = vec![F::zero(); cols];
                    for (r, ((gr, hr), or)) in g
                        .chunks_exact(cols)
                        .zip(xhat.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                        .enumerate()
                    {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..cols {
                            dh[j] = gr[j] * gd[j];
                            s1 = s1 + dh[j];
                            s2 = s2 + dh[j] * hr[j];
                        }
                        let k = inv_std[r] / n;
                        for j in 0..cols {
                            or[j] = or[j] + k * (n * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                });
            }
            Op::MeanGroups(x, group) => {
                let cols = out.cols();
                let inv = F::one() / F::from_usize_lossy(*group);
                acc(*x, &mut |gx| {
                    for (r, or) in gx.chunks_exact_mut(cols).enumerate() {
                        let gr = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (o, &gv) in or.iter_mut().zip(gr) {
                            *o = *o + gv * inv;
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let len = out.cols();
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (gr, or) in g.chunks_exact(len).zip(gx.chunks_exact_mut(cols)) {
                        add_into(&mut or[*start..*start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(p, &mut |gp| {
                        for (gr, or) in g.chunks_exact(total).zip(gp.chunks_exact_mut(c)) {
                            add_into(or, &gr[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let cols = out.cols();
                acc(*x, &mut |gx| {
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ReverseRows(x) => {
                let cols = out.cols();
                acc(*x, &mut |gx| {
                    for (or, gr) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(cols).rev()) {
                        add_into(or, gr);
                    }
                });
            }
            Op::TileRows(x) => {
                acc(*x, &mut |gx| {
                    for chunk in g.chunks_exact(gx.len()) {
                        add_into(gx, chunk);
                    }
                });
            }
            Op::RepeatRows(x, times) => {
                let cols = out.cols();
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks_exact(cols).enumerate() {
                        add_into(&mut gx[(r / times) * cols..(r / times + 1) * cols], gr);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| add_into(gx, g));
            }
            Op::CrossEntropy { probs, targets } => {
                let pd = nodes[probs.0].value.data();
                let rows = nodes[probs.0].value.rows();
                let scale = g[0] / F::from_usize_lossy(rows);
                let clamp = F::lit(PROB_CLAMP);
                acc(*probs, &mut |gp| {
                    for ((o, &p), &y) in gp.iter_mut().zip(pd).zip(targets) {
                        if y != F::zero() && p > clamp {
                            *o = *o - scale * y / p;
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, w, b } => {
                let (len, ch) = (out.rows(), out.cols());
                let k = nodes[w.0].value.rows();
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                acc(*b, &mut |gb| {
                    for row in g.chunks_exact(ch) {
                        add_into(gb, row);
                    }
                });
                acc(*w, &mut |gw| {
                    for t in 0..len {
                        for j in 0..k {
                            let src = t as isize - (k - 1 - j) as isize;
                            if src < 0 {
                                continue;
                            }
                            for c in 0..ch {
                                gw[j * ch + c] =
                                    gw[j * ch + c] + g[t * ch + c] * xd[src as usize * ch + c];
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for t in 0..len {
                        for j in 0..k {
                            let src = t as isize - (k - 1 - j) as isize;
                            if src < 0 {
                                continue;
                            }
                            for c in 0..ch {
                                let s = src as usize * ch + c;
                                gx[s] = gx[s] + g[t * ch + c] * wd[j * ch + c];
                            }
                        }
                    }
                });
            }
            Op::SelectiveScan { inputs, states } => {
                let [x, delta, a, b, c, d] = *inputs;
                let (len, ch) = (out.rows(), out.cols());
                let ns = nodes[a.0].value.cols();
                let si = ScanInputs {
                    x: nodes[x.0].value.data(),
                    delta: nodes[delta.0].value.data(),
                    a: nodes[a.0].value.data(),
                    b: nodes[b.0].value.data(),
                    c: nodes[c.0].value.data(),
                    d: nodes[d.0].value.data(),
                    len,
                    channels: ch,
                    state: ns,
                };
                let sg = scan::scan_backward(&si, states, g);
                acc(x, &mut |o| add_into(o, &sg.x));
                acc(delta, &mut |o| add_into(o, &sg.delta));
                acc(a, &mut |o| add_into(o, &sg.a));
                acc(b, &mut |o| add_into(o, &sg.b));
                acc(c, &mut |o| add_into(o, &sg.c));
                acc(d, &mut |o| add_into(o, &sg.d));
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}
