use super::tensor::{broadcast_offsets, broadcast_shape, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Broadcast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Operation selector for [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Softmax,
    Sum,
    Mean,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose,
    Broadcast {
        shape: Vec<usize>,
    },
}

/// Define-by-run recording of tensor operations.
///
/// Every op appends one node; node inputs always precede the node, so the
/// tape order is a topological order and `backward` is a single reverse
/// sweep. Build a fresh tape (or [`clear`](Tape::clear) this one) for every
/// training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every recorded node together with its gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was
    /// upstream of it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad length matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Dispatches `kind` on `inputs`.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op: op_name(kind),
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Div => {
                arity(2)?;
                self.div(inputs[0], inputs[1])
            }
            OpKind::Exp => {
                arity(1)?;
                Ok(self.exp(inputs[0]))
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => {
                arity(1)?;
                self.slice(inputs[0], *axis, *start, *end)
            }
            OpKind::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            OpKind::Broadcast { shape } => {
                arity(1)?;
                self.broadcast_to(inputs[0], shape)
            }
        }
    }

    // ---- elementwise binary (broadcasting) ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(AutodiffError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(pos) = self.data(b).iter().position(|&v| v == 0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: format!("divisor is zero at flat index {pos}"),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.data(x).iter().position(|&v| !(v > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!(
                    "non-positive input {} at flat index {pos}",
                    self.data(x)[pos]
                ),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// `max(x, 0)`; the gradient at exactly zero is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `|x|`; subgradient 0 at the kink.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or(AutodiffError::Rank {
            op: "softmax",
            shape: shape.clone(),
            min: 1,
        })?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(width.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(x), rg))
    }

    // ---- contractions ----

    /// `a[.., m, k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch());
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            0.0,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `a[.., k] · b[n, k]ᵀ`, for weights stored output-major.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            true,
            &mut out,
            0.0,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMulNt(a, b), rg))
    }

    /// Batched `a[b, m, k] · b[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Rank {
                op: "transpose",
                shape,
                min: 2,
            });
        }
        let data = transpose_last2(self.data(x), &shape);
        let mut out_shape = shape.clone();
        let r = shape.len();
        out_shape.swap(r - 1, r - 2);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Transpose(x), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis("sum_axis", x, axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut data) = self.reduce_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis].max(1) as f64;
        data.iter_mut().for_each(|v| *v /= len);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MeanAxis { x, axis }, rg))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis { op, axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, out))
    }

    // ---- structural ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start >= end || end > shape[axis] {
            return Err(AutodiffError::Range {
                op: "slice",
                start,
                end,
                len: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        match broadcast_shape(&src_shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast",
                    lhs: src_shape,
                    rhs: shape.to_vec(),
                })
            }
        }
        let offsets = broadcast_offsets(shape, &src_shape);
        let src = self.data(x);
        let data = offsets.iter().map(|&o| src[o]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Broadcast(x), rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `root`.
    ///
    /// Gradients from a previous backward are discarded first; within one
    /// sweep, contributions from every consumer of a node are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.shape(root).to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contribution),
        }
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let map1 = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let ga = reduce_to(g, out_shape, self.shape(*a), |_, v| v);
                let gb = reduce_to(g, out_shape, self.shape(*b), |_, v| sign * v);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ob = broadcast_offsets(out_shape, self.shape(*b));
                let oa = broadcast_offsets(out_shape, self.shape(*a));
                let ga = reduce_to(g, out_shape, self.shape(*a), |k, v| v * db[ob[k]]);
                let gb = reduce_to(g, out_shape, self.shape(*b), |k, v| v * da[oa[k]]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ob = broadcast_offsets(out_shape, self.shape(*b));
                let oa = broadcast_offsets(out_shape, self.shape(*a));
                let ga = reduce_to(g, out_shape, self.shape(*a), |k, v| v / db[ob[k]]);
                let gb = reduce_to(g, out_shape, self.shape(*b), |k, v| {
                    let y = db[ob[k]];
                    -v * da[oa[k]] / (y * y)
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(x) => map1(*x, &|k| -g[k]),
            Op::Scale(x, c) => map1(*x, &|k| g[k] * c),
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Exp(x) => map1(*x, &|k| g[k] * out[k]),
            Op::Log(x) => {
                let d = self.data(*x);
                map1(*x, &|k| g[k] / d[k])
            }
            Op::Relu(x) => {
                let d = self.data(*x);
                map1(*x, &|k| if d[k] > 0.0 { g[k] } else { 0.0 })
            }
            Op::Sigmoid(x) => map1(*x, &|k| g[k] * out[k] * (1.0 - out[k])),
            Op::Softplus(x) => {
                let d = self.data(*x);
                map1(*x, &|k| g[k] * sigmoid(d[k]))
            }
            Op::Abs(x) => {
                let d = self.data(*x);
                map1(*x, &|k| {
                    if d[k] > 0.0 {
                        g[k]
                    } else if d[k] < 0.0 {
                        -g[k]
                    } else {
                        0.0
                    }
                })
            }
            Op::Square(x) => {
                let d = self.data(*x);
                map1(*x, &|k| 2.0 * d[k] * g[k])
            }
            Op::Clamp { x, lo, hi } => {
                let d = self.data(*x);
                map1(*x, &|k| {
                    if d[k] >= *lo && d[k] <= *hi {
                        g[k]
                    } else {
                        0.0
                    }
                })
            }
            Op::Softmax(x) => {
                let width = *out_shape.last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for ((yr, gr), dst) in out
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(gx.chunks_mut(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for j in 0..width {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                gemm(m, n, k, g, false, self.data(*b), true, &mut ga, 0.0);
                gemm(k, m, n, self.data(*a), true, g, false, &mut gb, 0.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMulNt(a, b) => {
                let sb = self.shape(*b);
                let (n, k) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; n * k];
                gemm(m, n, k, g, false, self.data(*b), false, &mut ga, 0.0);
                gemm(n, m, k, g, true, self.data(*a), false, &mut gb, 0.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &db[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                    gemm(
                        k,
                        m,
                        n,
                        &da[i * m * k..(i + 1) * m * k],
                        true,
                        gi,
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        0.0,
                    );
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => vec![(*x, transpose_last2(g, out_shape))],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / n.max(1) as f64; n])]
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len.max(1) as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_w = out_shape[*axis] * inner;
                let mut offset = 0;
                let mut result = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let base = o * total_w + offset;
                        gp.extend_from_slice(&g[base..base + w]);
                    }
                    offset += w;
                    result.push((p, gp));
                }
                result
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = shape[*axis];
                let width = out_shape[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Broadcast(x) => vec![(*x, reduce_to(g, out_shape, self.shape(*x), |_, v| v))],
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Sums a gradient over broadcast axes back down to `in_shape`.
fn reduce_to(
    g: &[f64],
    out_shape: &[usize],
    in_shape: &[usize],
    f: impl Fn(usize, f64) -> f64,
) -> Vec<f64> {
    let n: usize = in_shape.iter().product();
    if in_shape == out_shape {
        return g.iter().enumerate().map(|(k, &v)| f(k, v)).collect();
    }
    let offsets = broadcast_offsets(out_shape, in_shape);
    let mut out = vec![0.0; n];
    for (k, (&o, &v)) in offsets.iter().zip(g).enumerate() {
        out[o] += f(k, v);
    }
    out
}

fn transpose_last2(src: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let block = rows * cols;
    let mut out = vec![0.0; src.len()];
    for (s, d) in src.chunks(block.max(1)).zip(out.chunks_mut(block.max(1))) {
        for i in 0..rows {
            for j in 0..cols {
                d[j * rows + i] = s[i * cols + j];
            }
        }
    }
    out
}

/// `c = op(a)·op(b) + beta·c` for row-major operands; `a_t`/`b_t` mark
/// operands stored transposed (`a` as k×m, `b` as n×k).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn op_name(kind: &OpKind) -> &'static str {
    match kind {
        OpKind::MatMul => "matmul",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::Exp => "exp",
        OpKind::Log => "log",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Softmax => "softmax",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::Concat { .. } => "concat",
        OpKind::Slice { .. } => "slice",
        OpKind::Transpose => "transpose",
        OpKind::Broadcast { .. } => "broadcast",
    }
}
