use std::fmt;

use super::jet::binom;
use super::{compose, Activation};
use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor {rows}x{cols} with {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn same_shape(&self, o: &Tensor) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    fn add_assign(&mut self, o: &Tensor) {
        debug_assert!(self.same_shape(o));
        self.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += b);
    }
}

/// Stacked layout of a jet tensor: channel `c` occupies rows `[c*points, (c+1)*points)`.
///
/// Channel 0 is the value; then each direction `d` contributes channels for
/// derivative orders `1..=orders[d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JetLayout {
    pub points: usize,
    pub orders: Vec<usize>,
}

impl JetLayout {
    pub fn new(points: usize, orders: Vec<usize>) -> Self {
        Self { points, orders }
    }

    pub fn value_only(points: usize) -> Self {
        Self { points, orders: vec![] }
    }

    pub fn channels(&self) -> usize {
        1 + self.orders.iter().sum::<usize>()
    }

    pub fn rows(&self) -> usize {
        self.channels() * self.points
    }

    /// Channel index of the `order`-th derivative along `dir` (`order == 0` is the value).
    pub fn channel(&self, dir: usize, order: usize) -> usize {
        if order == 0 {
            return 0;
        }
        assert!(order <= self.orders[dir], "direction {dir} carries order {}", self.orders[dir]);
        1 + self.orders[..dir].iter().sum::<usize>() + order - 1
    }

    /// Derivative order of each channel.
    pub fn channel_orders(&self) -> Vec<usize> {
        let mut v = vec![0];
        for &o in &self.orders {
            v.extend(1..=o);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Adjoint = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMulT,
    AddBias { rows: usize },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Square,
    Unary(Activation),
    Exp,
    ScaleRows,
    JetAct { act: Activation, layout: JetLayout },
    JetMul { layout: JetLayout },
    SliceRows { start: usize },
    GatherRows { idx: Vec<usize> },
    SliceCols { start: usize },
    ConcatRows,
    ConcatCols,
    Sum,
    Mean,
    Linear { name: &'static str, adjoint: Adjoint },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMulT => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Square => "square",
            Op::Unary(a) => a.name(),
            Op::Exp => "exp",
            Op::ScaleRows => "scale_rows",
            Op::JetAct { .. } => "jet_activation",
            Op::JetMul { .. } => "jet_mul",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Linear { name, .. } => name,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of a computation; node order is topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("params", &self.params.len()).finish()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `c[n x m] = a[n x k] * b[m x k]^T`
pub(crate) fn matmul_t(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, c: &mut [f64], beta: f64) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: slice lengths checked by callers; strides describe the stated shapes.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta, c.as_mut_ptr(),
            m as isize, 1,
        );
    }
}

/// `c[n x k] = a[n x m] * b[m x k]`
fn matmul_nn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize, c: &mut [f64]) {
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0, a.as_ptr(), m as isize, 1, b.as_ptr(), k as isize, 1, 0.0, c.as_mut_ptr(),
            k as isize, 1,
        );
    }
}

/// `c[m x k] = a[n x m]^T * b[n x k]`
fn matmul_tn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize, c: &mut [f64]) {
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), k as isize, 1, 0.0, c.as_mut_ptr(),
            k as isize, 1,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; registration order defines [`Tape::param_grads`] order.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, vec![], t);
        self.params.push(v.0);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn params(&self) -> Vec<Var> {
        self.params.iter().map(|&i| Var(i)).collect()
    }

    /// `x * w^T` with `x: n x k`, `w: m x k`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (a, b) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(a.cols, b.cols, "matmul inner dims {}x{} . ({}x{})^T", a.rows, a.cols, b.rows, b.cols);
        let mut out = Tensor::zeros(a.rows, b.rows);
        matmul_t(&a.data, a.rows, a.cols, &b.data, b.rows, &mut out.data, 0.0);
        self.push(Op::MatMulT, vec![x.0, w.0], out)
    }

    /// Adds bias row `b` (`1 x cols`) to the first `rows` rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, rows: usize) -> Var {
        let (a, bias) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(bias.data.len(), a.cols);
        let mut out = a.clone();
        for r in 0..rows.min(a.rows) {
            out.data[r * a.cols..(r + 1) * a.cols].iter_mut().zip(&bias.data).for_each(|(v, b)| *v += b);
        }
        self.push(Op::AddBias { rows }, vec![x.0, b.0], out)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "{}: {}x{} vs {}x{}", op.name(), x.rows, x.cols, y.rows, y.cols);
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(op, vec![a.0, b.0], out)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let x = &self.nodes[a.0].value;
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect());
        self.push(op, vec![a.0], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Add, a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Sub, a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Mul, a, b, |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::Scale(s), a, |v| v * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::AddScalar, a, |v| v + s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square, a, |v| v * v)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        self.unary(Op::Unary(act), a, |v| act.apply(v))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    /// Multiplies row `i` of `x` (`m x k`) by `s[i]` (`s` holds `m` values).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (a, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        assert_eq!(sv.data.len(), a.rows);
        let mut out = a.clone();
        for (r, &g) in sv.data.iter().enumerate() {
            out.data[r * a.cols..(r + 1) * a.cols].iter_mut().for_each(|v| *v *= g);
        }
        self.push(Op::ScaleRows, vec![x.0, s.0], out)
    }

    /// Applies `act` to a stacked jet tensor, propagating every derivative channel.
    pub fn jet_activation(&mut self, x: Var, act: Activation, layout: &JetLayout) -> Var {
        let a = &self.nodes[x.0].value;
        assert_eq!(a.rows, layout.rows(), "jet tensor rows vs layout");
        let block = layout.points * a.cols;
        let mut out = Tensor::zeros(a.rows, a.cols);
        for i in 0..block {
            let f = act.derivs(a.data[i]);
            out.data[i] = f[0];
            let mut base = 1;
            for &o in &layout.orders {
                let mut z = [a.data[i], 0.0, 0.0, 0.0];
                for m in 1..=o {
                    z[m] = a.data[(base + m - 1) * block + i];
                }
                let y = compose(&f, &z, o);
                for m in 1..=o {
                    out.data[(base + m - 1) * block + i] = y[m];
                }
                base += o;
            }
        }
        self.push(Op::JetAct { act, layout: layout.clone() }, vec![x.0], out)
    }

    /// Elementwise product of two stacked jet tensors (Leibniz rule per direction).
    pub fn jet_mul(&mut self, a: Var, b: Var, layout: &JetLayout) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y) && x.rows == layout.rows());
        let block = layout.points * x.cols;
        let mut out = Tensor::zeros(x.rows, x.cols);
        let ch = |c: usize, i: usize, d: &[f64]| d[c * block + i];
        for i in 0..block {
            out.data[i] = x.data[i] * y.data[i];
            let mut base = 1;
            for &o in &layout.orders {
                let idx = |m: usize| if m == 0 { 0 } else { base + m - 1 };
                for n in 1..=o {
                    let mut s = 0.0;
                    for k in 0..=n {
                        s += binom(n, k) * ch(idx(k), i, &x.data) * ch(idx(n - k), i, &y.data);
                    }
                    out.data[idx(n) * block + i] = s;
                }
                base += o;
            }
        }
        self.push(Op::JetMul { layout: layout.clone() }, vec![a.0, b.0], out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let a = &self.nodes[x.0].value;
        assert!(start + len <= a.rows);
        let out = Tensor::new(len, a.cols, a.data[start * a.cols..(start + len) * a.cols].to_vec());
        self.push(Op::SliceRows { start }, vec![x.0], out)
    }

    /// Rows `idx[0], idx[1], ..` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let a = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(idx.len() * a.cols);
        for &r in &idx {
            data.extend_from_slice(a.row(r));
        }
        let out = Tensor::new(idx.len(), a.cols, data);
        self.push(Op::GatherRows { idx }, vec![x.0], out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let a = &self.nodes[x.0].value;
        assert!(start + len <= a.cols);
        let mut data = Vec::with_capacity(a.rows * len);
        for r in 0..a.rows {
            data.extend_from_slice(&a.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { start }, vec![x.0], Tensor::new(a.rows, len, data))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols);
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Op::ConcatRows, parts.iter().map(|p| p.0).collect(), Tensor::new(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows, rows);
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Op::ConcatCols, parts.iter().map(|p| p.0).collect(), Tensor::new(rows, cols, data))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Op::Mean, vec![x.0], Tensor::scalar(s))
    }

    /// A linear map of `inputs` whose value is precomputed; `adjoint` maps the output
    /// gradient to one gradient per input (same shapes as the inputs).
    pub fn linear(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        adjoint: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        self.push(Op::Linear { name, adjoint: Box::new(adjoint) }, inputs.iter().map(|v| v.0).collect(), value)
    }

    /// Reverse pass from `root` with upstream seed `seed` (broadcast over the root).
    pub fn backward(&self, root: Var, seed: f64) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let r = &self.nodes[root.0].value;
        if !seed.is_finite() {
            return Err(Error::PoisonedGradient { node: root.0, op: self.nodes[root.0].op.name() });
        }
        grads[root.0] = Some(Tensor::new(r.rows, r.cols, vec![seed; r.data.len()]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (slot, contrib) in self.local_backward(node, &g) {
                if contrib.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::PoisonedGradient { node: i, op: node.op.name() });
                }
                match &mut grads[slot] {
                    Some(acc) => acc.add_assign(&contrib),
                    empty => *empty = Some(contrib),
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradients of all registered parameters in registration order (zeros when unreached).
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&p| match grads.by_node[p].take() {
                Some(t) => t.data,
                None => vec![0.0; self.nodes[p].value.data.len()],
            })
            .collect()
    }

    /// Convenience: backward from a scalar `loss` and return parameter gradients.
    pub fn grad(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let v = self.value(loss);
        if v.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::PoisonedLoss(format!("loss node {} is {:?}", loss.0, v.data)));
        }
        let mut g = self.backward(loss, 1.0)?;
        Ok(self.param_grads(&mut g))
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
        let inp = |k: usize| &self.nodes[node.inputs[k]].value;
        let ew = |f: &dyn Fn(usize) -> f64| Tensor::new(g.rows, g.cols, (0..g.data.len()).map(f).collect());
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMulT => {
                let (x, w) = (inp(0), inp(1));
                let mut gx = Tensor::zeros(x.rows, x.cols);
                matmul_nn(&g.data, g.rows, g.cols, &w.data, w.cols, &mut gx.data);
                let mut gw = Tensor::zeros(w.rows, w.cols);
                matmul_tn(&g.data, g.rows, g.cols, &x.data, x.cols, &mut gw.data);
                vec![(node.inputs[0], gx), (node.inputs[1], gw)]
            }
            Op::AddBias { rows } => {
                let b = inp(1);
                let mut gb = Tensor::zeros(b.rows, b.cols);
                for r in 0..(*rows).min(g.rows) {
                    gb.data.iter_mut().zip(g.row(r)).for_each(|(a, v)| *a += v);
                }
                vec![(node.inputs[0], g.clone()), (node.inputs[1], gb)]
            }
            Op::Add => vec![(node.inputs[0], g.clone()), (node.inputs[1], g.clone())],
            Op::Sub => vec![(node.inputs[0], g.clone()), (node.inputs[1], ew(&|i| -g.data[i]))],
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                vec![
                    (node.inputs[0], ew(&|i| g.data[i] * b.data[i])),
                    (node.inputs[1], ew(&|i| g.data[i] * a.data[i])),
                ]
            }
            Op::Scale(s) => vec![(node.inputs[0], ew(&|i| g.data[i] * s))],
            Op::AddScalar => vec![(node.inputs[0], g.clone())],
            Op::Square => {
                let a = inp(0);
                vec![(node.inputs[0], ew(&|i| 2.0 * a.data[i] * g.data[i]))]
            }
            Op::Unary(act) => {
                let a = inp(0);
                vec![(node.inputs[0], ew(&|i| act.derivs(a.data[i])[1] * g.data[i]))]
            }
            Op::Exp => vec![(node.inputs[0], ew(&|i| node.value.data[i] * g.data[i]))],
            Op::ScaleRows => {
                let (x, s) = (inp(0), inp(1));
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(s.rows, s.cols);
                for r in 0..x.rows {
                    let row = &mut gx.data[r * x.cols..(r + 1) * x.cols];
                    let mut acc = 0.0;
                    for (c, v) in row.iter_mut().enumerate() {
                        acc += *v * x.data[r * x.cols + c];
                        *v *= s.data[r];
                    }
                    gs.data[r] = acc;
                }
                vec![(node.inputs[0], gx), (node.inputs[1], gs)]
            }
            Op::JetAct { act, layout } => vec![(node.inputs[0], jet_act_backward(*act, layout, inp(0), g))],
            Op::JetMul { layout } => {
                let (ga, gb) = jet_mul_backward(layout, inp(0), inp(1), g);
                vec![(node.inputs[0], ga), (node.inputs[1], gb)]
            }
            Op::SliceRows { start } => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.rows, a.cols);
                ga.data[start * a.cols..start * a.cols + g.data.len()].copy_from_slice(&g.data);
                vec![(node.inputs[0], ga)]
            }
            Op::GatherRows { idx } => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.rows, a.cols);
                for (k, &r) in idx.iter().enumerate() {
                    ga.data[r * a.cols..(r + 1) * a.cols].iter_mut().zip(g.row(k)).for_each(|(d, v)| *d += v);
                }
                vec![(node.inputs[0], ga)]
            }
            Op::SliceCols { start } => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.rows, a.cols);
                for r in 0..a.rows {
                    ga.data[r * a.cols + start..r * a.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                vec![(node.inputs[0], ga)]
            }
            Op::ConcatRows => {
                let mut off = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let n = self.nodes[i].value.data.len();
                        let t = &self.nodes[i].value;
                        let part = Tensor::new(t.rows, t.cols, g.data[off..off + n].to_vec());
                        off += n;
                        (i, part)
                    })
                    .collect()
            }
            Op::ConcatCols => {
                let mut off = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let t = &self.nodes[i].value;
                        let mut part = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            part.data[r * t.cols..(r + 1) * t.cols]
                                .copy_from_slice(&g.row(r)[off..off + t.cols]);
                        }
                        off += t.cols;
                        (i, part)
                    })
                    .collect()
            }
            Op::Sum => {
                let a = inp(0);
                vec![(node.inputs[0], Tensor::new(a.rows, a.cols, vec![g.data[0]; a.data.len()]))]
            }
            Op::Mean => {
                let a = inp(0);
                let v = g.data[0] / a.data.len() as f64;
                vec![(node.inputs[0], Tensor::new(a.rows, a.cols, vec![v; a.data.len()]))]
            }
            Op::Linear { adjoint, .. } => node.inputs.iter().copied().zip(adjoint(g)).collect(),
        }
    }
}

fn jet_act_backward(act: Activation, layout: &JetLayout, x: &Tensor, g: &Tensor) -> Tensor {
    let block = layout.points * x.cols;
    let mut gx = Tensor::zeros(x.rows, x.cols);
    for i in 0..block {
        let f = act.derivs(x.data[i]);
        let mut g0 = g.data[i] * f[1];
        let mut base = 1;
        for &o in &layout.orders {
            let at = |m: usize| (base + m - 1) * block + i;
            let z1 = if o >= 1 { x.data[at(1)] } else { 0.0 };
            let z2 = if o >= 2 { x.data[at(2)] } else { 0.0 };
            let z3 = if o >= 3 { x.data[at(3)] } else { 0.0 };
            let gy1 = if o >= 1 { g.data[at(1)] } else { 0.0 };
            let gy2 = if o >= 2 { g.data[at(2)] } else { 0.0 };
            let gy3 = if o >= 3 { g.data[at(3)] } else { 0.0 };
            // y1 = f1 z1; y2 = f2 z1^2 + f1 z2; y3 = f3 z1^3 + 3 f2 z1 z2 + f1 z3
            g0 += gy1 * f[2] * z1
                + gy2 * (f[3] * z1 * z1 + f[2] * z2)
                + gy3 * (f[4] * z1 * z1 * z1 + 3.0 * f[3] * z1 * z2 + f[2] * z3);
            if o >= 1 {
                gx.data[at(1)] =
                    gy1 * f[1] + gy2 * 2.0 * f[2] * z1 + gy3 * (3.0 * f[3] * z1 * z1 + 3.0 * f[2] * z2);
            }
            if o >= 2 {
                gx.data[at(2)] = gy2 * f[1] + gy3 * 3.0 * f[2] * z1;
            }
            if o >= 3 {
                gx.data[at(3)] = gy3 * f[1];
            }
            base += o;
        }
        gx.data[i] = g0;
    }
    gx
}

fn jet_mul_backward(layout: &JetLayout, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let block = layout.points * a.cols;
    let mut ga = Tensor::zeros(a.rows, a.cols);
    let mut gb = Tensor::zeros(b.rows, b.cols);
    for i in 0..block {
        ga.data[i] += g.data[i] * b.data[i];
        gb.data[i] += g.data[i] * a.data[i];
        let mut base = 1;
        for &o in &layout.orders {
            let idx = |m: usize| if m == 0 { i } else { (base + m - 1) * block + i };
            for n in 1..=o {
                let gn = g.data[idx(n)];
                for k in 0..=n {
                    let c = binom(n, k) * gn;
                    ga.data[idx(k)] += c * b.data[idx(n - k)];
                    gb.data[idx(n - k)] += c * a.data[idx(k)];
                }
            }
            base += o;
        }
    }
    (ga, gb)
}
