//! Define-by-run reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use super::{ops, NumError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, f64),
    GatherRows(Var, Vec<usize>),
    RowL2Distance(Var, Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients from `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node's value; meaningful for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`. `None` for nodes the loss
    /// does not depend on through differentiable paths.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), v, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumError> {
        self.mul(a, a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let v = ops::mul_scalar(self.value(a), c)?;
        Ok(self.push(Op::MulScalar(a, c), v, &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let v = ops::add_scalar(self.value(a), c)?;
        Ok(self.push(Op::AddScalar(a), v, &[a]))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumError> {
        let v = ops::add_row_bias(self.value(a), self.value(bias))?;
        Ok(self.push(Op::AddRowBias(a, bias), v, &[a, bias]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let v = ops::tanh(self.value(a))?;
        Ok(self.push(Op::Tanh(a), v, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let v = ops::relu(self.value(a))?;
        Ok(self.push(Op::Relu(a), v, &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v, &[a]))
    }

    pub fn logsumexp_rows(&mut self, a: Var, temperature: f64) -> Result<Var, NumError> {
        let v = ops::logsumexp_rows(self.value(a), temperature)?;
        Ok(self.push(Op::LogSumExpRows(a, temperature), v, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let v = ops::gather_rows(self.value(a), idx)?;
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), v, &[a]))
    }

    pub fn row_l2_distance(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::row_l2_distance(self.value(a), self.value(b))?;
        Ok(self.push(Op::RowL2Distance(a, b), v, &[a, b]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(v), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s: f64 = self.value(a).data().iter().sum();
        let v = ops::checked("sum", Tensor::scalar(s))?;
        Ok(self.push(Op::Sum(a), v, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let v = ops::checked("mean", Tensor::scalar(s))?;
        Ok(self.push(Op::Mean(a), v, &[a]))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let v = ops::mean_rows(self.value(a))?;
        Ok(self.push(Op::MeanRows(a), v, &[a]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), v, &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`. Clears gradients from any earlier sweep.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumError::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                self.propagate(id, &g);
            }
            self.nodes[id].grad = Some(g);
        }
        // interior nodes keep their gradients only if they are leaves
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&Graph, &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let mut buf = self.nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len]);
        contrib(self, &mut buf);
        self.nodes[v.0].grad = Some(buf);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let out = Var(id);
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                // dA = dC * B^T
                self.accumulate(a, |gr, buf| {
                    let (av, bv) = (gr.value(a), gr.value(b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let bd = bv.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            buf[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T * dC
                self.accumulate(b, |gr, buf| {
                    let (av, bv) = (gr.value(a), gr.value(b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => self.accumulate(a, |gr, buf| {
                let (m, n) = (gr.value(a).shape()[0], gr.value(a).shape()[1]);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            }),
            &Op::Add(a, b) => {
                self.accumulate(a, |_, buf| add_into(buf, g));
                self.accumulate(b, |_, buf| add_into(buf, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, |_, buf| add_into(buf, g));
                self.accumulate(b, |_, buf| sub_into(buf, g));
            }
            &Op::Mul(a, b) => {
                self.accumulate(a, |gr, buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(gr.value(b).data()) {
                        *o += x * y;
                    }
                });
                self.accumulate(b, |gr, buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(gr.value(a).data()) {
                        *o += x * y;
                    }
                });
            }
            &Op::MulScalar(a, c) => self.accumulate(a, |_, buf| {
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o += x * c;
                }
            }),
            &Op::AddScalar(a) => self.accumulate(a, |_, buf| add_into(buf, g)),
            &Op::AddRowBias(a, bias) => {
                self.accumulate(a, |_, buf| add_into(buf, g));
                self.accumulate(bias, |gr, buf| {
                    for row in g.chunks(gr.value(bias).len()) {
                        add_into(buf, row);
                    }
                });
            }
            &Op::Tanh(a) => self.accumulate(a, |gr, buf| {
                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(gr.value(out).data()) {
                    *o += x * (1.0 - y * y);
                }
            }),
            &Op::Relu(a) => self.accumulate(a, |gr, buf| {
                for ((o, &x), &xin) in buf.iter_mut().zip(g).zip(gr.value(a).data()) {
                    if xin > 0.0 {
                        *o += x;
                    }
                }
            }),
            &Op::SoftmaxRows(a) => self.accumulate(a, |gr, buf| {
                let y = gr.value(out);
                let n = y.cols();
                for (r, (grow, yrow)) in g.chunks(n).zip(y.data().chunks(n)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, p)| x * p).sum();
                    for j in 0..n {
                        buf[r * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }),
            &Op::LogSumExpRows(a, t) => self.accumulate(a, |gr, buf| {
                let av = gr.value(a);
                let n = av.cols();
                let mut p = vec![0.0; n];
                for (r, &gv) in g.iter().enumerate() {
                    ops::softmax_into(av.row(r), 1.0 / t, &mut p);
                    for j in 0..n {
                        buf[r * n + j] += gv * p[j];
                    }
                }
            }),
            Op::GatherRows(a, idx) => self.accumulate(*a, |gr, buf| {
                let n = gr.value(*a).cols();
                for (r, &j) in idx.iter().enumerate() {
                    buf[r * n + j] += g[r];
                }
            }),
            &Op::RowL2Distance(a, b) => {
                let coef = {
                    let (av, bv) = (self.value(a), self.value(b));
                    let d = self.value(out).data();
                    let n = av.cols();
                    // subgradient 0 where the distance vanishes
                    let mut coef = vec![0.0; av.len()];
                    for r in 0..d.len() {
                        if d[r] > 0.0 {
                            for j in 0..n {
                                coef[r * n + j] = g[r] * (av.get(r, j) - bv.get(r, j)) / d[r];
                            }
                        }
                    }
                    coef
                };
                self.accumulate(a, |_, buf| add_into(buf, &coef));
                self.accumulate(b, |_, buf| sub_into(buf, &coef));
            }
            &Op::Mse(a, b) => {
                let coef: Vec<f64> = {
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    let scale = 2.0 * g[0] / av.len() as f64;
                    av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect()
                };
                self.accumulate(a, |_, buf| add_into(buf, &coef));
                self.accumulate(b, |_, buf| sub_into(buf, &coef));
            }
            &Op::Sum(a) => self.accumulate(a, |_, buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            &Op::Mean(a) => self.accumulate(a, |_, buf| {
                let n = buf.len() as f64;
                for o in buf.iter_mut() {
                    *o += g[0] / n;
                }
            }),
            &Op::MeanRows(a) => self.accumulate(a, |gr, buf| {
                let (m, n) = (gr.value(a).rows() as f64, gr.value(a).cols());
                for row in buf.chunks_mut(n) {
                    for (o, &x) in row.iter_mut().zip(g) {
                        *o += x / m;
                    }
                }
            }),
            &Op::ConcatCols(a, b) => {
                let p = self.value(a).cols();
                let q = self.value(b).cols();
                self.accumulate(a, |_, buf| {
                    for (row, grow) in buf.chunks_mut(p).zip(g.chunks(p + q)) {
                        add_into(row, &grow[..p]);
                    }
                });
                self.accumulate(b, |_, buf| {
                    for (row, grow) in buf.chunks_mut(q).zip(g.chunks(p + q)) {
                        add_into(row, &grow[p..]);
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, &x) in buf.iter_mut().zip(g) {
        *o += x;
    }
}

fn sub_into(buf: &mut [f64], g: &[f64]) {
    for (o, &x) in buf.iter_mut().zip(g) {
        *o -= x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_norm_gives_x() {
        let mut g = Graph::new();
        let xs = vec![0.3, -1.2, 2.5];
        let x = g.param(Tensor::vector(xs.clone()).unwrap());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.mul_scalar(s, 0.5).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), xs.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = g.matmul(c, w).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_distance_has_zero_subgradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let d = g.row_l2_distance(a, b).unwrap();
        let l = g.sum(d).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0]);
    }
}
