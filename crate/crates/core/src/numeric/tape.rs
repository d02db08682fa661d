//! Reverse-mode differentiation over a flat computation tape.
//!
//! Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and `backward` is a single reverse sweep.

use super::tensor::{add_row_inplace, axpy_inplace, gemm, relu_inplace, zip_with, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a + bias` with a `1 x n` bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Fused `x W + b`, optionally followed by ReLU.
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        relu: bool,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a + s` with a `1 x 1` node broadcast everywhere.
    AddScalar(NodeId, NodeId),
    Square(NodeId),
    /// Row-wise sum: `n x m -> n x 1`.
    SumCols(NodeId),
    Mean(NodeId),
    Concat(NodeId, NodeId),
    /// Elementwise map whose derivative was evaluated alongside the value.
    Pointwise(NodeId, Tensor),
    LinComb(Vec<(NodeId, f64)>),
    /// Average each run of `group` consecutive rows.
    MeanGroups(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` if the loss does not reach it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gemm(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, cols) = self.value(a).as_matrix("add_row")?;
        let b = self.value(bias);
        if b.len() != cols {
            return Err(Error::Shape {
                context: "add_row bias".into(),
                expected: vec![1, cols],
                got: b.shape().to_vec(),
            });
        }
        let mut v = self.value(a).clone();
        add_row_inplace(&mut v, self.value(bias));
        let rg = self.rg(&[a, bias]);
        Ok(self.push(v, Op::AddRow(a, bias), rg))
    }

    /// Fused affine layer; same arithmetic as `matmul` + `add_row` (+ `relu`).
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId, relu: bool) -> Result<NodeId> {
        let mut v = gemm(self.value(x), false, self.value(w), false)?;
        if self.value(b).len() != v.cols() {
            return Err(Error::Shape {
                context: "dense bias".into(),
                expected: vec![1, v.cols()],
                got: self.value(b).shape().to_vec(),
            });
        }
        add_row_inplace(&mut v, self.value(b));
        if relu {
            relu_inplace(&mut v);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Dense { x, w, b, relu }, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        relu_inplace(&mut v);
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).same_shape(self.value(b), "add")?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item().ok_or_else(|| Error::Shape {
            context: "add_scalar".into(),
            expected: vec![1, 1],
            got: self.value(s).shape().to_vec(),
        })?;
        let v = self.value(a).map(|x| x + sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(v, Op::AddScalar(a, s), rg))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data: Vec<f64> = x.iter_rows().map(|r| r.iter().sum()).collect();
        let v = Tensor::matrix(x.rows(), 1, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).as_matrix("concat lhs")?;
        let (rb, cb) = self.value(b).as_matrix("concat rhs")?;
        if ra != rb {
            return Err(Error::Shape {
                context: "concat rows".into(),
                expected: vec![ra, ca],
                got: vec![rb, cb],
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(ra, ca + cb, data), Op::Concat(a, b), rg))
    }

    /// Elementwise `f` with derivative `df`, both fallible per element.
    pub fn pointwise<F, D>(&mut self, a: NodeId, f: F, df: D) -> Result<NodeId>
    where
        F: Fn(f64) -> Result<f64>,
        D: Fn(f64) -> Result<f64>,
    {
        let x = self.value(a);
        let mut vals = Vec::with_capacity(x.len());
        let mut ders = Vec::with_capacity(x.len());
        for &t in x.data() {
            vals.push(f(t)?);
            ders.push(df(t)?);
        }
        let shape = x.shape().to_vec();
        let v = Tensor::new(shape.clone(), vals)?;
        let d = Tensor::new(shape, ders)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Pointwise(a, d), rg))
    }

    /// `sum_i coef_i * node_i` over equally-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty linear combination".into()))?;
        let mut v = Tensor::zeros(self.value(first).shape());
        for &(id, c) in terms {
            v.same_shape(self.value(id), "lin_comb")?;
            axpy_inplace(&mut v, c, self.value(id));
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(v, Op::LinComb(terms.to_vec()), rg))
    }

    pub fn mean_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (rows, cols) = x.as_matrix("mean_groups")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::InvalidArgument(format!(
                "mean_groups: {rows} rows not divisible into groups of {group}"
            )));
        }
        let out_rows = rows / group;
        let mut data = vec![0.0; out_rows * cols];
        for r in 0..rows {
            let dst = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (d, s) in dst.iter_mut().zip(x.row(r)) {
                *d += s;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(out_rows, cols, data),
            Op::MeanGroups(a, group),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => axpy_inplace(existing, 1.0, &contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = gemm(g, false, self.value(*b), true)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = gemm(self.value(*a), true, g, false)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.iter_rows() {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Dense { x, w, b, relu } => {
                let masked;
                let gz = if *relu {
                    masked = zip_with(g, &node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                    &masked
                } else {
                    g
                };
                if self.requires_grad(*b) {
                    let cols = gz.cols();
                    let mut db = vec![0.0; cols];
                    for row in gz.iter_rows() {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
                if self.requires_grad(*w) {
                    let dw = gemm(self.value(*x), true, gz, false)?;
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*x) {
                    let dx = gemm(gz, false, self.value(*w), true)?;
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu(a) => {
                let da = zip_with(g, &node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| c * v));
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                let shape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::filled(&shape, g.sum()));
            }
            Op::Square(a) => {
                let da = zip_with(g, self.value(*a), |gv, x| 2.0 * x * gv);
                self.accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat(gv).take(cols));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.data()[0] / x.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(x.shape(), gv));
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.iter_rows() {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, ca, da));
                self.accumulate(grads, *b, Tensor::matrix(rows, cb, db));
            }
            Op::Pointwise(a, d) => {
                self.accumulate(grads, *a, zip_with(g, d, |gv, dv| gv * dv));
            }
            Op::LinComb(terms) => {
                for &(id, c) in terms {
                    self.accumulate(grads, id, g.map(|v| c * v));
                }
            }
            Op::MeanGroups(a, group) => {
                let x = self.value(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let inv = 1.0 / *group as f64;
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    data.extend(g.row(r / group).iter().map(|v| v * inv));
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, cols, data));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let c = t.constant(Tensor::scalar(2.0));
        let z = t.scale(x, 0.0);
        let y = t.add(z, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        // f(x) = x*x via lin_comb of the same node twice: 2x -> grad 2
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(5.0));
        let y = t.lin_comb(&[(x, 1.0), (x, 1.0)]).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn mean_groups_and_concat() {
        let mut t = Tape::new();
        let a = t.param(Tensor::matrix(4, 1, vec![1., 2., 3., 4.]));
        let b = t.constant(Tensor::matrix(4, 1, vec![0.; 4]));
        let c = t.concat(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[4, 2]);
        let m = t.mean_groups(c, 2).unwrap();
        assert_eq!(t.value(m).data(), &[1.5, 0.0, 3.5, 0.0]);
        let s = t.sum_cols(m);
        let l = t.mean(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.25; 4]);
        assert!(t.mean_groups(c, 3).is_err());
    }
}
