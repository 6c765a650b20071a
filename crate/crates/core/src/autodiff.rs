//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation records its
//! parents, so parents always precede children and a reverse index sweep is a
//! valid topological order for the backward pass. Graphs are built fresh for
//! each training step; frozen teacher outputs enter as [`Graph::constant`]
//! nodes that receive no gradient.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node inside one [`Graph`]. Ids from different graphs must not
/// be mixed; they are plain indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameters, adaptive weights).
    Leaf,
    /// Non-differentiable input (data batches, teacher features).
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    /// Row-broadcast bias: x (b x n) + bias (n).
    BiasAdd(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    Reshape(NodeId),
    /// Gather entries of a vector by fixed indices.
    Select(NodeId, Vec<usize>),
    /// Concatenate vectors.
    Concat(Vec<NodeId>),
}

struct NodeData {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Freshly-built computation graph for one loss evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    ran_backward: bool,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(NodeData {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input node that never receives a gradient (treated as a constant).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss with respect to a node, materialized as zeros for
    /// nodes the loss does not depend on. Errors until backward has run.
    pub fn grad(&self, id: NodeId) -> Result<Tensor> {
        if !self.ran_backward {
            return Err(Error::MissingGradient);
        }
        let node = &self.nodes[id.0];
        Ok(match &node.grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(node.value.shape()),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::transpose(self.value(a))?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(a);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::exp);
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("exp overflowed to infinity".into()));
        }
        let rg = self.needs(a);
        Ok(self.push(value, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!(
                "log requires strictly positive inputs, got {bad}"
            )));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * v);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Square(a), rg))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() != 2 || bv.rank() != 1 || xv.cols() != bv.len() {
            return Err(Error::DimensionMismatch(format!(
                "bias_add shapes {:?} and {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (a, b) in xv.row(i).iter().zip(bv.data()) {
                data.push(a + b);
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::BiasAdd(x, bias), rg))
    }

    /// Sum of all entries, as a shape-[1] scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    /// Mean of all entries, as a shape-[1] scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = tensor::sum_axis(self.value(a), axis)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let summed = tensor::sum_axis(self.value(a), axis)?;
        let count = self.value(a).len() / summed.len();
        let value = summed.map(|v| v / count as f64);
        let rg = self.needs(a);
        Ok(self.push(value, Op::MeanAxis(a, axis), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Gather vector entries by index; indices may repeat.
    pub fn select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "select expects a vector, got {:?}",
                v.shape()
            )));
        }
        if indices.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::DimensionMismatch(format!(
                "select index {bad} out of range for length {}",
                v.len()
            )));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], data),
            Op::Select(a, indices.to_vec()),
            rg,
        ))
    }

    /// Concatenate vector nodes into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "concat expects vectors, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
            rg |= self.needs(p);
        }
        Ok(self.push(
            Tensor::from_parts(vec![data.len()], data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Propagate d(loss)/d(node) to every node the scalar loss depends on.
    /// Gradients accumulate additively across multiple uses of a node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !(shape.is_empty() || shape == [1]) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let da = tensor::matmul_nt(&g, self.value(b))?;
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db = tensor::matmul_tn(self.value(a), &g)?;
                        self.accumulate(b, db);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(a) {
                        self.accumulate(a, tensor::transpose(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da = g.zip(self.value(b), |gi, bi| gi * bi)?;
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db = g.zip(self.value(a), |gi, ai| gi * ai)?;
                        self.accumulate(b, db);
                    }
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let da = g.zip(self.value(a), |gi, ai| if ai > 0.0 { gi } else { 0.0 })?;
                    self.accumulate(a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip(&self.nodes[idx].value.clone(), |gi, yi| gi * yi)?;
                    self.accumulate(a, da);
                }
                Op::Log(a) => {
                    let da = g.zip(self.value(a), |gi, ai| gi / ai)?;
                    self.accumulate(a, da);
                }
                Op::Square(a) => {
                    let da = g.zip(self.value(a), |gi, ai| 2.0 * ai * gi)?;
                    self.accumulate(a, da);
                }
                Op::BiasAdd(x, bias) => {
                    if self.needs(x) {
                        self.accumulate(x, g.clone());
                    }
                    if self.needs(bias) {
                        self.accumulate(bias, tensor::sum_axis(&g, 0)?);
                    }
                }
                Op::Sum(a) => {
                    let da = Tensor::filled(self.value(a).shape(), g.data()[0]);
                    self.accumulate(a, da);
                }
                Op::Mean(a) => {
                    let n = self.value(a).len() as f64;
                    let da = Tensor::filled(self.value(a).shape(), g.data()[0] / n);
                    self.accumulate(a, da);
                }
                Op::SumAxis(a, axis) => {
                    let da = broadcast_axis_grad(&g, self.value(a).shape(), axis, 1.0);
                    self.accumulate(a, da);
                }
                Op::MeanAxis(a, axis) => {
                    let count = self.value(a).len() / g.len();
                    let da =
                        broadcast_axis_grad(&g, self.value(a).shape(), axis, 1.0 / count as f64);
                    self.accumulate(a, da);
                }
                Op::Reshape(a) => {
                    let da = g.reshaped(self.value(a).shape())?;
                    self.accumulate(a, da);
                }
                Op::Select(a, indices) => {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    for (pos, &i) in indices.iter().enumerate() {
                        da.data_mut()[i] += g.data()[pos];
                    }
                    self.accumulate(a, da);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            let slice = g.data()[offset..offset + len].to_vec();
                            self.accumulate(p, Tensor::from_parts(vec![len], slice));
                        }
                        offset += len;
                    }
                }
            }
        }
        self.ran_backward = true;
        Ok(())
    }
}

/// Expand an axis-reduced gradient back to the source shape, scaling each
/// broadcast copy by `scale`.
fn broadcast_axis_grad(g: &Tensor, src_shape: &[usize], axis: usize, scale: f64) -> Tensor {
    match src_shape.len() {
        1 => Tensor::filled(src_shape, g.data()[0] * scale),
        2 => {
            let (m, n) = (src_shape[0], src_shape[1]);
            let mut data = vec![0.0; m * n];
            if axis == 0 {
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = g.data()[j] * scale;
                    }
                }
            } else {
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = g.data()[i] * scale;
                    }
                }
            }
            Tensor::from_parts(src_shape.to_vec(), data)
        }
        _ => unreachable!("reductions only exist for rank 1 and 2"),
    }
}

/// Max over all coordinates of |analytic - central difference| /
/// max(1, |central difference|) for a scalar-valued graph builder. The
/// builder must be deterministic for fixed parameter values.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Domain(format!("finite difference step {step} must be > 0")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id)).collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..params[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = (grad.data()[ci] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, data: &[f64]) -> NodeId {
        g.leaf(Tensor::new(vec![data.len()], data.to_vec()).unwrap())
    }

    #[test]
    fn relu_and_exp_values() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[-1.0, 0.0, 2.0]);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = leaf(&mut g, &[0.0]);
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).data(), &[1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 0.0]);
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn reduce_values_and_grads() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0, 3.0]);
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).data(), &[6.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, &[4.0, 4.0, 4.0, 4.0]);
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn scalar_leaf_loss_grad_is_one() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[5.0]);
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn scaled_scalar_grad() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[5.0]);
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grad_before_backward_is_missing() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0]);
        assert!(matches!(g.grad(x), Err(Error::MissingGradient)));
    }

    #[test]
    fn gradients_accumulate_across_shared_paths() {
        // loss = sum(x*x_dup) + sum(x) uses x through two paths.
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.5, -2.0]);
        let sq = g.square(x).unwrap();
        let s1 = g.sum(sq).unwrap();
        let s2 = g.sum(x).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_receive_zero_grad() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2.0]);
        let c = g.constant(Tensor::scalar(7.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.5]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.0, 0.4, -0.6, 0.9, 0.2, -1.1]).unwrap();
        let err = finite_diff_check(
            |g, ids| {
                let p = g.matmul(ids[0], ids[1])?;
                g.sum(p)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn finite_diff_check_known_cases() {
        // f = sum(square(x)): analytic gradient is exact.
        let x = Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.0]).unwrap();
        let err = finite_diff_check(
            |g, ids| {
                let sq = g.square(ids[0])?;
                g.sum(sq)
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");

        // f = constant: gradient identically zero.
        let err = finite_diff_check(
            |g, ids| {
                let zero = g.constant(Tensor::scalar(0.0));
                let masked = g.mul(ids[0], zero)?;
                let s = g.sum(masked)?;
                let c = g.constant(Tensor::scalar(3.0));
                g.add(s, c)
            },
            &[Tensor::scalar(1.23)],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn select_and_concat_route_gradients() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0, 3.0]);
        let picked = g.select(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[3.0, 1.0, 3.0]);
        let y = leaf(&mut g, &[10.0]);
        let joined = g.concat(&[picked, y]).unwrap();
        let s = g.sum(joined).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 2.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[1.0]);
    }

    #[test]
    fn identical_graphs_are_bitwise_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![2, 2], vec![0.1, -0.7, 0.33, 1.9]).unwrap());
            let w = g.leaf(Tensor::new(vec![2, 2], vec![0.5, 0.25, -0.125, 2.0]).unwrap());
            let p = g.matmul(x, w).unwrap();
            let r = g.relu(p).unwrap();
            let e = g.exp(r).unwrap();
            let loss = g.mean(e).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
