//! Reverse-mode differentiation over a tape that is rebuilt for every
//! forward pass.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::sd::{interleave_positions, prefix_scale};
use crate::tensor::{self, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    PrefixScale { x: usize, keep: usize, scale: f64 },
    Scale(usize, f64),
    Interleave(Vec<usize>),
    Mul(usize, usize),
    Sum(usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    // whether any leaf reaches the node; constants and their descendants
    // receive no gradient
    needs_grad: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => {
                self.needs_grad[*a] || self.needs_grad[*b]
            }
            Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Scale(x, _) | Op::Sum(x) => self.needs_grad[*x],
            Op::PrefixScale { x, .. } => self.needs_grad[*x],
            Op::CrossEntropy { logits, .. } => self.needs_grad[*logits],
            Op::Interleave(xs) => xs.iter().any(|&x| self.needs_grad[x]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        NodeId(self.values.len() - 1)
    }

    /// A value that is not differentiated through (e.g. network inputs).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.needs_grad[id.0] = false;
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add_bias(&self.values[x.0], &self.values[b.0])?;
        Ok(self.push(v, Op::AddBias(x.0, b.0)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(&self.values[x.0]);
        self.push(v, Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = tensor::leaky_relu(&self.values[x.0], slope);
        self.push(v, Op::LeakyRelu(x.0, slope))
    }

    /// Keeps rows `..keep` scaled by `scale` and zeroes the rest.
    pub fn prefix_scale(&mut self, x: NodeId, keep: usize, scale: f64) -> Result<NodeId> {
        let v = prefix_scale(&self.values[x.0], keep, scale)?;
        Ok(self.push(v, Op::PrefixScale { x: x.0, keep, scale }))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.values[x.0].scale(s);
        self.push(v, Op::Scale(x.0, s))
    }

    pub fn interleave(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let inputs: Vec<&Tensor> = xs.iter().map(|id| &self.values[id.0]).collect();
        let v = crate::sd::interleave_ragged(&inputs)?;
        Ok(self.push(v, Op::Interleave(xs.iter().map(|id| id.0).collect())))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::filled(1, 1, self.values[x.0].sum());
        self.push(v, Op::Sum(x.0))
    }

    /// Mean softmax cross-entropy over the columns of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let loss = tensor::softmax_cross_entropy(&self.values[logits.0], labels)?;
        Ok(self.push(
            Tensor::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.values[loss.0].shape();
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        let needs = &self.needs_grad;
        let acc = |grads: &mut [Option<Tensor>], node: usize, g: Tensor| {
            if needs[node] {
                accumulate(grads, node, g);
            }
        };
        for node in (0..=loss.0).rev() {
            if !needs[node] {
                continue;
            }
            let Some(g) = grads[node].take() else { continue };
            match &self.ops[node] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if needs[*a] {
                        acc(&mut grads, *a, matmul_nt(&g, &self.values[*b]));
                    }
                    if needs[*b] {
                        acc(&mut grads, *b, matmul_tn(&self.values[*a], &g));
                    }
                }
                Op::AddBias(x, b) => {
                    let gb = Tensor::column((0..g.rows()).map(|r| g.row(r).iter().sum()).collect());
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g.clone());
                }
                Op::Relu(x) => {
                    let xv = &self.values[*x];
                    let gx = zip_map(&g, xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.values[*x];
                    let gx = zip_map(&g, xv, |gi, xi| if xi < 0.0 { slope * gi } else { gi });
                    acc(&mut grads, *x, gx);
                }
                Op::PrefixScale { x, keep, scale } => {
                    acc(&mut grads, *x, prefix_scale(&g, *keep, *scale)?);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s)),
                Op::Interleave(xs) => {
                    let rows: Vec<usize> = xs.iter().map(|&x| self.values[x].rows()).collect();
                    let positions = interleave_positions(&rows);
                    for (&x, pos) in xs.iter().zip(&positions) {
                        let gx = g.select(pos, &(0..g.cols()).collect::<Vec<_>>());
                        acc(&mut grads, x, gx);
                    }
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, &self.values[*b], |gi, bi| gi * bi);
                    let gb = zip_map(&g, &self.values[*a], |gi, ai| gi * ai);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(x) => {
                    let (r, c) = self.values[*x].shape();
                    acc(&mut grads, *x, Tensor::filled(r, c, g.data()[0]));
                }
                Op::CrossEntropy { logits, labels } => {
                    let mut gl = tensor::softmax_columns(&self.values[*logits]);
                    let factor = g.data()[0] / labels.len() as f64;
                    for (j, &label) in labels.iter().enumerate() {
                        gl.set(label, j, gl.get(label, j) - 1.0);
                    }
                    acc(&mut grads, *logits, gl.scale(factor));
                }
            }
            if matches!(self.ops[node], Op::Leaf) {
                grads[node] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], node: usize, g: Tensor) {
    match &mut grads[node] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros of the right shape when the
    /// loss does not reach the node.
    pub fn get_or_zeros(&self, id: NodeId, tape: &Tape) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Tensor::zeros(r, c)
        })
    }

    pub(crate) fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
