use super::{self as k, Tensor};
use crate::error::{Error, Result};
use crate::objective;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    PointwiseConv { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    GlobalAvgPool(Var),
    Reshape(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, target: usize },
    MeanOutputGap { logits: Var, a: Vec<usize>, b: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Append-only tape of differentiable operations.
///
/// Nodes are stored in creation order, which is a valid topological order
/// since an op can only reference nodes that already exist.
#[derive(Debug, Default, Clone)]
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

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Trainable leaf; always has a gradient after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = k::pointwise_conv(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push_op(Op::PointwiseConv { x, w, b }, out, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = k::relu(self.value(x));
        self.push_op(Op::Relu(x), out, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::add(self.value(a), self.value(b))?;
        Ok(self.push_op(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::sub(self.value(a), self.value(b))?;
        Ok(self.push_op(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = k::scale(self.value(x), factor);
        self.push_op(Op::Scale(x, factor), out, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = k::global_avg_pool(self.value(x))?;
        Ok(self.push_op(Op::GlobalAvgPool(x), out, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(Op::Reshape(x), out, &[x]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(k::sum_squares(self.value(x)));
        self.push_op(Op::SumSquares(x), out, &[x])
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let loss = objective::cross_entropy(self.value(logits), target)?;
        Ok(self.push_op(
            Op::CrossEntropy { logits, target },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Squared gap between the mean logit over `a` and the mean logit over
    /// `b`. With `a` empty the `a`-mean is taken as zero; with `b` empty the
    /// loss is zero.
    pub fn mean_output_gap(&mut self, logits: Var, a: Vec<usize>, b: Vec<usize>) -> Result<Var> {
        let z = self.value(logits);
        if let Some(&bad) = a.iter().chain(&b).find(|&&c| c >= z.len()) {
            return Err(Error::Index {
                index: bad,
                len: z.len(),
            });
        }
        let loss = objective::mean_output_gap(z.data(), &a, &b);
        Ok(self.push_op(
            Op::MeanOutputGap { logits, a, b },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss` node.
    ///
    /// Gradients from any earlier sweep are discarded. Every parameter ends
    /// up with a gradient of its own shape (zeros when it does not reach
    /// `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match (g, &node.op) {
                (Some(g), _) if node.requires_grad => {
                    Some(Tensor::from_parts_unchecked(node.value.shape().to_vec(), g))
                }
                (_, Op::Param) => Some(Tensor::from_parts_unchecked(
                    node.value.shape().to_vec(),
                    vec![0.0; node.value.len()],
                )),
                _ => None,
            };
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        dy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        match *op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let dc = Tensor::from_parts_unchecked(out.shape().to_vec(), dy.to_vec());
                if self.needs(a) {
                    let da = k::matmul(&dc, &k::transpose(bv)?)?;
                    self.accumulate(grads, a, da.data());
                }
                if self.needs(b) {
                    let db = k::matmul(&k::transpose(av)?, &dc)?;
                    self.accumulate(grads, b, db.data());
                }
            }
            Op::PointwiseConv { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
                let hw = xv.len() / c_in;
                if self.needs(x) {
                    let mut dx = vec![0.0f32; xv.len()];
                    for i in 0..c_in {
                        for s in 0..hw {
                            let mut acc = 0.0f64;
                            for o in 0..c_out {
                                acc += wv.data()[o * c_in + i] as f64 * dy[o * hw + s] as f64;
                            }
                            dx[i * hw + s] = acc as f32;
                        }
                    }
                    self.accumulate(grads, x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0f32; wv.len()];
                    for o in 0..c_out {
                        for i in 0..c_in {
                            let mut acc = 0.0f64;
                            for s in 0..hw {
                                acc += dy[o * hw + s] as f64 * xv.data()[i * hw + s] as f64;
                            }
                            dw[o * c_in + i] = acc as f32;
                        }
                    }
                    self.accumulate(grads, w, &dw);
                }
                if self.needs(b) {
                    let db: Vec<f32> = (0..c_out)
                        .map(|o| dy[o * hw..(o + 1) * hw].iter().map(|&g| g as f64).sum::<f64>() as f32)
                        .collect();
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, dy);
                self.accumulate(grads, b, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, dy);
                let neg: Vec<f32> = dy.iter().map(|g| -g).collect();
                self.accumulate(grads, b, &neg);
            }
            Op::Scale(x, f) => {
                let dx: Vec<f32> = dy.iter().map(|g| g * f).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(x);
                let c = out.len();
                let hw = xv.len() / c;
                let inv = 1.0 / hw as f32;
                let dx: Vec<f32> = (0..xv.len()).map(|i| dy[i / hw] * inv).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::Reshape(x) => self.accumulate(grads, x, dy),
            Op::SumSquares(x) => {
                let dx: Vec<f32> = self.value(x).data().iter().map(|v| 2.0 * v * dy[0]).collect();
                self.accumulate(grads, x, &dx);
            }
            Op::CrossEntropy { logits, target } => {
                let mut p = objective::softmax(self.value(logits).data());
                p[target] -= 1.0;
                p.iter_mut().for_each(|v| *v *= dy[0]);
                self.accumulate(grads, logits, &p);
            }
            Op::MeanOutputGap {
                logits,
                ref a,
                ref b,
            } => {
                let z = self.value(logits).data();
                let mut dz = vec![0.0f32; z.len()];
                if !b.is_empty() {
                    let mean_a = objective::mean_at(z, a);
                    let mean_b = objective::mean_at(z, b);
                    let gap = 2.0 * (mean_a - mean_b) * dy[0];
                    if !a.is_empty() {
                        let ga = gap / a.len() as f32;
                        for &c in a {
                            dz[c] += ga;
                        }
                    }
                    let gb = gap / b.len() as f32;
                    for &c in b {
                        dz[c] -= gb;
                    }
                }
                self.accumulate(grads, logits, &dz);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.push(op, value, requires_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }
}
