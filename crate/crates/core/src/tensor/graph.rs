use crate::error::{Error, Result};

use super::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    PairDistance {
        input: Var,
        pairs: Vec<(usize, usize)>,
        squared: bool,
    },
    Distance(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Tape of operations for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; backward walks it in reverse exactly once.
#[derive(Debug)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            check_finite: false,
        }
    }

    /// Graph whose ops fail when finite inputs produce a non-finite output.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    ///
    /// Leaves the loss does not depend on get an all-zero gradient.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[var.0];
        if !self.consumed || !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let data = match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![T::zero(); node.value.numel()],
        };
        Some(Tensor {
            shape: node.value.shape().to_vec(),
            data,
        })
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            return Err(Error::invalid(
                "graph",
                format!("{} produced a non-finite value from finite inputs", op_name(&op)),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(Error::Detached);
        }
        self.consumed = true;

        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop(nodes, grads, node, &g);
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddBias(..) => "add_bias",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(..) => "relu",
        Op::BatchNorm { .. } => "batch_norm",
        Op::MaxPool { .. } => "global_max_pool",
        Op::AvgPool(..) => "global_avg_pool",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::PairDistance { .. } => "pair_distances",
        Op::Distance(..) => "euclidean_distance",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}

/// Gradient buffer of `var`, allocated on first use; `None` if it needs no gradient.
fn accumulate<'g, T: Element>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    var: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[var.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn backprop<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * o;
                }
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * o;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = accumulate(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            let width = nodes[b.0].value.numel();
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for row in g.chunks_exact(width) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ashape, bshape) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accumulate(nodes, grads, *a) {
                // dA = G · Bᵀ
                T::gemm(m, n, k, g, (n, 1), bv, (1, n), ga, (k, 1), true);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                // dB = Aᵀ · G
                T::gemm(k, m, n, av, (1, k), g, (n, 1), gb, (n, 1), true);
            }
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            pad,
        } => {
            let geom = super::ops::ConvGeom::new(
                nodes[input.0].value.shape(),
                nodes[weight.0].value.shape(),
                *stride,
                *pad,
            )
            .expect("conv geometry validated in forward");
            let (xv, wv) = (val(*input), val(*weight));
            if let Some(gx) = accumulate(nodes, grads, *input) {
                geom.backward_input(g, wv, gx);
            }
            if let Some(gw) = accumulate(nodes, grads, *weight) {
                geom.backward_weight(g, xv, gw);
            }
        }
        Op::Relu(a) => {
            let out = node.value.data();
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *d += s;
                    }
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = nodes[input.0].value.shape();
            let (outer, channels, inner) = super::ops::channel_layout(shape);
            let gam = val(*gamma);
            let count = T::lit((outer * inner) as f64);
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    for i in base..base + inner {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(gg) = accumulate(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = accumulate(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        let scale = gam[c] * inv_std[c];
                        for i in base..base + inner {
                            gx[i] += if *train {
                                scale / count * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c])
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for (&idx, &s) in argmax.iter().zip(g) {
                    gx[idx] += s;
                }
            }
        }
        Op::AvgPool(input) => {
            let shape = nodes[input.0].value.shape();
            let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
            let inv = T::one() / T::lit(plane as f64);
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for (o, &s) in g.iter().enumerate() {
                    gx[o * plane..(o + 1) * plane]
                        .iter_mut()
                        .for_each(|d| *d += s * inv);
                }
            }
        }
        Op::Narrow { input, axis, start } => {
            let in_shape = nodes[input.0].value.shape();
            let len = node.value.shape()[*axis];
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let size = in_shape[*axis];
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst_start = (o * size + start) * inner;
                    gx[dst_start..dst_start + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for v in inputs {
                let size = nodes[v.0].value.shape()[*axis];
                if let Some(gx) = accumulate(nodes, grads, *v) {
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        gx[o * size * inner..(o + 1) * size * inner]
                            .iter_mut()
                            .zip(&g[src_start..src_start + size * inner])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                offset += size;
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            let rows = labels.len();
            let classes = probs.len() / rows;
            let scale = g[0] / T::lit(rows as f64);
            if let Some(gl) = accumulate(nodes, grads, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::PairDistance {
            input,
            pairs,
            squared,
        } => {
            let xv = val(*input);
            let dim = nodes[input.0].value.shape()[1];
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let (xi, xj) = (&xv[i * dim..(i + 1) * dim], &xv[j * dim..(j + 1) * dim]);
                    let coef = if *squared {
                        T::lit(2.0) * g[p]
                    } else {
                        let ss: T = xi.iter().zip(xj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                        g[p] / (ss + T::lit(super::ops::DISTANCE_EPS)).sqrt()
                    };
                    for k in 0..dim {
                        let d = coef * (xi[k] - xj[k]);
                        gx[i * dim + k] += d;
                        gx[j * dim + k] -= d;
                    }
                }
            }
        }
        Op::Distance(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ss: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
            let coef = g[0] / (ss + T::lit(super::ops::DISTANCE_EPS)).sqrt();
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                    *d += coef * (x - y);
                }
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                    *d -= coef * (x - y);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = T::lit(nodes[a.0].value.numel() as f64);
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
    }
}
