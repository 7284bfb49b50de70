//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns a [`Gradients`] table indexed by node.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvSpec, Tensor};

/// Lower/upper probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceBatch(NodeId, usize),
    Resize(NodeId),
    Sigmoid(NodeId),
    /// Summed binary cross-entropy of a probability map against a fixed target.
    CrossEntropy {
        prob: NodeId,
        target: Tensor,
    },
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf holding a copy of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let value = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(value, Op::Conv { x, w, b, spec }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn max_pool3(&mut self, x: NodeId) -> NodeId {
        let (value, argmax) = tensor::max_pool3(self.value(x));
        self.push(value, Op::MaxPool { x, argmax })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Concatenate along the batch axis.
    pub fn stack_batch(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, 0)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, 1)
    }

    fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&values, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice_batch(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(x);
        if index >= t.batch() {
            return Err(Error::Shape(format!(
                "batch index {index} out of range for batch of {}",
                t.batch()
            )));
        }
        let value = t.slice_batch(index);
        Ok(self.push(value, Op::SliceBatch(x, index)))
    }

    pub fn resize_bilinear(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        let t = self.value(x);
        if (t.height(), t.width()) == (height, width) {
            return x;
        }
        let value = tensor::resize_bilinear(t, height, width);
        self.push(value, Op::Resize(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `-Σ [g log s + (1 - g) log(1 - s)]` with `s` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`. The clamp shapes the value only; the
    /// gradient is that of the unclamped expression evaluated at the clamped
    /// point.
    pub fn cross_entropy(&mut self, prob: NodeId, target: &Tensor) -> Result<NodeId> {
        let s = self.value(prob);
        s.expect_same_shape(target)?;
        let loss = binary_cross_entropy_sum(s.data(), target.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                prob,
                target: target.clone(),
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, spec } => {
                    let (gx, gw, gb) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), &g, *spec)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let dst = gx.data_mut();
                    for (&i, &d) in argmax.iter().zip(g.data()) {
                        dst[i as usize] += d;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |d, v| d * v)?;
                    let gb = g.zip_map(self.value(*a), |d, v| d * v)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, g.map(|d| d * f));
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let piece = if *axis == 0 {
                            let len: usize = shape.iter().product();
                            let start = offset * shape[1] * shape[2] * shape[3];
                            Tensor::from_vec(shape, g.data()[start..start + len].to_vec())?
                        } else {
                            g.narrow_channels(offset, shape[1])
                        };
                        offset += shape[*axis];
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::SliceBatch(x, index) => {
                    let shape = self.value(*x).shape();
                    let mut gx = Tensor::zeros(shape);
                    let len = shape[1] * shape[2] * shape[3];
                    gx.data_mut()[index * len..(index + 1) * len].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Resize(x) => {
                    let t = self.value(*x);
                    let gx = tensor::resize_bilinear_backward(&g, t.height(), t.width());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |d, s| d * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { prob, target } => {
                    let d = g.item();
                    let s = self.value(*prob);
                    let gs = s.zip_map(target, |s, t| {
                        let s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        d * ((1.0 - t) / (1.0 - s) - t / s)
                    })?;
                    accumulate(&mut grads, *prob, gs);
                }
                Op::Sum(x) => {
                    let d = g.item();
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), d));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Parameter ids referenced by leaves of this graph, with their nodes.
    fn param_nodes(&self) -> impl Iterator<Item = (NodeId, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(p) => Some((NodeId(i), p)),
            _ => None,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Summed binary cross-entropy with probability clamping.
pub fn binary_cross_entropy_sum(prob: &[f64], target: &[f64]) -> f64 {
    prob.iter()
        .zip(target)
        .map(|(&s, &g)| {
            let s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(g * s.ln() + (1.0 - g) * (1.0 - s).ln())
        })
        .sum()
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf (input or parameter) node.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient per parameter, summed over every leaf that references it.
    /// Parameters the loss does not depend on are absent.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (node, pid) in graph.param_nodes() {
            let Some(g) = self.get(node) else { continue };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((pid, g.clone())),
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
