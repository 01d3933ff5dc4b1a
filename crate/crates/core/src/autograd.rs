//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; [`Tape::backward`]
//! walks the tape in reverse and returns gradients for the leaves that were
//! created with `requires_grad`.

use crate::error::{dim_err, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, pad: usize },
    Relu { input: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<u32> },
    Upsample2x { input: NodeId },
    Concat { a: NodeId, b: NodeId },
    CenterCrop { input: NodeId },
    Sigmoid { input: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf whose gradient is not tracked (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is returned by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Every recorded value in creation order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Consumes the tape, keeping only one node's value.
    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.nodes.swap_remove(id.0).value
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, pad: usize) -> Result<NodeId> {
        let out = ops::conv2d_forward(self.value(input), self.value(weight), self.value(bias), pad)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, pad }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu_forward(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2_forward(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, needs))
    }

    pub fn upsample2x(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::upsample2x_forward(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Upsample2x { input }, needs))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    pub fn center_crop(&mut self, input: NodeId, target_h: usize, target_w: usize) -> Result<NodeId> {
        let [_, _, h, w] = self.value(input).dims4()?;
        if (h, w) == (target_h, target_w) {
            return Ok(input);
        }
        let out = ops::center_crop_forward(self.value(input), target_h, target_w)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::CenterCrop { input }, needs))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = ops::sigmoid_forward(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Sigmoid { input }, needs)
    }

    /// Back-propagates `upstream` (the gradient of some scalar with respect
    /// to `output`) through the tape.
    pub fn backward(&self, output: NodeId, upstream: &Tensor) -> Result<Gradients> {
        if upstream.shape() != self.value(output).shape() {
            return dim_err(format!(
                "upstream gradient shape {:?} != output shape {:?}",
                upstream.shape(),
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, pad } => {
                    let cg = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        *pad,
                        &g,
                        (self.needs(*input), self.needs(*weight), self.needs(*bias)),
                    )?;
                    accumulate(&mut grads, *input, cg.input)?;
                    accumulate(&mut grads, *weight, cg.weight)?;
                    accumulate(&mut grads, *bias, cg.bias)?;
                }
                Op::Relu { input } => {
                    let d = ops::relu_backward(&node.value, &g);
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::MaxPool2 { input, argmax } => {
                    let d = ops::maxpool2_backward(self.value(*input).shape(), argmax, &g)?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::Upsample2x { input } => {
                    let d = ops::upsample2x_backward(self.value(*input).shape(), &g)?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[1];
                    let (da, db) = ops::concat_channels_backward(ca, &g)?;
                    accumulate(&mut grads, *a, self.needs(*a).then_some(da))?;
                    accumulate(&mut grads, *b, self.needs(*b).then_some(db))?;
                }
                Op::CenterCrop { input } => {
                    let d = ops::center_crop_backward(self.value(*input).shape(), &g)?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::Sigmoid { input } => {
                    let d = ops::sigmoid_backward(&node.value, &g);
                    accumulate(&mut grads, *input, Some(d))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Option<Tensor>) -> Result<()> {
    let Some(g) = g else { return Ok(()) };
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
