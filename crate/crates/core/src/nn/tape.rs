//! Tape-recorded forward passes with reverse-mode gradients.
//!
//! A [`Tape`] records each op together with its output value. Calling
//! [`Tape::backward`] walks the record in reverse and returns a gradient for
//! every recorded node. There is no graph optimization; the networks are tiny.

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeometry};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    index: usize,
    tape: u64,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: usize, weights: usize, bias: usize, geom: ConvGeometry },
    Relu(usize),
    GlobalAvgPool(usize),
    Linear { weights: usize, bias: usize, input: usize },
    Normalize(usize),
    Dot(usize, usize),
    EmbeddingMean { table: usize, indices: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

fn next_tape_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: next_tape_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::UnknownNode(id.index));
        }
        Ok(id.index)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        let i = self.check(id)?;
        Ok(&self.nodes[i].value)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let (i, w, b) = (self.check(input)?, self.check(weights)?, self.check(bias)?);
        let out = ops::conv2d(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value, geom)?;
        Ok(self.push(Op::Conv2d { input: i, weights: w, bias: b, geom }, out))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.check(input)?;
        let out = ops::relu(&self.nodes[i].value);
        Ok(self.push(Op::Relu(i), out))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.check(input)?;
        let out = ops::global_avg_pool(&self.nodes[i].value)?;
        Ok(self.push(Op::GlobalAvgPool(i), out))
    }

    pub fn linear(&mut self, weights: NodeId, bias: NodeId, input: NodeId) -> Result<NodeId> {
        let (w, b, i) = (self.check(weights)?, self.check(bias)?, self.check(input)?);
        let out = ops::linear(&self.nodes[w].value, &self.nodes[b].value, &self.nodes[i].value)?;
        Ok(self.push(Op::Linear { weights: w, bias: b, input: i }, out))
    }

    pub fn normalize(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.check(input)?;
        let out = ops::normalize(&self.nodes[i].value)?;
        Ok(self.push(Op::Normalize(i), out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let s = ops::dot(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Dot(a, b), Tensor::from_parts(vec![1], vec![s])))
    }

    pub fn embedding_mean(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.check(table)?;
        let out = ops::embedding_mean(&self.nodes[t].value, indices)?;
        Ok(self.push(
            Op::EmbeddingMean {
                table: t,
                indices: indices.to_vec(),
            },
            out,
        ))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let out = self.check(output)?;
        self.nodes[out].value.same_shape(seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed.clone());

        for idx in (0..=out).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, weights, bias, geom } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weights].value,
                        &self.nodes[*bias].value,
                        *geom,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *weights, gw)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::Relu(input) => {
                    let gx = ops::relu_backward(&self.nodes[*input].value, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::GlobalAvgPool(input) => {
                    let gx = ops::global_avg_pool_backward(self.nodes[*input].value.shape(), &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Linear { weights, bias, input } => {
                    let (gw, gb, gx) = ops::linear_backward(
                        &self.nodes[*weights].value,
                        &self.nodes[*bias].value,
                        &self.nodes[*input].value,
                        &g,
                    )?;
                    accumulate(&mut grads, *weights, gw)?;
                    accumulate(&mut grads, *bias, gb)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Normalize(input) => {
                    let gx = ops::normalize_backward(&self.nodes[*input].value, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    let ga = self.nodes[*b].value.scale(s);
                    let gb = self.nodes[*a].value.scale(s);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::EmbeddingMean { table, indices } => {
                    let gt = ops::embedding_mean_backward(self.nodes[*table].value.shape(), indices, &g)?;
                    accumulate(&mut grads, *table, gt)?;
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients for every node recorded on a tape. Nodes downstream of the
/// seeded output (or disconnected from it) receive zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Result<&Tensor> {
        if id.tape != self.tape || id.index >= self.grads.len() {
            return Err(Error::UnknownNode(id.index));
        }
        Ok(&self.grads[id.index])
    }

    pub fn take(&mut self, id: NodeId) -> Result<Tensor> {
        if id.tape != self.tape || id.index >= self.grads.len() {
            return Err(Error::UnknownNode(id.index));
        }
        let shape = self.grads[id.index].shape().to_vec();
        Ok(std::mem::replace(&mut self.grads[id.index], Tensor::zeros(&shape)))
    }
}
