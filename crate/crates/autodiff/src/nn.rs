//! Named parameter storage and the small layer types the models are built
//! from. Layers hold [`ParamId`]s; a [`Binding`] maps those ids onto graph
//! nodes for one forward pass.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable references to the listed parameters in ascending id order,
    /// the order an optimizer built from the same sorted id list expects.
    pub fn tensors_mut_for(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut wanted = vec![false; self.tensors.len()];
        for id in ids {
            wanted[id.0] = true;
        }
        self.tensors
            .iter_mut()
            .zip(wanted)
            .filter_map(|(t, w)| w.then_some(t))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(AutodiffError::DataLength {
                expected: self.tensors.len(),
                actual: values.len(),
            });
        }
        for (old, new) in self.tensors.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "load_values",
                    left: old.shape(),
                    right: new.shape(),
                });
            }
        }
        self.tensors = values;
        Ok(())
    }

    /// Adds every parameter to `graph`: as a differentiable leaf when
    /// `trainable(id)` holds, otherwise as a constant.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(ParamId) -> bool) -> Binding {
        let nodes = self
            .ids()
            .map(|id| {
                let value = self.tensors[id.0].clone();
                if trainable(id) {
                    graph.leaf(value)
                } else {
                    graph.input(value)
                }
            })
            .collect();
        Binding { nodes }
    }

    /// Reads gradients for `ids` out of a graph after `backward`. Parameters
    /// the loss did not reach get zeros.
    pub fn collect_grads(&self, graph: &Graph, binding: &Binding, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter()
            .map(|&id| match graph.grad(binding.node(id)) {
                Some(g) => g.clone(),
                None => {
                    let t = &self.tensors[id.0];
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
    }
}

/// Graph nodes for the parameters of a [`ParamStore`] in one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    /// Binding whose `i`-th parameter is `nodes[i]`.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Xavier/Glorot uniform initialization for a `fan_in x fan_out` matrix,
/// rounded to `f32` precision.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, b.node(self.weight))?;
        g.add_row(h, b.node(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
}

/// One-hidden-layer perceptron: `Linear -> activation -> Linear`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng);
        let output = Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng);
        Self {
            hidden,
            output,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, b, x)?;
        let h = match self.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Tanh => g.tanh(h),
        };
        self.output.forward(g, b, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.output.weight,
            self.output.bias,
        ]
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }
}
