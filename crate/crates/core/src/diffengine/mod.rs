//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every array created during a forward pass. Operations
//! append a node holding the result and whatever the backward rule needs;
//! [`Tape::backward`] walks the nodes in reverse and fills
//! [`DiffArray::grad`] on every `requires_grad` leaf that the loss reaches.
//!
//! ```
//! use evgraph::diffengine::{DiffArray, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(DiffArray::vector(vec![1.0, 2.0]).requires_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};

pub mod kernels;
mod ops;

pub use ops::KernelEntry;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(DiffArray {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DiffArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut a = Self::zeros(shape);
        a.data.fill(value);
        a
    }

    pub fn scalar(v: f64) -> Self {
        DiffArray {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        DiffArray {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Handle to an array recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Powf(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad(Var, Vec<(usize, usize)>),
    Gather(Var, Rc<[usize]>),
    IndexAdd(Var, Rc<[usize]>),
    ScatterMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reduce {
        x: Var,
        map: Vec<usize>,
        scale: f64,
    },
    ReduceVar {
        x: Var,
        map: Vec<usize>,
        mean: Vec<f64>,
        count: f64,
    },
    Broadcast {
        x: Var,
        map: Vec<usize>,
    },
    KernelAggregate {
        x: Var,
        w: Var,
        entries: Rc<[KernelEntry]>,
    },
    Conv3d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
        geom: ops::Conv3dGeom,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: DiffArray,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation. Single-threaded; build one tape per pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, mut value: DiffArray) -> Var {
        value.grad = None;
        let needs_grad = value.requires_grad;
        self.push(value, Op::Leaf, needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(DiffArray::new(shape.to_vec(), data)?))
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of the last [`backward`](Tape::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: DiffArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = DiffArray {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(value, op, needs_grad)
    }

    /// Back-propagates from a scalar `loss`, overwriting the gradients of
    /// every `requires_grad` leaf (leaves the loss does not reach get `None`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            if !self.nodes[k].needs_grad {
                continue;
            }
            if matches!(self.nodes[k].op, Op::Leaf) {
                grads[k] = Some(g);
                continue;
            }
            ops::backward(self, k, &g, &mut grads);
        }
        for (k, node) in self.nodes.iter_mut().enumerate() {
            if node.value.requires_grad {
                node.value.grad = grads.get_mut(k).and_then(Option::take);
            }
        }
        Ok(())
    }

    pub(crate) fn node_value(&self, k: usize) -> &DiffArray {
        &self.nodes[k].value
    }

    pub(crate) fn node_op(&self, k: usize) -> &Op {
        &self.nodes[k].op
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

pub(crate) fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}
