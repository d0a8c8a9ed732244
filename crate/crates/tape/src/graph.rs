//! The tape. Every forward operation appends one node; node indices are
//! therefore already a topological order and backward is a single reverse
//! sweep.

use crate::attention::AttentionCache;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
        floor: f64,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
        width: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
        width: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLast {
        x: Var,
        width: usize,
    },
    LogSumExp {
        x: Var,
        width: usize,
    },
    Softmax {
        x: Var,
        width: usize,
        tau: f64,
    },
    LogSoftmax {
        x: Var,
        width: usize,
        tau: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        width: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        width: usize,
        norms: Vec<f64>,
    },
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Vec<f64>,
    pub shape: Vec<usize>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recorded forward computation. Not `Sync`-shared: build one graph per
/// thread.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require grad or is unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
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

    pub(crate) fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = op_parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: tensor.data().to_vec(),
            shape: tensor.shape().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(&Tensor::scalar(value))
    }

    /// Gradient stop: same values, no parents.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (value, shape) = (node.value.clone(), node.shape.clone());
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node invariant")
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| TensorError::Contract(format!("root {} not on this tape", root.0)))?;
        if root_node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            crate::backward::propagate(self, i, &upstream, &mut grads);
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Adds `f`'s contribution into the gradient buffer of `v`, allocating
    /// zeros first. No-op for nodes that do not require grad.
    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

pub(crate) fn op_parents(op: &Op) -> Vec<Var> {
    use Op::*;
    match op {
        Leaf => vec![],
        MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
        AddRow { x, row } => vec![*x, *row],
        Transpose { x, .. }
        | Reshape { x }
        | Affine { x, .. }
        | Gelu { x }
        | Relu { x }
        | Sigmoid { x }
        | Exp { x }
        | Log { x, .. }
        | Pick { x, .. }
        | Sum { x }
        | Mean { x }
        | SumLast { x, .. }
        | LogSumExp { x, .. }
        | Softmax { x, .. }
        | LogSoftmax { x, .. }
        | Dropout { x, .. }
        | NormalizeRows { x, .. } => vec![*x],
        GatherRows { table, .. } => vec![*table],
        ConcatRows { parts } => parts.clone(),
        LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Attention(cache) => vec![cache.q, cache.k, cache.v],
    }
}
