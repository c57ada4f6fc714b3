//! Reverse-mode differentiable tensor core.
//!
//! Nodes are appended in topological order onto a shared tape; values are
//! computed eagerly in float64 and each op registers a closure that folds
//! its output gradient into its parents' buffers.

pub(crate) mod ops;
mod mlstm;


pub use mlstm::{
    mlstm_sequence, mlstm_sequence_layer, mlstm_step, MlstmBlockParams, MlstmCellWeights,
    MlstmLayerParams, MlstmState,
};
pub use ops::{
    adaptive_avg_pool3d, add, concat_vecs, conv3d, exp, l2_normalize, layer_norm, linear, log,
    gather_rows, mean_pool, mul_same, permute, relu, reshape, scale, sigmoid,
};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut [Option<Vec<f64>>])>;

struct Node {
    is_param: bool,
    backward: Option<BackwardFn>,
}

#[derive(Clone, Default)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to a value on the tape. Values are immutable once created.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.value[0]
    }

    pub(crate) fn graph(&self) -> &Graph {
        &self.graph
    }

    pub(crate) fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.value)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that does not receive gradients (inputs, targets).
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        self.push_node(shape, data, false, false, None)
    }

    /// Leaf that accumulates gradients during `backward`.
    pub fn param(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        self.push_node(shape, data, true, true, None)
    }

    pub(crate) fn push_node(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        is_param: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let expected: usize = shape.iter().product();
        debug_assert_eq!(expected, data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { is_param, backward });
        Tensor {
            graph: self.clone(),
            id,
            shape,
            value: Rc::new(data),
            requires_grad,
        }
    }

    /// Reverse pass from a scalar loss. Returns per-node gradient buffers for
    /// parameter leaves; interior buffers are freed as soon as they are
    /// consumed.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            if let Some(bwd) = &node.backward {
                let gout = grads[id].take().expect("checked above");
                let (before, _) = grads.split_at_mut(id);
                bwd(&gout, before);
            } else if !node.is_param {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}

/// Lazily materialize a parent gradient buffer and return it for accumulation.
pub(crate) fn acc_grad<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
    len: usize,
) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

/// Compare reverse-mode gradients against central finite differences over
/// every coordinate of every leaf. Returns the maximum relative error, with
/// the denominator floored to keep near-zero gradients meaningful.
pub fn grad_check<F>(build: F, leaves: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let graph = Graph::new();
        let tensors: Vec<Tensor> = leaves
            .iter()
            .zip(values)
            .map(|((shape, _), vals)| graph.param(shape.clone(), vals.clone()))
            .collect();
        let loss = build(&graph, &tensors)?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar objective, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(loss.scalar())
    };

    // analytic gradients at the base point
    let graph = Graph::new();
    let tensors: Vec<Tensor> = leaves
        .iter()
        .map(|(shape, vals)| graph.param(shape.clone(), vals.clone()))
        .collect();
    let loss = build(&graph, &tensors)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar objective, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = graph.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut base: Vec<Vec<f64>> = leaves.iter().map(|(_, v)| v.clone()).collect();
    let mut max_rel = 0.0f64;
    for li in 0..leaves.len() {
        for j in 0..base[li].len() {
            let orig = base[li][j];
            base[li][j] = orig + eps;
            let plus = eval(&base)?;
            base[li][j] = orig - eps;
            let minus = eval(&base)?;
            base[li][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[li][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
