//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in topological
//! order; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients into every parameter leaf. Parameters live outside the tape in a
//! [`ParamStore`] and are injected per pass, so a fresh tape is built for each
//! training step and dropped afterwards.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::ArrayD;

mod conv;
mod ops;
mod params;

pub use params::{BufId, ParamId, ParamStore};

/// Dense dynamic-dimensional tensor used throughout the graph.
pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackCtx<'a> {
    pub value: &'a Arr,
    pub parents: Vec<&'a Arr>,
    pub parent_needs: Vec<bool>,
}

type BackFn = Box<dyn Fn(&Arr, &BackCtx<'_>) -> Vec<Option<Arr>>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar root with respect to every parameter leaf.
pub struct Gradients {
    by_param: HashMap<usize, Arr>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.by_param.get(&id.0)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that does not require gradients (network inputs, noise, targets).
    pub fn input(&self, value: Arr) -> Var {
        self.push(value, vec![], None, None)
    }

    /// Leaf that collects gradients under the given parameter id.
    pub fn param(&self, id: ParamId, value: Arr) -> Var {
        self.push(value, vec![], Some(id), None)
    }

    /// Clone of the value held at `v`.
    pub fn value(&self, v: Var) -> Arr {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Apply `f` to the value held at `v` without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        val.iter().next().copied().unwrap()
    }

    /// Re-enters `v`'s value as a fresh leaf, cutting the gradient flow.
    pub fn stop_gradient(&self, v: Var) -> Var {
        let value = self.value(v);
        self.input(value)
    }

    pub(crate) fn push(
        &self,
        value: Arr,
        parents: Vec<usize>,
        param: Option<ParamId>,
        backward: Option<BackFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad =
            param.is_some() || (backward.is_some() && parents.iter().any(|&p| nodes[p].needs_grad));
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
            param,
        });
        Var(id)
    }

    /// Reverse pass from a scalar root. Returns gradients keyed by parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        assert_eq!(
            root_node.value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            root_node.value.shape()
        );

        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(ArrayD::ones(root_node.value.raw_dim()));

        let mut by_param: HashMap<usize, Arr> = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if let Some(pid) = node.param {
                match by_param.entry(pid.0) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &grad;
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(grad);
                    }
                }
                continue;
            }
            let Some(back) = &node.backward else {
                continue;
            };
            let ctx = BackCtx {
                value: &node.value,
                parents: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                parent_needs: node.parents.iter().map(|&p| nodes[p].needs_grad).collect(),
            };
            let parent_grads = back(&grad, &ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].needs_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape mismatch for parent node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Gradients { by_param }
    }
}
