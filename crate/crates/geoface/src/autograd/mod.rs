//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure mapping the output cotangent to input cotangents. Calling
//! [`Graph::backward`] walks the tape once in reverse. Nodes that do not depend
//! on any differentiable leaf keep no closure, so constants cost nothing on the
//! way back.

mod conv;
mod elementwise;
mod reduce;
mod shape;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

pub use shape::{broadcast_shape, sum_to_shape};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Rc::new(value), false)
    }

    /// A differentiable leaf.
    pub fn variable(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Rc::new(value), true)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn variable_rc(&self, value: Rc<Tensor<T>>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Re-enters `v` as a constant, cutting every gradient path through it.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant_rc(value)
    }

    /// Records an operation. `backward` receives the output cotangent and
    /// returns one optional cotangent per parent, in order.
    pub fn push_op(
        &self,
        value: Rc<Tensor<T>>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `root`. Cotangents are retained for
    /// differentiable leaves only.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must hold a single element, got shape {:?}",
            nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "cotangent shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf cotangents produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central-difference check of `f` w.r.t. every element of `x`.
    pub fn check_gradient(
        x: &Tensor<f64>,
        f: impl Fn(&Graph<f64>, Var) -> Var,
        h: f64,
        rtol: f64,
    ) {
        let g = Graph::new();
        let xv = g.variable(x.clone());
        let y = f(&g, xv);
        let analytic = g
            .backward(y)
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        for i in 0..x.len() {
            let eval = |d: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += d;
                let g = Graph::new();
                let xv = g.constant(xp);
                g.value(f(&g, xv)).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-6);
            assert!(
                err <= rtol,
                "element {i}: analytic {a} vs numeric {numeric} (rel err {err})"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_have_no_gradient_path() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(1.5));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn detach_cuts_path() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        assert_eq!(g.backward(y).get(x).unwrap().item(), 2.0);
    }
}
