use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::Scalar;
use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Maps the output gradient to one optional gradient per parent
/// (None when that parent does not need a gradient).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T: Scalar> {
    pub id: usize,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor<T>>,
    pub backward: Option<BackwardFn<T>>,
}

/// N-dimensional row-major array with an optional gradient slot.
/// Cheap to clone (shared handle); a fresh graph is built per forward pass.
pub struct Tensor<T: Scalar>(pub(crate) Rc<RefCell<Node<T>>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

fn check_shape<T: Scalar>(shape: &[usize], data: &[T]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(RefCell::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad,
            parents,
            backward,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape, &data)?;
        Ok(Self::make(shape, data, false, Vec::new(), None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape, &data)?;
        Ok(Self::make(shape, data, true, Vec::new(), None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::make(shape, vec![T::zero(); n], false, Vec::new(), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::make(vec![], vec![v], false, Vec::new(), None)
    }

    pub fn id(&self) -> usize {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.borrow().data.clone()
    }

    /// Borrow the data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.0.borrow().data)
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> T {
        let n = self.0.borrow();
        debug_assert_eq!(n.data.len(), 1);
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Replace the stored values in place (same shape required).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut n = self.0.borrow_mut();
        if data.len() != n.data.len() {
            return Err(Error::Shape(format!(
                "set_data: expected {} elements, got {}",
                n.data.len(),
                data.len()
            )));
        }
        n.data = data;
        Ok(())
    }

    /// Reverse-mode gradient propagation from a scalar loss. Gradients
    /// accumulate into every reachable `requires_grad` leaf until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {} elements",
                self.numel()
            )));
        }

        // Post-order DFS for a reverse topological order (children first
        // when reversed). Iterative to survive deep streaming graphs.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: std::collections::HashSet<usize> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = t.id();
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(id) {
                continue;
            }
            let parents = t.0.borrow().parents.clone();
            stack.push((t, true));
            for p in parents {
                if p.0.borrow().requires_grad {
                    stack.push((p, false));
                }
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let g = match grads.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            let node = t.0.borrow();
            if node.requires_grad && node.backward.is_none() {
                drop(node);
                let mut node = t.0.borrow_mut();
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => node.grad = Some(g),
                }
                continue;
            }
            if let Some(bf) = &node.backward {
                let parent_grads = bf(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        let entry = grads.entry(p.id()).or_insert_with(|| vec![T::zero(); pg.len()]);
                        for (a, b) in entry.iter_mut().zip(&pg) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// True when an op consuming these inputs must emit a backward closure.
pub(crate) fn any_requires<T: Scalar>(inputs: &[&Tensor<T>]) -> bool {
    inputs.iter().any(|t| t.0.borrow().requires_grad)
}
