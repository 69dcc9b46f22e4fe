//! Reverse-mode pass over the recorded graph.

use std::collections::HashSet;

use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Back-propagate from this scalar loss.
    ///
    /// Every tensor with `requires_grad` reachable from the loss gets its
    /// gradient accumulated (added to whatever a previous backward left
    /// there). Non-scalar tensors and losses outside any recorded graph are
    /// usage errors.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidInput {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            return Err(Error::InvalidInput {
                op: "backward",
                msg: "loss does not depend on any tensor with requires_grad".into(),
            });
        }

        let order = topological_order(self);
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(backward_fn) = &node.inner().backward_fn {
                backward_fn(node.inner());
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Tensor::backward`].
pub fn backward<T: Element>(loss: &Tensor<T>) -> Result<()> {
    loss.backward()
}

/// Parents-before-children order over the differentiable subgraph.
///
/// Iterative DFS; the graph for a deep model overflows the stack if done
/// recursively.
fn topological_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // (node, parents already expanded?)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];

    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr_id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for parent in node.inner().parents() {
            if parent.requires_grad() && !visited.contains(&parent.ptr_id()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}
