//! Named-parameter traversal shared by every trainable block.

use crate::autodiff::Gradients;
use crate::error::Result;
use crate::tensor::Tensor;

pub trait Module {
    /// Visits every parameter tensor with its dotted name, in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Adds the gradients of one backward pass into the parameter buffers.
    fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut("", &mut |name, t| {
            if result.is_err() {
                return;
            }
            if let Some(g) = grads.named(name) {
                result = t.accumulate_grad(g);
            }
        });
        result
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
