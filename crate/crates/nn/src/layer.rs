use crate::error::Result;
use crate::param::{Buffer, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, activations cached for backward.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

/// A differentiable stage. `backward` consumes the activations cached by the
/// last `Mode::Train` forward, accumulates parameter gradients, and returns
/// the gradient with respect to the layer input.
pub trait Layer {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn buffers(&self) -> Vec<&Buffer> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        Vec::new()
    }

    fn clear_cache(&mut self) {}
}
