use crate::error::{NnError, Result};
use crate::layer::{Layer, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = input.map(|v| v.max(0.0));
        self.output = (mode == Mode::Train).then(|| out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let out = self.output.take().ok_or_else(|| NnError::NoCache { layer: "relu".into() })?;
        if out.shape() != grad_output.shape() {
            return Err(NnError::Shape {
                layer: "relu".into(),
                expected: format!("gradient {:?}", out.shape()),
                got: grad_output.shape(),
            });
        }
        let grad = grad_output
            .data()
            .iter()
            .zip(out.data())
            .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::from_vec(out.shape(), grad)
    }

    fn clear_cache(&mut self) {
        self.output = None;
    }
}
