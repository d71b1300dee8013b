/// What a parameter is for; drives initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Convolution or transposed-convolution kernel with its fan-in
    /// (`in_channels * kernel * kernel`).
    Kernel { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
}

/// A learnable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub role: ParamRole,
    pub trainable: bool,
    grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: f32, role: ParamRole) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![init; len],
            role,
            trainable: true,
            grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Accumulated gradient; empty until the first backward pass touches it.
    pub fn grad(&self) -> &[f32] {
        &self.grad
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Marks the parameter frozen and releases its gradient storage.
    pub fn freeze(&mut self) {
        self.trainable = false;
        self.grad = Vec::new();
    }
}

/// Non-learnable state saved with a model (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

impl Buffer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: f32) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![init; len],
        }
    }
}
