use std::collections::HashMap;

use crate::param::Param;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are skipped entirely.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2_sqrt = (1.0 - self.beta2.powi(self.step)).sqrt();
        let step_size = self.lr / bc1;
        for param in params {
            if !param.trainable || param.grad().is_empty() {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(param.name.clone())
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            let grad = param.grad().to_vec();
            for (((p, g), m), v) in param.value.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + self.eps;
                *p -= step_size * *m / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamRole;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::new("w", vec![2], 1.0, ParamRole::Bias);
        p.grad_mut().copy_from_slice(&[0.5, -3.0]);
        let mut adam = Adam::new(0.01);
        adam.step([&mut p]);
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((p.value[0] - 0.99).abs() < 1e-6);
        assert!((p.value[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_and_frozen_params_are_untouched() {
        let mut p = Param::new("w", vec![3], 0.25, ParamRole::Bias);
        p.grad_mut().copy_from_slice(&[1.0, -1.0, 7.0]);
        let mut frozen = p.clone();
        frozen.name = "f".into();
        frozen.freeze();
        let before = (p.value.clone(), frozen.value.clone());
        Adam::new(0.0).step([&mut p, &mut frozen]);
        assert_eq!(before, (p.value, frozen.value));
    }
}
