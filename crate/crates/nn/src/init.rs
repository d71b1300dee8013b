use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::param::{Param, ParamRole};

/// Standard deviation of the normal draw used for biases.
pub const BIAS_STD: f32 = 0.01;

/// Largest `f32` not above `1 / sqrt(fan_in)`, so sampled kernels respect the
/// bound even when compared in double precision.
pub fn uniform_bound(fan_in: usize) -> f32 {
    let exact = 1.0 / (fan_in as f64).sqrt();
    let bound = exact as f32;
    if bound as f64 > exact {
        bound.next_down()
    } else {
        bound
    }
}

/// Initializes trainable parameters in place: kernels ~ U(-1/sqrt(n), 1/sqrt(n))
/// with `n` the fan-in, biases ~ N(0, [`BIAS_STD`]), normalization scale 1 and
/// shift 0. Frozen parameters are left alone.
pub fn init_uniform_fan_in<'a, R: Rng + ?Sized>(params: impl IntoIterator<Item = &'a mut Param>, rng: &mut R) {
    let bias = Normal::new(0.0f32, BIAS_STD).expect("positive std");
    for param in params.into_iter().filter(|p| p.trainable) {
        match param.role {
            ParamRole::Kernel { fan_in } => {
                let bound = uniform_bound(fan_in.max(1));
                param.value.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
            }
            ParamRole::Bias => param.value.iter_mut().for_each(|b| *b = bias.sample(rng)),
            ParamRole::NormScale => param.value.fill(1.0),
            ParamRole::NormShift => param.value.fill(0.0),
        }
    }
}
