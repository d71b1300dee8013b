use crate::error::{NnError, Result};
use crate::layer::{Layer, Mode};
use crate::param::{Buffer, Param, ParamRole};
use crate::tensor::Tensor;

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased one into the running estimate with `momentum`; eval mode uses the
/// running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    shape: [usize; 4],
    normalized: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
            scale: Param::new(format!("{name}.weight"), vec![channels], 1.0, ParamRole::NormScale),
            shift: Param::new(format!("{name}.bias"), vec![channels], 0.0, ParamRole::NormShift),
            running_mean: Buffer::new(format!("{name}.running_mean"), vec![channels], 0.0),
            running_var: Buffer::new(format!("{name}.running_var"), vec![channels], 1.0),
            cache: None,
        }
    }

    fn check(&self, shape: [usize; 4]) -> Result<()> {
        if shape[1] != self.channels || shape[0] * shape[2] * shape[3] == 0 {
            return Err(NnError::Shape {
                layer: self.name.clone(),
                expected: format!("non-empty (N, {}, H, W)", self.channels),
                got: shape,
            });
        }
        Ok(())
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = input.shape();
        self.check(shape)?;
        let [n, c, h, w] = shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = input.data();
        let (mean, inv_std): (Vec<f32>, Vec<f32>) = match mode {
            Mode::Train => (0..c)
                .map(|ch| {
                    let values = || (0..n).flat_map(move |i| &x[(i * c + ch) * plane..(i * c + ch + 1) * plane]);
                    let mean = values().map(|&v| v as f64).sum::<f64>() / count;
                    let var = values().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    let m = self.momentum as f64;
                    let rm = &mut self.running_mean.value[ch];
                    *rm = ((1.0 - m) * *rm as f64 + m * mean) as f32;
                    let rv = &mut self.running_var.value[ch];
                    *rv = ((1.0 - m) * *rv as f64 + m * unbiased) as f32;
                    (mean as f32, (1.0 / (var + self.eps as f64).sqrt()) as f32)
                })
                .unzip(),
            Mode::Eval => (0..c)
                .map(|ch| {
                    let var = self.running_var.value[ch] as f64;
                    (self.running_mean.value[ch], (1.0 / (var + self.eps as f64).sqrt()) as f32)
                })
                .unzip(),
        };
        let mut normalized = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                let (g, b, m, s) = (self.scale.value[ch], self.shift.value[ch], mean[ch], inv_std[ch]);
                for ((xh, y), &v) in normalized[range.clone()].iter_mut().zip(&mut out[range.clone()]).zip(&x[range]) {
                    *xh = (v - m) * s;
                    *y = g * *xh + b;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(NormCache {
            shape,
            normalized,
            inv_std,
        });
        Tensor::from_vec(shape, out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| NnError::NoCache { layer: self.name.clone() })?;
        if grad_output.shape() != cache.shape {
            return Err(NnError::Shape {
                layer: self.name.clone(),
                expected: format!("gradient {:?}", cache.shape),
                got: grad_output.shape(),
            });
        }
        let [n, c, h, w] = cache.shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let dy = grad_output.data();
        let xh = &cache.normalized;
        let mut dx = vec![0.0f32; dy.len()];
        for ch in 0..c {
            let ranges = || (0..n).map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
            let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
            for r in ranges() {
                for (&g, &v) in dy[r.clone()].iter().zip(&xh[r]) {
                    sum_dy += g as f64;
                    sum_dy_xh += g as f64 * v as f64;
                }
            }
            if self.scale.trainable {
                self.scale.grad_mut()[ch] += sum_dy_xh as f32;
            }
            if self.shift.trainable {
                self.shift.grad_mut()[ch] += sum_dy as f32;
            }
            let k = self.scale.value[ch] as f64 * cache.inv_std[ch] as f64 / count;
            let (mean_dy, mean_dy_xh) = (sum_dy / count, sum_dy_xh / count);
            for r in ranges() {
                for ((d, &g), &v) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xh[r]) {
                    *d = (k * count * (g as f64 - mean_dy - v as f64 * mean_dy_xh)) as f32;
                }
            }
        }
        Tensor::from_vec(cache.shape, dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.scale, &self.shift]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.scale, &mut self.shift]
    }

    fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized_per_channel() {
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Tensor::from_vec([2, 2, 1, 2], vec![1., 2., 10., 10., 3., 4., 20., 30.]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let ch0: Vec<f32> = [0, 1, 4, 5].iter().map(|&i| y.data()[i]).collect();
        let mean: f32 = ch0.iter().sum::<f32>() / 4.0;
        let var: f32 = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
        // Running mean moved 10% toward the batch mean 2.5.
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn eval_with_default_stats_is_near_identity() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1., 0., 2.]).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
