use crate::conv::conv_output_len;
use crate::error::{NnError, Result};
use crate::layer::{Layer, Mode};
use crate::tensor::Tensor;

/// Max pooling; padded cells never win. Ties go to the first cell in scan order.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(usize, [usize; 4], Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(padding * 2 <= kernel, "pool padding must be at most half the kernel");
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = input.shape();
        let (oh, ow) = match (
            conv_output_len(h, self.kernel, self.stride, self.padding),
            conv_output_len(w, self.kernel, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(NnError::Shape {
                    layer: "maxpool".into(),
                    expected: format!("spatial size of at least {}", self.kernel),
                    got: input.shape(),
                })
            }
        };
        let x = input.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane_idx in 0..n * c {
            let plane = &x[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut best, mut best_at) = (f32::NEG_INFINITY, usize::MAX);
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let at = iy as usize * w + ix as usize;
                            if best_at == usize::MAX || plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at as u32);
                }
            }
        }
        let shape = input.shape();
        self.cache = (mode == Mode::Train).then_some((oh * ow, shape, argmax));
        Tensor::from_vec([n, c, oh, ow], out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (out_plane, shape, argmax) = self.cache.take().ok_or_else(|| NnError::NoCache { layer: "maxpool".into() })?;
        if grad_output.len() != argmax.len() {
            return Err(NnError::Shape {
                layer: "maxpool".into(),
                expected: format!("gradient with {} elements", argmax.len()),
                got: grad_output.shape(),
            });
        }
        let plane = shape[2] * shape[3];
        let mut dx = vec![0.0f32; shape.iter().product()];
        for (i, (&g, &at)) in grad_output.data().iter().zip(&argmax).enumerate() {
            dx[(i / out_plane) * plane + at as usize] += g;
        }
        Tensor::from_vec(shape, dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}
