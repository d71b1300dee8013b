//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::error::{NnError, Result};
use crate::gemm::matmul;
use crate::layer::{Layer, Mode};
use crate::param::{Param, ParamRole};
use crate::tensor::Tensor;

/// Sliding-window geometry of a plain convolution from `in_*` to `out_*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    fn rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns `ox` whose input column `ox * stride + kx - padding`
    /// lies inside the input, for stride 1.
    fn valid_cols_unit_stride(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx).min(self.out_w);
        let hi = (self.in_w + self.padding).saturating_sub(kx).min(self.out_w);
        (lo, hi.max(lo))
    }
}

/// Conv output extent, or `None` when the padded input is smaller than the kernel.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

/// Transposed-conv output extent: `(input - 1) * stride - 2 * padding + kernel + output_padding`.
pub fn conv_transpose_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel + output_padding).checked_sub(2 * padding)
}

/// Unfolds `channels` planes of `in_h x in_w` into a `(channels * k * k) x (out_h * out_w)` matrix.
pub(crate) fn im2col(src: &[f32], channels: usize, win: &Window, cols: &mut [f32]) {
    let Window {
        kernel: k,
        stride: s,
        padding: p,
        in_h,
        in_w,
        out_h,
        out_w,
    } = *win;
    let positions = win.positions();
    for c in 0..channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row_start = ((c * k + ky) * k + kx) * positions;
                let row = &mut cols[row_start..row_start + positions];
                for oy in 0..out_h {
                    let dst = &mut row[oy * out_w..(oy + 1) * out_w];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= in_h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                    if s == 1 {
                        let (lo, hi) = win.valid_cols_unit_stride(kx);
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(&src_row[lo + kx - p..hi + kx - p]);
                        dst[hi..].fill(0.0);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *d = if ix >= 0 && (ix as usize) < in_w {
                                src_row[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds the column matrix back onto the planes.
pub(crate) fn col2im(cols: &[f32], channels: usize, win: &Window, dst: &mut [f32]) {
    let Window {
        kernel: k,
        stride: s,
        padding: p,
        in_h,
        in_w,
        out_h,
        out_w,
    } = *win;
    let positions = win.positions();
    for c in 0..channels {
        let plane = &mut dst[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row_start = ((c * k + ky) * k + kx) * positions;
                let row = &cols[row_start..row_start + positions];
                for oy in 0..out_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= in_h {
                        continue;
                    }
                    let src = &row[oy * out_w..(oy + 1) * out_w];
                    let plane_row = &mut plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                    if s == 1 {
                        let (lo, hi) = win.valid_cols_unit_stride(kx);
                        for (d, v) in plane_row[lo + kx - p..hi + kx - p].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < in_w {
                                plane_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(grad_out: &[f32], bias_grad: &mut [f32], plane: usize) {
    for (chunk, g) in grad_out.chunks(plane).zip(bias_grad.iter_mut()) {
        *g += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
}

/// Standard 2-D convolution, weight layout `(out, in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "{name}: kernel and stride must be positive");
        let fan_in = in_channels * kernel * kernel;
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                0.0,
                ParamRole::Kernel { fan_in },
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), vec![out_channels], 0.0, ParamRole::Bias)),
            cache: None,
        }
    }

    fn window(&self, input: &Tensor) -> Result<Window> {
        let [_, c, h, w] = input.shape();
        let out_h = conv_output_len(h, self.kernel, self.stride, self.padding);
        let out_w = conv_output_len(w, self.kernel, self.stride, self.padding);
        match (c == self.in_channels, out_h, out_w) {
            (true, Some(out_h), Some(out_w)) => Ok(Window {
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
                in_h: h,
                in_w: w,
                out_h,
                out_w,
            }),
            _ => Err(NnError::Shape {
                layer: self.name.clone(),
                expected: format!(
                    "(N, {}, H, W) with H, W + 2*{} >= {}",
                    self.in_channels, self.padding, self.kernel
                ),
                got: input.shape(),
            }),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let win = self.window(input)?;
        let n = input.batch();
        let rows = win.rows(self.in_channels);
        let positions = win.positions();
        let mut out = Tensor::zeros([n, self.out_channels, win.out_h, win.out_w]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * positions] };
        let out_len = self.out_channels * positions;
        let out_data = out.data_mut();
        for i in 0..n {
            let x = input.item(i);
            let b: &[f32] = if self.is_pointwise() {
                x
            } else {
                im2col(x, self.in_channels, &win, &mut cols);
                &cols
            };
            let y = &mut out_data[i * out_len..(i + 1) * out_len];
            matmul(self.out_channels, rows, positions, &self.weight.value, false, b, false, y, false);
            if let Some(bias) = &self.bias {
                add_bias(y, &bias.value, positions);
            }
        }
        self.cache = (mode == Mode::Train).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| NnError::NoCache { layer: self.name.clone() })?;
        let win = self.window(&input)?;
        let n = input.batch();
        if grad_output.shape() != [n, self.out_channels, win.out_h, win.out_w] {
            return Err(NnError::Shape {
                layer: self.name.clone(),
                expected: format!("gradient ({n}, {}, {}, {})", self.out_channels, win.out_h, win.out_w),
                got: grad_output.shape(),
            });
        }
        let rows = win.rows(self.in_channels);
        let positions = win.positions();
        let pointwise = self.is_pointwise();
        let mut grad_input = Tensor::zeros(input.shape());
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * positions] };
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; rows * positions] };
        let item_len = input.item_len();
        let gi = grad_input.data_mut();
        for i in 0..n {
            let x = input.item(i);
            let dy = grad_output.item(i);
            if self.weight.trainable {
                let b: &[f32] = if pointwise {
                    x
                } else {
                    im2col(x, self.in_channels, &win, &mut cols);
                    &cols
                };
                matmul(self.out_channels, positions, rows, dy, false, b, true, self.weight.grad_mut(), true);
            }
            if let Some(bias) = self.bias.as_mut().filter(|b| b.trainable) {
                accumulate_bias_grad(dy, bias.grad_mut(), positions);
            }
            let dx = &mut gi[i * item_len..(i + 1) * item_len];
            if pointwise {
                matmul(rows, self.out_channels, positions, &self.weight.value, true, dy, false, dx, false);
            } else {
                matmul(rows, self.out_channels, positions, &self.weight.value, true, dy, false, &mut dcols, false);
                col2im(&dcols, self.in_channels, &win, dx);
            }
        }
        Ok(grad_input)
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Transposed convolution ("deconvolution"), weight layout `(in, out, k, k)`.
///
/// Output extent is `(H - 1) * stride - 2 * padding + kernel + output_padding`;
/// with kernel 3, stride 2, padding 1 an `output_padding` of 1 doubles `H` exactly.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "{name}: kernel and stride must be positive");
        assert!(output_padding < stride, "{name}: output padding must be smaller than the stride");
        let fan_in = in_channels * kernel * kernel;
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: Param::new(
                format!("{name}.weight"),
                vec![in_channels, out_channels, kernel, kernel],
                0.0,
                ParamRole::Kernel { fan_in },
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), vec![out_channels], 0.0, ParamRole::Bias)),
            cache: None,
        }
    }

    /// Geometry of the adjoint convolution: from the (large) output back to the input.
    fn window(&self, input: &Tensor) -> Result<Window> {
        let [_, c, h, w] = input.shape();
        let size = |len| conv_transpose_output_len(len, self.kernel, self.stride, self.padding, self.output_padding);
        match (c == self.in_channels && h > 0 && w > 0, size(h), size(w)) {
            (true, Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(Window {
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
                in_h: out_h,
                in_w: out_w,
                out_h: h,
                out_w: w,
            }),
            _ => Err(NnError::Shape {
                layer: self.name.clone(),
                expected: format!("(N, {}, H, W) with positive output extent", self.in_channels),
                got: input.shape(),
            }),
        }
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let win = self.window(input)?;
        let n = input.batch();
        let rows = win.rows(self.out_channels);
        let positions = win.positions();
        let plane = win.in_h * win.in_w;
        let mut out = Tensor::zeros([n, self.out_channels, win.in_h, win.in_w]);
        let mut cols = vec![0.0; rows * positions];
        let out_len = self.out_channels * plane;
        let out_data = out.data_mut();
        for i in 0..n {
            matmul(rows, self.in_channels, positions, &self.weight.value, true, input.item(i), false, &mut cols, false);
            let y = &mut out_data[i * out_len..(i + 1) * out_len];
            col2im(&cols, self.out_channels, &win, y);
            if let Some(bias) = &self.bias {
                add_bias(y, &bias.value, plane);
            }
        }
        self.cache = (mode == Mode::Train).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| NnError::NoCache { layer: self.name.clone() })?;
        let win = self.window(&input)?;
        let n = input.batch();
        if grad_output.shape() != [n, self.out_channels, win.in_h, win.in_w] {
            return Err(NnError::Shape {
                layer: self.name.clone(),
                expected: format!("gradient ({n}, {}, {}, {})", self.out_channels, win.in_h, win.in_w),
                got: grad_output.shape(),
            });
        }
        let rows = win.rows(self.out_channels);
        let positions = win.positions();
        let plane = win.in_h * win.in_w;
        let mut grad_input = Tensor::zeros(input.shape());
        let mut cols = vec![0.0; rows * positions];
        let item_len = input.item_len();
        let gi = grad_input.data_mut();
        for i in 0..n {
            let dy = grad_output.item(i);
            im2col(dy, self.out_channels, &win, &mut cols);
            if self.weight.trainable {
                matmul(self.in_channels, positions, rows, input.item(i), false, &cols, true, self.weight.grad_mut(), true);
            }
            if let Some(bias) = self.bias.as_mut().filter(|b| b.trainable) {
                accumulate_bias_grad(dy, bias.grad_mut(), plane);
            }
            let dx = &mut gi[i * item_len..(i + 1) * item_len];
            matmul(self.in_channels, rows, positions, &self.weight.value, false, &cols, false, dx, false);
        }
        Ok(grad_input)
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formulas() {
        assert_eq!(conv_output_len(224, 3, 2, 1), Some(112));
        assert_eq!(conv_output_len(7, 3, 1, 1), Some(7));
        assert_eq!(conv_output_len(1, 3, 1, 0), None);
        // Without output padding a k3/s2/p1 deconvolution gives 2H - 1.
        assert_eq!(conv_transpose_output_len(7, 3, 2, 1, 0), Some(13));
        assert_eq!(conv_transpose_output_len(7, 3, 2, 1, 1), Some(14));
        assert_eq!(conv_transpose_output_len(14, 2, 2, 0, 0), Some(28));
        assert_eq!(conv_transpose_output_len(7, 3, 1, 1, 0), Some(7));
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        for (k, s, p, h, w) in [(3, 1, 1, 5, 4), (3, 2, 1, 6, 7), (2, 2, 0, 4, 4), (7, 2, 3, 9, 9), (1, 1, 0, 3, 3)] {
            let out_h = conv_output_len(h, k, s, p).unwrap();
            let out_w = conv_output_len(w, k, s, p).unwrap();
            let win = Window { kernel: k, stride: s, padding: p, in_h: h, in_w: w, out_h, out_w };
            let channels = 2;
            let x: Vec<f32> = (0..channels * h * w).map(|v| ((v * 7) % 11) as f32 - 5.0).collect();
            let c: Vec<f32> = (0..win.rows(channels) * win.positions()).map(|v| ((v * 3) % 7) as f32 - 3.0).collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, channels, &win, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, channels, &win, &mut back);
            let lhs: f32 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut conv = Conv2d::new("c", 3, 4, 3, 1, 1, true);
        let err = conv.forward(&Tensor::zeros([1, 2, 5, 5]), Mode::Eval).unwrap_err();
        assert!(matches!(err, NnError::Shape { .. }));
    }

    #[test]
    fn backward_without_training_forward_fails() {
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, true);
        let x = Tensor::zeros([1, 1, 4, 4]);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert!(matches!(conv.backward(&y), Err(NnError::NoCache { .. })));
    }
}
