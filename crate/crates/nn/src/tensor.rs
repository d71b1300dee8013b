use std::sync::Arc;

use crate::error::{NnError, Result};

/// Dense NCHW `f32` tensor with copy-on-write storage.
///
/// Cloning is cheap: layers cache their inputs by cloning the handle, and the
/// buffer is only duplicated when somebody mutates a shared tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: Arc::new(vec![0.0; shape.iter().product()]),
        }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: Arc::new(vec![value; shape.iter().product()]),
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NnError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one `(C, H, W)` item of the batch.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Channel-wise concatenation `[self, other]`.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let [n, c1, h, w] = self.shape;
        let [n2, c2, h2, w2] = other.shape;
        if n != n2 || h != h2 || w != w2 {
            return Err(NnError::Concat {
                left: self.shape,
                right: other.shape,
            });
        }
        let mut out = Vec::with_capacity(n * (c1 + c2) * h * w);
        for i in 0..n {
            out.extend_from_slice(self.item(i));
            out.extend_from_slice(other.item(i));
        }
        Tensor::from_vec([n, c1 + c2, h, w], out)
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `channels` channels and the rest.
    pub fn split_channels(&self, channels: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        assert!(channels <= c, "split point {channels} beyond {c} channels");
        let plane = h * w;
        let mut left = Vec::with_capacity(n * channels * plane);
        let mut right = Vec::with_capacity(n * (c - channels) * plane);
        for i in 0..n {
            let item = self.item(i);
            left.extend_from_slice(&item[..channels * plane]);
            right.extend_from_slice(&item[channels * plane..]);
        }
        (
            Tensor::from_vec([n, channels, h, w], left).expect("split shape"),
            Tensor::from_vec([n, c - channels, h, w], right).expect("split shape"),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
