//! Plain CHW float rasters and label grids, with the resampling rules shared
//! by loading and augmentation.

use crate::error::{Result, SegError};

/// Three-plane (CHW) float image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub const CHANNELS: usize = 3;

impl ImageRaster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(SegError::Shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; CHANNELS * width * height],
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; CHANNELS * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * w * h + i] = px.0[c] as f32 / 255.0;
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.width * self.height..(c + 1) * self.width * self.height]
    }
}

impl ClassMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(SegError::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Source coordinate of destination pixel centre `dst` when mapping `src_len`
/// pixels onto `dst_len` (pixel-centre aligned, no corner alignment).
pub(crate) fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f32 {
    (dst as f32 + 0.5) * (src_len as f32 / dst_len as f32) - 0.5
}

/// Nearest-neighbour index: the source pixel whose cell contains the
/// destination pixel centre.
pub(crate) fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
}

/// Bilinear sample of one plane at fractional `(x, y)`; outside the plane
/// the `fill` value is blended in.
pub(crate) fn sample_bilinear(plane: &[f32], width: usize, height: usize, x: f32, y: f32, fill: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f32, yi: f32| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= width as f32 || yi >= height as f32 {
            fill
        } else {
            plane[yi as usize * width + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0) * fx } else { 0.0 };
    if fy > 0.0 {
        let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 };
        top * (1.0 - fy) + bottom * fy
    } else {
        top
    }
}

/// Bilinear resize with edge clamping.
pub fn resize_bilinear(img: &ImageRaster, width: usize, height: usize) -> Result<ImageRaster> {
    if img.width == 0 || img.height == 0 || width == 0 || height == 0 {
        return Err(SegError::EmptyRaster {
            width: img.width.min(width),
            height: img.height.min(height),
        });
    }
    if (img.width, img.height) == (width, height) {
        return Ok(img.clone());
    }
    let xs: Vec<f32> = (0..width)
        .map(|x| source_coord(x, img.width, width).clamp(0.0, (img.width - 1) as f32))
        .collect();
    let ys: Vec<f32> = (0..height)
        .map(|y| source_coord(y, img.height, height).clamp(0.0, (img.height - 1) as f32))
        .collect();
    let mut data = Vec::with_capacity(CHANNELS * width * height);
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        for &y in &ys {
            for &x in &xs {
                data.push(sample_bilinear(plane, img.width, img.height, x, y, 0.0));
            }
        }
    }
    ImageRaster::new(width, height, data)
}

/// Nearest-neighbour resize; never invents a class value.
pub fn resize_nearest(mask: &ClassMask, width: usize, height: usize) -> Result<ClassMask> {
    if mask.width == 0 || mask.height == 0 || width == 0 || height == 0 {
        return Err(SegError::EmptyRaster {
            width: mask.width.min(width),
            height: mask.height.min(height),
        });
    }
    let xs: Vec<usize> = (0..width).map(|x| nearest_index(x, mask.width, width)).collect();
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = nearest_index(y, mask.height, height);
        data.extend(xs.iter().map(|&sx| mask.get(sx, sy)));
    }
    ClassMask::new(width, height, data)
}
