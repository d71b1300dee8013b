//! Writes small VOC-layout datasets of coloured shapes, for tests and smoke
//! runs where the real data is unavailable.
//!
//! Each image is a noisy grey background with one to three filled shapes.
//! A shape's colour is determined by its class, so the task is learnable.
//! Masks are palette PNGs with a one-pixel void (255) outline around every
//! shape, like the real annotations.

use std::fs;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SegError};
use crate::palette::{voc_color, write_palette_png};
use crate::voc_data::{split_list_path, Split, NUM_CLASSES, VOID_LABEL};

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub width: usize,
    pub height: usize,
    /// Foreground classes the shapes are drawn from.
    pub classes: Vec<u8>,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            train: 8,
            val: 4,
            test: 4,
            width: 200,
            height: 150,
            classes: vec![1, 7, 12, 15],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn random<R: Rng>(rng: &mut R, w: f32, h: f32) -> Self {
        let (sw, sh) = (rng.random_range(0.25..0.5) * w, rng.random_range(0.25..0.5) * h);
        let (cx, cy) = (rng.random_range(sw / 2.0..w - sw / 2.0), rng.random_range(sh / 2.0..h - sh / 2.0));
        if rng.random_bool(0.5) {
            Shape::Rect {
                x0: cx - sw / 2.0,
                y0: cy - sh / 2.0,
                x1: cx + sw / 2.0,
                y1: cy + sh / 2.0,
            }
        } else {
            Shape::Ellipse {
                cx,
                cy,
                rx: sw / 2.0,
                ry: sh / 2.0,
            }
        }
    }
}

/// Class-specific fill colour: the VOC palette colour, lifted away from black.
fn class_color(class: u8) -> [u8; 3] {
    voc_color(class).map(|c| 40 + (c as u16 * 215 / 255) as u8)
}

/// Generates one image and its raw palette-index mask.
pub fn synth_sample<R: Rng>(rng: &mut R, width: usize, height: usize, classes: &[u8]) -> (RgbImage, Vec<u8>) {
    let mut mask = vec![0u8; width * height];
    let shapes: Vec<(Shape, u8)> = (0..rng.random_range(1..=3))
        .map(|_| (Shape::random(rng, width as f32, height as f32), classes[rng.random_range(0..classes.len())]))
        .collect();
    for (shape, class) in &shapes {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    mask[y * width + x] = *class;
                }
            }
        }
    }
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let base = match mask[i] {
            0 => [110, 110, 110],
            c => class_color(c),
        };
        let noise: i16 = rng.random_range(-12..=12);
        px.0 = base.map(|v| (v as i16 + noise).clamp(0, 255) as u8);
    }
    // Void outline: labelled pixels with a differently labelled 4-neighbour.
    let outline: Vec<usize> = (0..width * height)
        .filter(|&i| {
            let (x, y) = (i % width, i / width);
            mask[i] != 0
                && [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < width
                        && (ny as usize) < height
                        && mask[ny as usize * width + nx as usize] != mask[i]
                })
        })
        .collect();
    for i in outline {
        mask[i] = VOID_LABEL;
    }
    (img, mask)
}

/// Writes `ImageSets/Segmentation/{train,val,test}.txt`, `JPEGImages/*.jpg`
/// and `SegmentationClass/*.png` under `root`.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<()> {
    if spec.classes.is_empty() || spec.classes.iter().any(|&c| c == 0 || c as usize >= NUM_CLASSES) {
        return Err(SegError::Invalid(format!("fixture classes must be in 1..=20, got {:?}", spec.classes)));
    }
    let images = root.join("JPEGImages");
    let masks = root.join("SegmentationClass");
    let lists = root.join("ImageSets").join("Segmentation");
    for dir in [&images, &masks, &lists] {
        fs::create_dir_all(dir).map_err(SegError::io(dir))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (split, count) in [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)] {
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("synth_{split}_{i:04}");
            let (img, mask) = synth_sample(&mut rng, spec.width, spec.height, &spec.classes);
            let path = images.join(format!("{id}.jpg"));
            let file = fs::File::create(&path).map_err(SegError::io(&path))?;
            JpegEncoder::new_with_quality(std::io::BufWriter::new(file), 95)
                .encode_image(&img)
                .map_err(|source| SegError::Image { path: path.clone(), source })?;
            write_palette_png(&masks.join(format!("{id}.png")), spec.width, spec.height, &mask)?;
            ids.push(id);
        }
        let list = split_list_path(root, split);
        let mut text = ids.join("\n");
        text.push('\n');
        fs::write(&list, text).map_err(SegError::io(&list))?;
    }
    Ok(())
}
