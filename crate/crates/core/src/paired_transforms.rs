//! Augmentation applied identically to an image and its mask: horizontal
//! flip, small rotation about the centre, centre crop, resize back.
//!
//! Every stage is a map from destination pixel to source coordinate. The
//! image samples that coordinate bilinearly and the mask takes the nearest
//! pixel, so both always see the same geometry.

use rand::Rng;

use crate::error::{Result, SegError};
use crate::raster::{nearest_index, sample_bilinear, source_coord, ClassMask, ImageRaster, CHANNELS};
use crate::voc_data::{Batch, SegSample, INPUT_SIZE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Rotation angle is drawn from `[-max_rotation_deg, +max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub crop_size: usize,
    pub output_size: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            max_rotation_deg: 5.0,
            crop_size: 180,
            output_size: INPUT_SIZE,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(SegError::config("flip_prob", format!("{} is not a probability", self.flip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(SegError::config(
                "rotation_deg",
                format!("{} must be a finite non-negative angle", self.max_rotation_deg),
            ));
        }
        if self.crop_size == 0 || self.crop_size > self.output_size {
            return Err(SegError::config(
                "crop_size",
                format!("{} must be in 1..={}", self.crop_size, self.output_size),
            ));
        }
        Ok(())
    }
}

/// The random part of one augmentation; the crop is always central.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub do_flip: bool,
    pub angle_deg: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        do_flip: false,
        angle_deg: 0.0,
    };
}

/// Draws flip then angle; always consumes exactly two values from `rng`.
pub fn draw<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> AugmentDraw {
    let u_flip: f64 = rng.random();
    let u_angle: f64 = rng.random();
    let r = policy.max_rotation_deg;
    AugmentDraw {
        do_flip: u_flip < policy.flip_prob,
        angle_deg: if r == 0.0 { 0.0 } else { (-r + 2.0 * r * u_angle).clamp(-r, r) },
    }
}

/// One geometric stage, as a destination-to-source coordinate map.
#[derive(Clone, Copy, Debug)]
enum Stage {
    Flip,
    Rotate { cos: f64, sin: f64 },
    Crop { x0: usize, y0: usize },
    Resize,
}

impl Stage {
    fn source(self, x: usize, y: usize, src: (usize, usize), dst: (usize, usize)) -> (f64, f64) {
        match self {
            Stage::Flip => ((src.0 - 1 - x) as f64, y as f64),
            Stage::Rotate { cos, sin } => {
                let cx = (src.0 as f64 - 1.0) / 2.0;
                let cy = (src.1 as f64 - 1.0) / 2.0;
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                // Inverse map of a rotation by the drawn angle about the centre.
                (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
            }
            Stage::Crop { x0, y0 } => ((x + x0) as f64, (y + y0) as f64),
            Stage::Resize => (
                source_coord(x, src.0, dst.0) as f64,
                source_coord(y, src.1, dst.1) as f64,
            ),
        }
    }

    /// Integer source pixel for nearest sampling, `None` outside the source.
    fn nearest(self, x: usize, y: usize, src: (usize, usize), dst: (usize, usize)) -> Option<(usize, usize)> {
        match self {
            Stage::Resize => Some((nearest_index(x, src.0, dst.0), nearest_index(y, src.1, dst.1))),
            _ => {
                let (sx, sy) = self.source(x, y, src, dst);
                let (rx, ry) = ((sx + 0.5).floor(), (sy + 0.5).floor());
                (rx >= 0.0 && ry >= 0.0 && rx < src.0 as f64 && ry < src.1 as f64).then_some((rx as usize, ry as usize))
            }
        }
    }
}

/// Stages for a draw, with the extent each stage produces.
fn plan(draw: &AugmentDraw, policy: &AugmentPolicy, width: usize, height: usize) -> Result<Vec<(Stage, (usize, usize))>> {
    let mut stages = Vec::new();
    if draw.do_flip {
        stages.push((Stage::Flip, (width, height)));
    }
    if draw.angle_deg != 0.0 {
        let rad = draw.angle_deg.to_radians();
        stages.push((
            Stage::Rotate {
                cos: rad.cos(),
                sin: rad.sin(),
            },
            (width, height),
        ));
    }
    let crop = policy.crop_size;
    if crop > width || crop > height {
        return Err(SegError::Shape(format!("cannot crop {crop}x{crop} from {width}x{height}")));
    }
    let out = policy.output_size;
    if (crop, crop) != (width, height) || (out, out) != (width, height) {
        stages.push((
            Stage::Crop {
                x0: (width - crop) / 2,
                y0: (height - crop) / 2,
            },
            (crop, crop),
        ));
        stages.push((Stage::Resize, (out, out)));
    }
    Ok(stages)
}

fn warp_image(img: &ImageRaster, stage: Stage, dst: (usize, usize)) -> ImageRaster {
    let src = (img.width, img.height);
    let mut data = Vec::with_capacity(CHANNELS * dst.0 * dst.1);
    let coords: Vec<(f64, f64)> = (0..dst.1)
        .flat_map(|y| (0..dst.0).map(move |x| (x, y)))
        .map(|(x, y)| stage.source(x, y, src, dst))
        .collect();
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        data.extend(coords.iter().map(|&(sx, sy)| match stage {
            // Resizing clamps at the border; other stages fill with zero.
            Stage::Resize => sample_bilinear(
                plane,
                src.0,
                src.1,
                (sx as f32).clamp(0.0, (src.0 - 1) as f32),
                (sy as f32).clamp(0.0, (src.1 - 1) as f32),
                0.0,
            ),
            _ => sample_bilinear(plane, src.0, src.1, sx as f32, sy as f32, 0.0),
        }));
    }
    ImageRaster {
        width: dst.0,
        height: dst.1,
        data,
    }
}

/// Nearest-neighbour warp of any per-pixel grid; `fill` outside the source.
fn warp_grid<T: Copy>(grid: &[T], src: (usize, usize), stage: Stage, dst: (usize, usize), fill: T) -> Vec<T> {
    let mut out = Vec::with_capacity(dst.0 * dst.1);
    for y in 0..dst.1 {
        for x in 0..dst.0 {
            out.push(match stage.nearest(x, y, src, dst) {
                Some((sx, sy)) => grid[sy * src.0 + sx],
                None => fill,
            });
        }
    }
    out
}

/// Runs the mask pipeline of `draw` on an arbitrary row-major grid. Exposed
/// so coordinate-encoding grids can check the image/mask geometry lock.
pub fn apply_to_grid<T: Copy>(
    grid: &[T],
    width: usize,
    height: usize,
    draw: &AugmentDraw,
    policy: &AugmentPolicy,
    fill: T,
) -> Result<(Vec<T>, usize, usize)> {
    if grid.len() != width * height {
        return Err(SegError::Shape(format!("grid has {} cells, expected {width}x{height}", grid.len())));
    }
    if !policy.enabled {
        return Ok((grid.to_vec(), width, height));
    }
    let mut cur = grid.to_vec();
    let mut size = (width, height);
    for (stage, dst) in plan(draw, policy, width, height)? {
        cur = warp_grid(&cur, size, stage, dst, fill);
        size = dst;
    }
    Ok((cur, size.0, size.1))
}

/// Runs the image pipeline of `draw` (bilinear, zero fill).
pub fn apply_to_image(img: &ImageRaster, draw: &AugmentDraw, policy: &AugmentPolicy) -> Result<ImageRaster> {
    if !policy.enabled {
        return Ok(img.clone());
    }
    let mut cur = img.clone();
    for (stage, dst) in plan(draw, policy, img.width, img.height)? {
        cur = warp_image(&cur, stage, dst);
    }
    Ok(cur)
}

/// flip? -> rotate -> centre crop -> resize, on image and mask alike.
/// Mask pixels rotated in from outside become background.
pub fn apply(sample: &SegSample, draw: &AugmentDraw, policy: &AugmentPolicy) -> Result<SegSample> {
    let image = apply_to_image(&sample.image, draw, policy)?;
    let (data, w, h) = apply_to_grid(&sample.mask.data, sample.mask.width, sample.mask.height, draw, policy, 0u8)?;
    SegSample::new(sample.id.clone(), image, ClassMask::new(w, h, data)?)
}

/// Augments each sample of a training batch with its own draw, in sample
/// order. A disabled policy returns the batch unchanged.
pub fn augment_train_batch<R: Rng + ?Sized>(batch: &Batch, policy: &AugmentPolicy, rng: &mut R) -> Result<Batch> {
    if !policy.enabled {
        return Ok(batch.clone());
    }
    let samples = batch
        .samples()
        .iter()
        .map(|s| apply(s, &draw(policy, rng), policy))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column_sample(size: usize) -> SegSample {
        let mut data = Vec::with_capacity(3 * size * size);
        for _ in 0..3 {
            for _y in 0..size {
                data.extend((0..size).map(|x| x as f32));
            }
        }
        let mask = (0..size * size).map(|i| ((i % size) % 21) as u8).collect();
        SegSample::new("c", ImageRaster::new(size, size, data).unwrap(), ClassMask::new(size, size, mask).unwrap()).unwrap()
    }

    #[test]
    fn degenerate_policies_fix_the_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = AugmentPolicy {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            ..AugmentPolicy::default()
        };
        for _ in 0..100 {
            assert_eq!(draw(&policy, &mut rng), AugmentDraw::IDENTITY);
        }
    }

    #[test]
    fn draws_repeat_under_a_seed_and_stay_in_range() {
        let policy = AugmentPolicy::default();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| draw(&policy, &mut rng)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<_> = (0..50).map(|_| draw(&policy, &mut rng)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|d| d.angle_deg.abs() <= 5.0));
        assert!(a.iter().any(|d| d.do_flip) && a.iter().any(|d| !d.do_flip));
    }

    #[test]
    fn constant_mask_survives_crop_and_resize() {
        let s = SegSample::new("k", ImageRaster::filled(224, 224, 0.4), ClassMask::filled(224, 224, 9)).unwrap();
        let out = apply(&s, &AugmentDraw::IDENTITY, &AugmentPolicy::default()).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        assert!(out.mask.data.iter().all(|&c| c == 9));
        assert!(out.image.data.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn flip_reverses_columns_before_the_crop() {
        let s = column_sample(224);
        let policy = AugmentPolicy::default();
        let flip = AugmentDraw {
            do_flip: true,
            angle_deg: 0.0,
        };
        let out = apply(&s, &flip, &policy).unwrap();
        // Oracle: column x of the output reads crop column floor((x+.5)*180/224),
        // which after the flip holds original column 223 - (22 + that).
        for x in 0..224 {
            let crop_col = ((x as f64 + 0.5) * 180.0 / 224.0).floor() as usize;
            let original = 223 - (22 + crop_col);
            assert_eq!(out.mask.get(x, 100) as usize, original % 21, "column {x}");
            let expected = 223.0 - 22.0 - (((x as f64 + 0.5) * 180.0 / 224.0 - 0.5).clamp(0.0, 179.0));
            assert!((out.image.data[100 * 224 + x] as f64 - expected).abs() < 1e-3, "column {x}");
        }
    }

    #[test]
    fn double_flip_without_crop_is_identity() {
        let s = column_sample(224);
        let policy = AugmentPolicy {
            crop_size: 224,
            ..AugmentPolicy::default()
        };
        let flip = AugmentDraw {
            do_flip: true,
            angle_deg: 0.0,
        };
        let once = apply(&s, &flip, &policy).unwrap();
        assert_ne!(once, s);
        assert_eq!(apply(&once, &flip, &policy).unwrap(), s);
    }

    #[test]
    fn disabled_policy_is_identity() {
        let s = column_sample(224);
        let draw = AugmentDraw {
            do_flip: true,
            angle_deg: 4.0,
        };
        assert_eq!(apply(&s, &draw, &AugmentPolicy::disabled()).unwrap(), s);
    }

    #[test]
    fn rotation_fills_corners_with_background() {
        let s = SegSample::new("r", ImageRaster::filled(224, 224, 1.0), ClassMask::filled(224, 224, 3)).unwrap();
        let policy = AugmentPolicy {
            crop_size: 224,
            ..AugmentPolicy::default()
        };
        let out = apply(
            &s,
            &AugmentDraw {
                do_flip: false,
                angle_deg: 5.0,
            },
            &policy,
        )
        .unwrap();
        assert_eq!(out.mask.get(0, 0), 0);
        assert_eq!(out.mask.get(112, 112), 3);
        assert_eq!(out.image.data[0], 0.0);
    }

    #[test]
    fn invalid_policies_name_the_field() {
        let bad = AugmentPolicy {
            crop_size: 300,
            ..AugmentPolicy::default()
        };
        assert!(matches!(bad.validate(), Err(SegError::Config { key, .. }) if key == "crop_size"));
        let bad = AugmentPolicy {
            flip_prob: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
