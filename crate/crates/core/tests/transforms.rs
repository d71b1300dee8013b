use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vocseg_core::paired_transforms::{apply, apply_to_grid, apply_to_image, augment_train_batch, AugmentDraw, AugmentPolicy};
use vocseg_core::raster::{ClassMask, ImageRaster};
use vocseg_core::voc_data::{Batch, SegSample, INPUT_SIZE};

const S: usize = INPUT_SIZE;

fn draw_strategy() -> impl Strategy<Value = AugmentDraw> {
    (any::<bool>(), -5.0f64..=5.0).prop_map(|(do_flip, angle_deg)| AugmentDraw { do_flip, angle_deg })
}

/// Channel 0 holds x, channel 1 holds y, channel 2 is 1 inside the source.
fn coordinate_image() -> ImageRaster {
    let mut data = vec![0.0f32; 3 * S * S];
    for y in 0..S {
        for x in 0..S {
            data[y * S + x] = x as f32;
            data[S * S + y * S + x] = y as f32;
            data[2 * S * S + y * S + x] = 1.0;
        }
    }
    ImageRaster::new(S, S, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn image_and_mask_share_geometry(d in draw_strategy()) {
        let policy = AugmentPolicy::default();
        let img = apply_to_image(&coordinate_image(), &d, &policy).unwrap();
        let grid: Vec<Option<(usize, usize)>> = (0..S * S).map(|i| Some((i % S, i / S))).collect();
        let (warped, w, h) = apply_to_grid(&grid, S, S, &d, &policy, None).unwrap();
        prop_assert_eq!((img.width, img.height, w, h), (S, S, S, S));
        let mut checked = 0;
        for y in 1..S - 1 {
            for x in 1..S - 1 {
                let interior = [(1, 1), (0, 1), (2, 1), (1, 0), (1, 2)]
                    .iter()
                    .all(|&(dx, dy)| warped[(y + dy - 1) * S + x + dx - 1].is_some());
                let i = y * S + x;
                let Some((gx, gy)) = warped[i] else { continue };
                if !interior || img.data[2 * S * S + i] < 0.999 {
                    continue;
                }
                prop_assert!((img.data[i] - gx as f32).abs() <= 1.5, "x at ({x},{y}): {} vs {gx}", img.data[i]);
                prop_assert!((img.data[S * S + i] - gy as f32).abs() <= 1.5, "y at ({x},{y}): {} vs {gy}", img.data[S * S + i]);
                checked += 1;
            }
        }
        prop_assert!(checked > S * S / 2);
    }

    #[test]
    fn masks_keep_their_classes(
        d in draw_strategy(),
        classes in prop::collection::btree_set(1u8..21, 1..4),
        seed: u64,
    ) {
        let classes: Vec<u8> = classes.into_iter().collect();
        let mut state = seed;
        let data: Vec<u8> = (0..S * S)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                classes[(state >> 33) as usize % classes.len()]
            })
            .collect();
        let sample = SegSample::new("m", ImageRaster::filled(S, S, 0.3), ClassMask::new(S, S, data).unwrap()).unwrap();
        let out = apply(&sample, &d, &AugmentPolicy::default()).unwrap();
        prop_assert_eq!((out.width(), out.height()), (S, S));
        let allowed: BTreeSet<u8> = classes.iter().copied().chain([0]).collect();
        prop_assert!(out.mask.data.iter().all(|c| allowed.contains(c)));
    }

    #[test]
    fn disabled_policy_is_identity(d in draw_strategy(), v in 0.0f32..1.0, class in 0u8..21) {
        let sample = SegSample::new("d", ImageRaster::filled(S, S, v), ClassMask::filled(S, S, class)).unwrap();
        prop_assert_eq!(apply(&sample, &d, &AugmentPolicy::disabled()).unwrap(), sample);
    }
}

#[test]
fn batch_augmentation_repeats_with_the_seed() {
    let samples: Vec<_> = (0..2u8)
        .map(|i| {
            let data = (0..S * S).map(|p| if p % S < S / 2 { 0 } else { i + 1 }).collect();
            SegSample::new(format!("b{i}"), ImageRaster::filled(S, S, 0.2), ClassMask::new(S, S, data).unwrap()).unwrap()
        })
        .collect();
    let batch = Batch::from_samples(&samples).unwrap();
    let policy = AugmentPolicy::default();
    let a = augment_train_batch(&batch, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = augment_train_batch(&batch, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.images.shape(), [2, 3, S, S]);
}
