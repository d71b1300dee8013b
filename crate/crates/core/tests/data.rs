use std::collections::BTreeSet;

use proptest::prelude::*;
use vocseg_core::palette::PaletteIndices;
use vocseg_core::raster::{ClassMask, ImageRaster};
use vocseg_core::voc_data::{
    batch_order, class_pixel_counts, decode_mask, make_batches, resize_sample, SegSample, NUM_CLASSES,
};

fn sample(id: usize, w: usize, h: usize, mask: Vec<u8>) -> SegSample {
    SegSample::new(format!("s{id}"), ImageRaster::filled(w, h, 0.5), ClassMask::new(w, h, mask).unwrap()).unwrap()
}

fn mask_strategy(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        (Just(w), Just(h), prop::collection::vec(0u8..NUM_CLASSES as u8, w * h))
    })
}

#[test]
fn tiny_mask_counts() {
    let s = sample(0, 2, 2, vec![0, 0, 1, 2]);
    let counts = class_pixel_counts(&[s]);
    assert_eq!(&counts[..3], &[2, 1, 1]);
    assert!(counts[3..].iter().all(|&c| c == 0));
    assert_eq!(class_pixel_counts(&[]), [0; NUM_CLASSES]);
}

#[test]
fn three_background_masks() {
    let samples: Vec<_> = (0..3).map(|i| sample(i, 224, 224, vec![0; 224 * 224])).collect();
    let expected: u64 = samples.iter().map(|s| s.mask.data.len() as u64).sum();
    let counts = class_pixel_counts(&samples);
    assert_eq!(counts[0], expected);
    assert_eq!(counts[0], 150_528);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_partition_the_samples(n in 1usize..20, bs in 1usize..8, shuffle: bool, seed: u64) {
        let samples: Vec<_> = (0..n).map(|i| sample(i, 2, 2, vec![0; 4])).collect();
        let batches = make_batches(&samples, bs, shuffle, seed).unwrap();
        let mut ids: Vec<String> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        ids.sort();
        let mut all: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
    }

    #[test]
    fn batch_order_is_a_pure_function(n in 0usize..50, shuffle: bool, seed: u64) {
        prop_assert_eq!(batch_order(n, shuffle, seed), batch_order(n, shuffle, seed));
        if !shuffle {
            prop_assert_eq!(batch_order(n, false, seed), (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn counts_sum_to_pixels(masks in prop::collection::vec(mask_strategy(12), 0..6)) {
        let samples: Vec<_> = masks.into_iter().enumerate().map(|(i, (w, h, m))| sample(i, w, h, m)).collect();
        let total: u64 = class_pixel_counts(&samples).iter().sum();
        prop_assert_eq!(total, samples.iter().map(|s| (s.width() * s.height()) as u64).sum::<u64>());
    }

    #[test]
    fn decoded_masks_stay_in_range(
        (w, h, indices) in (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(prop_oneof![0u8..21, Just(255u8)], w * h))
        })
    ) {
        let mask = decode_mask(&PaletteIndices { width: w, height: h, indices: indices.clone() }).unwrap();
        prop_assert!(mask.data.iter().all(|&c| (c as usize) < NUM_CLASSES));
        for (&raw, &c) in indices.iter().zip(&mask.data) {
            prop_assert_eq!(c, if raw == 255 { 0 } else { raw });
        }
    }

    #[test]
    fn other_palette_indices_are_rejected(bad in 21u8..255) {
        let raw = PaletteIndices { width: 2, height: 1, indices: vec![0, bad] };
        prop_assert!(decode_mask(&raw).is_err());
    }

    #[test]
    fn resizing_invents_no_classes((w, h, m) in mask_strategy(30), target in 1usize..60) {
        let source: BTreeSet<u8> = m.iter().copied().collect();
        let s = sample(0, w, h, m);
        let r = resize_sample("r", &s.image, &s.mask, target).unwrap();
        prop_assert_eq!((r.width(), r.height()), (target, target));
        prop_assert!(r.mask.data.iter().all(|c| source.contains(c)));
    }
}
