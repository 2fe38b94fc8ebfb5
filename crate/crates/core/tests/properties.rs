//! Property tests for the contract-level invariants that hold over random
//! inputs: PK batch structure, mask-restricted augmentation, geometric
//! image/mask consistency, and loss positivity.

use ccreid::augment::{apply_cda, erase_clothes, flip_crop, AugmentConfig, ChannelPermutation};
use ccreid::data::{
    pk_sample_indices, ClothingLabels, DatasetManifest, ManifestRecord, ParsingMask, Sample, Split,
};
use ccreid::mcb::hm_loss;
use ccreid::rng::derive;
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::IxDyn;
use proptest::prelude::*;

fn synthetic_manifest(group_sizes: &[usize]) -> DatasetManifest {
    let mut records = Vec::new();
    for (id, &count) in group_sizes.iter().enumerate() {
        for i in 0..count {
            records.push(ManifestRecord {
                image_path: format!("{id}_{i}.png"),
                identity: id as u32,
                original_identity: (id * 3 + 7) as u32,
                camera: (i % 2) as u32,
                clothes_id: (id * 2) as u32,
                mask_path: format!("{id}_{i}_m.png"),
            });
        }
    }
    DatasetManifest {
        records,
        split: Split::Train,
        base_dir: std::path::PathBuf::from("."),
        identity_count: group_sizes.len(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Every PK draw yields exactly P identities with exactly K slots each.
    #[test]
    fn pk_batches_always_satisfy_the_identity_batch_invariants(
        group_sizes in prop::collection::vec(1usize..12, 2..10),
        p_frac in 0.0f64..1.0,
        k in 2usize..9,
        seed in any::<u64>(),
    ) {
        let manifest = synthetic_manifest(&group_sizes);
        let p = 1 + (p_frac * (group_sizes.len() - 1) as f64) as usize;
        let indices = pk_sample_indices(&manifest, p, k, seed).unwrap();
        prop_assert_eq!(indices.len(), p * k);
        let mut counts = std::collections::HashMap::new();
        for &i in &indices {
            *counts.entry(manifest.records[i].identity).or_insert(0usize) += 1;
        }
        prop_assert_eq!(counts.len(), p);
        prop_assert!(counts.values().all(|&c| c == k));
        // identity blocks are contiguous in K-sized runs
        for chunk in indices.chunks(k) {
            let id = manifest.records[chunk[0]].identity;
            prop_assert!(chunk.iter().all(|&i| manifest.records[i].identity == id));
        }
        // determinism
        let again = pk_sample_indices(&manifest, p, k, seed).unwrap();
        prop_assert_eq!(indices, again);
    }
}

fn arb_sample() -> impl Strategy<Value = Sample> {
    (2u32..10, 2u32..10, any::<u64>()).prop_map(|(w, h, seed)| {
        let mut r = derive(seed, &[1]);
        use rand::Rng;
        let mut img = RgbImage::new(w, h);
        let mut mask = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, Rgb([r.random(), r.random(), r.random()]));
                mask.put_pixel(x, y, Luma([r.random_range(0..4)]));
            }
        }
        Sample {
            image: img,
            identity: 0,
            original_identity: 0,
            camera: 0,
            clothes_id: 0,
            mask: Some(ParsingMask {
                labels: mask,
                clothing: ClothingLabels::new([2, 3]),
            }),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// The color permutation touches no pixel outside the clothing region and
    /// preserves each clothing pixel's channel multiset; erasing afterwards
    /// gives the same image as erasing directly.
    #[test]
    fn cda_is_mask_restricted_and_absorbed_by_erasure(
        sample in arb_sample(),
        perm_idx in 0usize..6,
    ) {
        let perm = ChannelPermutation::ALL[perm_idx];
        let out = apply_cda(&sample, perm).unwrap();
        let mask = sample.mask.as_ref().unwrap();
        let (w, h) = sample.image.dimensions();
        for y in 0..h {
            for x in 0..w {
                let a = sample.image.get_pixel(x, y).0;
                let b = out.image.get_pixel(x, y).0;
                if mask.is_clothing(x, y) {
                    let mut ma = a; let mut mb = b;
                    ma.sort_unstable(); mb.sort_unstable();
                    prop_assert_eq!(ma, mb);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }
        let direct = erase_clothes(&sample).unwrap();
        let via = erase_clothes(&out).unwrap();
        prop_assert_eq!(direct.image.as_raw(), via.image.as_raw());
    }

    /// Encoding each pixel's mask label into the image makes any divergence
    /// between the image's and the mask's geometric transform observable:
    /// after flip+crop each output pixel's color must still encode its own
    /// mask label (zero padding matches the background label).
    #[test]
    fn flip_and_crop_transform_image_and_mask_by_the_same_map(
        w in 4u32..12,
        h in 4u32..12,
        labels_seed in any::<u64>(),
        aug_seed in any::<u64>(),
        flip_prob in prop::sample::select(vec![0.0f64, 0.5, 1.0]),
        padding in 0u32..4,
    ) {
        use rand::Rng;
        let mut r = derive(labels_seed, &[2]);
        let mut img = RgbImage::new(w, h);
        let mut mask = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let label: u8 = r.random_range(1..4);
                mask.put_pixel(x, y, Luma([label]));
                img.put_pixel(x, y, Rgb([label * 40, label * 40, label * 40]));
            }
        }
        let sample = Sample {
            image: img,
            identity: 0,
            original_identity: 0,
            camera: 0,
            clothes_id: 0,
            mask: Some(ParsingMask {
                labels: mask,
                clothing: ClothingLabels::new([2]),
            }),
        };
        let cfg = AugmentConfig {
            flip_prob,
            crop_padding: padding,
            erase_prob: 0.0,
            ..Default::default()
        };
        let out = flip_crop(&sample, &cfg, &mut derive(aug_seed, &[3])).unwrap();
        let out_mask = out.mask.as_ref().unwrap();
        let (ow, oh) = out.image.dimensions();
        prop_assert_eq!((ow, oh), (w, h), "crop keeps the source size");
        for y in 0..oh {
            for x in 0..ow {
                let label = out_mask.labels.get_pixel(x, y).0[0];
                let px = out.image.get_pixel(x, y).0;
                prop_assert_eq!(px, [label * 40, label * 40, label * 40],
                    "image and mask diverged at {},{}", x, y);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The matching loss is zero exactly when descriptors agree and strictly
    /// positive otherwise.
    #[test]
    fn hm_loss_is_positive_definite(
        values in prop::collection::vec(-10.0f64..10.0, 42),
        bump_idx in 0usize..42,
        bump in 0.001f64..2.0,
    ) {
        use ccreid::autodiff::{Arr, Tape};
        let a = Arr::from_shape_vec(IxDyn(&[1, 2, 21]), values.clone()).unwrap();
        let tape = Tape::new();
        let av = tape.input(a.clone());
        let same = tape.input(a.clone());
        let zero = hm_loss(&tape, &[av], &[same], false).unwrap();
        prop_assert_eq!(tape.scalar(zero), 0.0);

        let mut bumped = values;
        bumped[bump_idx] += bump;
        let b = Arr::from_shape_vec(IxDyn(&[1, 2, 21]), bumped).unwrap();
        let bv = tape.input(b);
        let pos = hm_loss(&tape, &[av], &[bv], false).unwrap();
        prop_assert!(tape.scalar(pos) > 0.0);
    }
}
