use proptest::prelude::*;

use mscc::fusion::{buffer_filter, combine, dilate, fuse, sweep_buffer};
use mscc::metrics::{confusion_counts, score};
use mscc::patchseg::{augment_patches, balance, balanced_training_set, mesh_patches, object_fraction, reconstruct_mask, PatchLabel};
use mscc::raster::dihedral;
use mscc::{BinaryMask, GrayImage};

fn mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), w * h).prop_map(move |d| BinaryMask::new(w, h, d).unwrap())
}

fn sparse_mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(0.05), w * h).prop_map(move |d| BinaryMask::new(w, h, d).unwrap())
}

fn gray(w: usize, h: usize) -> impl Strategy<Value = GrayImage<f64>> {
    prop::collection::vec(0.0f64..1.0, w * h).prop_map(move |d| GrayImage::new(w, h, d).unwrap())
}

fn pair(w: usize, h: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (mask(w, h), mask(w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // patches

    #[test]
    fn mesh_then_reassemble_is_identity(img in gray(24, 16)) {
        let set = mesh_patches(&img, None, 8, 0.5, "x").unwrap();
        let mut data = vec![0.0; 24 * 16];
        for p in &set.patches {
            for (k, v) in p.pixels.iter().enumerate() {
                data[(p.grid_row * 8 + k / 8) * 24 + p.grid_col * 8 + k % 8] = *v;
            }
        }
        prop_assert_eq!(data.as_slice(), img.data());
    }

    #[test]
    fn stricter_criterion_never_adds_object_patches(gt in mask(16, 16), a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let img = GrayImage::filled(16, 16, 0.5).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l = mesh_patches(&img, Some(&gt), 4, lo, "").unwrap().labels.unwrap();
        let h = mesh_patches(&img, Some(&gt), 4, hi, "").unwrap().labels.unwrap();
        for (x, y) in l.iter().zip(&h) {
            prop_assert!(!y.is_object() || x.is_object());
        }
    }

    #[test]
    fn balanced_set_has_equal_classes(gt in sparse_mask(32, 32), seed in 0u64..100) {
        let img = GrayImage::filled(32, 32, 0.5).unwrap();
        let dil = dilate(&gt, 2);
        let set = mesh_patches(&img, Some(&dil), 4, 0.5, "").unwrap();
        let (with, without) = set.class_counts().unwrap();
        prop_assume!(with > 0 && without > 0);
        let bal = balanced_training_set(&set, seed).unwrap();
        let (a, b) = bal.class_counts().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reconstruction_differs_only_in_mixed_patches(gt in mask(16, 16)) {
        let img = GrayImage::filled(16, 16, 0.0).unwrap();
        let set = mesh_patches(&img, Some(&gt), 4, 0.5, "").unwrap();
        let rec = reconstruct_mask(set.labels.as_deref().unwrap(), 16, 16, 4).unwrap();
        let vals: Vec<f64> = gt.to_values();
        for y in 0..16 {
            for x in 0..16 {
                if rec.get(x, y) != gt.get(x, y) {
                    let cell: Vec<f64> = (0..16).map(|k| vals[((y / 4) * 4 + k / 4) * 16 + (x / 4) * 4 + k % 4]).collect();
                    let frac = object_fraction(&cell).unwrap();
                    prop_assert!(frac > 0.0 && frac < 1.0);
                }
            }
        }
    }

    #[test]
    fn augmentation_commutes_with_meshing(img in gray(16, 16), k in 0usize..8) {
        let turned = img.dihedral(k).unwrap();
        let key = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        let mut lhs: Vec<_> = mesh_patches(&turned, None, 4, 0.5, "").unwrap().patches.iter().map(|p| key(&p.pixels)).collect();
        let mut rhs: Vec<_> = mesh_patches(&img, None, 4, 0.5, "").unwrap().patches.iter().map(|p| key(&dihedral(&p.pixels, 4, k))).collect();
        lhs.sort();
        rhs.sort();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn patch_augmentation_contains_originals(img in gray(8, 8)) {
        let set = mesh_patches(&img, None, 4, 0.5, "").unwrap();
        let aug = augment_patches(&set);
        prop_assert_eq!(aug.len(), 8 * set.len());
        for (i, p) in set.patches.iter().enumerate() {
            prop_assert_eq!(&aug.patches[8 * i].pixels, &p.pixels);
        }
        let pick = balance(&aug, aug.len() / 2, 1).unwrap();
        prop_assert_eq!(pick.len(), aug.len() / 2);
    }

    // fusion

    #[test]
    fn dilation_composes(m in sparse_mask(20, 14), a in 0usize..6, b in 0usize..6) {
        prop_assert_eq!(dilate(&dilate(&m, a), b), dilate(&m, a + b));
    }

    #[test]
    fn fusion_containments((patch, pixel) in pair(18, 12), r in 0usize..10) {
        let filtered = buffer_filter(&patch, &pixel, r).unwrap();
        prop_assert!(filtered.is_subset_of(&patch));
        prop_assert!(filtered.is_subset_of(&dilate(&pixel, r)));
        prop_assert!(pixel.is_subset_of(&fuse(&pixel, &patch, r).unwrap()));
    }

    #[test]
    fn fused_area_grows_with_radius(patch in mask(16, 16), pixel in sparse_mask(16, 16), r in 0usize..12) {
        let a = fuse(&pixel, &patch, r).unwrap().area();
        let b = fuse(&pixel, &patch, r + 1).unwrap().area();
        prop_assert!(a <= b);
        let gt = pixel.clone();
        let rows = sweep_buffer(&patch, &pixel, &gt, &[r, r + 1, r + 2]).unwrap();
        prop_assert!(rows.windows(2).all(|w| w[0].filtered_area <= w[1].filtered_area));
    }

    #[test]
    fn combine_is_commutative_and_idempotent((a, b) in pair(9, 7)) {
        prop_assert_eq!(combine(&a, &b).unwrap(), combine(&b, &a).unwrap());
        prop_assert_eq!(combine(&a, &a).unwrap(), a);
    }

    // metrics

    #[test]
    fn metrics_ignore_pixel_order((p, g) in pair(8, 8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let perm = |m: &BinaryMask| BinaryMask::new(8, 8, order.iter().map(|&i| m.data()[i]).collect()).unwrap();
        prop_assert_eq!(score(&p, &g).unwrap(), score(&perm(&p), &perm(&g)).unwrap());
    }

    #[test]
    fn metric_identities((p, g) in pair(10, 6)) {
        let m = score(&p, &g).unwrap();
        prop_assert!((m.voe - (1.0 - m.jaccard)).abs() <= 1e-12);
        prop_assert!((m.dice - 2.0 * m.jaccard / (1.0 + m.jaccard)).abs() <= 1e-12);
        let c = confusion_counts(&p, &g).unwrap();
        prop_assert_eq!(c.total(), 60);
    }

    #[test]
    fn covering_prediction_has_full_recall((p, g) in pair(10, 6)) {
        let cover = combine(&p, &g).unwrap();
        prop_assert_eq!(score(&cover, &g).unwrap().recall, 1.0);
    }
}

#[test]
fn patch_labels_follow_the_criterion() {
    let gt = BinaryMask::from_fn(8, 4, |x, y| x < 4 && y < 2);
    let img = GrayImage::filled(8, 4, 0.0).unwrap();
    let at = |c| mesh_patches(&img, Some(&gt), 4, c, "").unwrap().labels.unwrap();
    assert_eq!(at(0.49), vec![PatchLabel::WithObject, PatchLabel::WithoutObject]);
    assert_eq!(at(0.5), vec![PatchLabel::WithoutObject, PatchLabel::WithoutObject]);
}
