use super::*;
use proptest::prelude::*;

fn checkerboard(n: usize) -> Image2D {
    let data = (0..n * n)
        .map(|i| (((i / n) + (i % n)) % 2) as f32)
        .collect();
    Image2D::new(n, n, data).unwrap()
}

/// Independent enumeration oracle for tiling origins.
fn brute_force_origins(w: usize, h: usize, win: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x % stride == 0 && y % stride == 0 && x + win <= w && y + win <= h {
                out.push((x, y));
            }
        }
    }
    out
}

#[test]
fn tiling_origin_count_matches_full_slice_geometry() {
    // 3828x2870 slice, window 636, stride 60 -> 54 x 38 = 2052 candidates.
    let origins = window_origins(3828, 2870, 636, 60);
    assert_eq!(origins.len(), 2052);
    let oracle = brute_force_origins(3828, 2870, 636, 60);
    assert_eq!(origins, oracle);
}

#[test]
fn tiling_origin_set_matches_brute_force_on_odd_sizes() {
    for &(w, h, win, stride) in &[(100, 80, 30, 7), (64, 64, 64, 60), (65, 64, 64, 60)] {
        assert_eq!(
            window_origins(w, h, win, stride),
            brute_force_origins(w, h, win, stride)
        );
    }
}

#[test]
fn single_full_window_tile() {
    let img = Image2D::filled(636, 636, 0.5);
    let mask = Image2D::filled(636, 636, 1.0);
    let stack = RasterStack::new("s", vec![img]).unwrap();
    let masks = RasterStack::new("s", vec![mask]).unwrap();
    let crops = tile_stack(&stack, &masks, &TileParams::default()).unwrap();
    assert_eq!(crops.len(), 1);
    assert_eq!(crops[0].object_fraction, 1.0);
    assert_eq!(crops[0].image.width, 320);
    assert_eq!(crops[0].mask.width, 320);
}

#[test]
fn all_zero_mask_retains_nothing() {
    let img = Image2D::filled(700, 700, 0.3);
    let mask = Image2D::filled(700, 700, 0.0);
    let stack = RasterStack::new("s", vec![img]).unwrap();
    let masks = RasterStack::new("s", vec![mask]).unwrap();
    let crops = tile_stack(&stack, &masks, &TileParams::default()).unwrap();
    assert!(crops.is_empty());
}

#[test]
fn retained_fraction_respects_threshold() {
    let params = TileParams {
        window: 16,
        stride: 8,
        resize_to: 8,
        min_object_fraction: 0.05,
    };
    // Mask with a small blob; some windows contain it, some do not.
    let mut mask = Image2D::filled(48, 48, 0.0);
    for y in 10..14 {
        for x in 10..14 {
            mask.set(x, y, 1.0);
        }
    }
    let img = Image2D::filled(48, 48, 0.5);
    let stack = RasterStack::new("s", vec![img]).unwrap();
    let masks = RasterStack::new("s", vec![mask.clone()]).unwrap();
    let crops = tile_stack(&stack, &masks, &params).unwrap();
    assert!(!crops.is_empty());
    let bin = binarize_raster(&mask);
    for c in &crops {
        assert!(c.object_fraction >= 0.05);
        // Recompute at window resolution: must match within 1e-9.
        let w = bin.window(c.window_x, c.window_y, params.window, params.window);
        assert!((c.object_fraction - w.object_fraction()).abs() < 1e-9);
    }
    // Every discarded window must be under the threshold.
    let kept: std::collections::HashSet<_> =
        crops.iter().map(|c| (c.window_x, c.window_y)).collect();
    for (x, y) in window_origins(48, 48, params.window, params.stride) {
        if !kept.contains(&(x, y)) {
            let f = bin.window(x, y, params.window, params.window).object_fraction();
            assert!(f < 0.05);
        }
    }
}

#[test]
fn window_larger_than_image_errors() {
    let img = Image2D::filled(100, 100, 0.5);
    let stack = RasterStack::new("s", vec![img.clone()]).unwrap();
    let masks = RasterStack::new("s", vec![img]).unwrap();
    let err = tile_stack(&stack, &masks, &TileParams::default()).unwrap_err();
    assert!(matches!(err, ImagingError::WindowLargerThanImage { .. }));
}

#[test]
fn misaligned_masks_error() {
    let stack = RasterStack::new("s", vec![Image2D::filled(700, 700, 0.5)]).unwrap();
    let masks = RasterStack::new(
        "s",
        vec![Image2D::filled(700, 700, 0.0), Image2D::filled(700, 700, 0.0)],
    )
    .unwrap();
    assert!(matches!(
        tile_stack(&stack, &masks, &TileParams::default()),
        Err(ImagingError::MisalignedMasks(_))
    ));
}

#[test]
fn inconsistent_slice_dimensions_rejected() {
    let err = RasterStack::new(
        "s",
        vec![Image2D::filled(100, 100, 0.0), Image2D::filled(50, 50, 0.0)],
    )
    .unwrap_err();
    assert!(matches!(err, ImagingError::InconsistentDimensions { .. }));
}

#[test]
fn rotation_cardinality_and_labels() {
    let crop = CropRecord {
        image: checkerboard(8),
        mask: binarize_raster(&checkerboard(8)),
        source_id: "s".into(),
        slice_index: 0,
        window_x: 0,
        window_y: 0,
        rotation_deg: 0,
        object_fraction: 0.5,
    };
    let crops: Vec<_> = (0..100).map(|_| crop.clone()).collect();
    let enriched = rotate_enrich(&crops).unwrap();
    assert_eq!(enriched.len(), 400);
    for &deg in &[0u16, 90, 180, 270] {
        assert_eq!(
            enriched.iter().filter(|c| c.rotation_deg == deg).count(),
            100
        );
    }
    // Rotation 0 preserves the original bits.
    assert_eq!(enriched[0].image, crop.image);
}

#[test]
fn four_quarter_turns_are_identity() {
    let img = checkerboard(7);
    let mut out = img.clone();
    for _ in 0..4 {
        out = rotate_image(&out, 90).unwrap();
    }
    assert_eq!(out, img);
}

#[test]
fn rotate_then_inverse_is_identity() {
    let img = checkerboard(9);
    for &deg in &[90u16, 180, 270] {
        let back = rotate_image(&rotate_image(&img, deg).unwrap(), (360 - deg) % 360).unwrap();
        assert_eq!(back, img);
    }
}

#[test]
fn non_square_rotation_errors() {
    let img = Image2D::filled(4, 6, 0.5);
    assert!(matches!(
        rotate_image(&img, 90),
        Err(ImagingError::NonSquareCrop { .. })
    ));
}

#[test]
fn resize_constant_stays_constant() {
    let img = Image2D::filled(17, 31, 0.7);
    let out = resize_bilinear(&img, 40, 9);
    for &v in &out.data {
        assert!((v - 0.7).abs() < 1e-6);
    }
}

#[test]
fn resize_output_dims() {
    let img = Image2D::filled(636, 636, 0.2);
    let out = resize_bilinear(&img, 320, 320);
    assert_eq!((out.width, out.height), (320, 320));
}

#[test]
fn resize_upscale_stays_within_input_range() {
    let img = checkerboard(2);
    let out = resize_bilinear(&img, 4, 4);
    for &v in &out.data {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn mask_resize_is_binary() {
    let mask = binarize_raster(&checkerboard(11));
    let out = resize_mask_nearest(&mask, 17, 5);
    assert!(out.data.iter().all(|&v| v == 0 || v == 1));
}

#[test]
fn synth_is_deterministic() {
    let params = SynthParams {
        n_stacks: 2,
        slices_per_stack: 2,
        width: 96,
        height: 96,
        ..SynthParams::default()
    };
    let (a_img, a_mask) = synthesize_dataset(&params);
    let (b_img, b_mask) = synthesize_dataset(&params);
    for (a, b) in a_img.iter().zip(&b_img) {
        for (sa, sb) in a.slices.iter().zip(&b.slices) {
            assert_eq!(sa, sb);
        }
    }
    for (a, b) in a_mask.iter().zip(&b_mask) {
        for (sa, sb) in a.slices.iter().zip(&b.slices) {
            assert_eq!(sa, sb);
        }
    }
}

#[test]
fn synth_zero_blobs_gives_empty_masks() {
    let params = SynthParams {
        n_stacks: 1,
        slices_per_stack: 2,
        width: 64,
        height: 64,
        blob_count_min: 0,
        blob_count_max: 0,
        ..SynthParams::default()
    };
    let (_, masks) = synthesize_dataset(&params);
    for m in &masks[0].slices {
        assert!(m.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn synth_mask_fractions_bounded() {
    // Mask coverage oracle: count foreground pixels per generated slice.
    let params = SynthParams {
        n_stacks: 10,
        slices_per_stack: 1,
        width: 640,
        height: 640,
        blob_count_min: 3,
        blob_count_max: 12,
        seed: 26,
        ..SynthParams::default()
    };
    let (_, masks) = synthesize_dataset(&params);
    for stack in &masks {
        for slice in &stack.slices {
            let frac = binarize_raster(slice).object_fraction();
            assert!(frac > 0.0 && frac < 0.5, "fraction {frac} out of (0,0.5)");
        }
    }
}

#[test]
fn crop_save_load_round_trip_preserves_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut crops = Vec::new();
    for (i, deg) in [0u16, 90, 180].iter().enumerate() {
        let img = checkerboard(8);
        let mask = binarize_raster(&checkerboard(8));
        crops.push(CropRecord {
            image: img,
            mask,
            source_id: "stack-a".into(),
            slice_index: i,
            window_x: 6 * i,
            window_y: 60,
            rotation_deg: *deg,
            object_fraction: 0.25 + i as f64 * 0.1,
        });
    }
    save_crops(&crops, dir.path()).unwrap();
    let back = load_crops(dir.path()).unwrap();
    assert_eq!(back.len(), crops.len());
    for (a, b) in crops.iter().zip(back.iter()) {
        assert_eq!(a.crop_id(), b.crop_id());
        assert_eq!(a.mask.data, b.mask.data);
        assert_eq!((a.window_x, a.window_y, a.slice_index), (b.window_x, b.window_y, b.slice_index));
        assert!((a.object_fraction - b.object_fraction).abs() < 1e-12);
        // images round-trip through 16-bit quantization
        for (&x, &y) in a.image.data.iter().zip(b.image.data.iter()) {
            assert!((x - y).abs() < 1.0 / 65535.0 + 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_rotation_round_trip(n in 2usize..10, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Image2D::new(n, n, data).unwrap();
        for deg in [90u16, 180, 270] {
            let back = rotate_image(&rotate_image(&img, deg).unwrap(), (360 - deg) % 360).unwrap();
            prop_assert_eq!(&back, &img);
        }
    }

    #[test]
    fn prop_mask_resize_binary(w in 2usize..20, h in 2usize..20, ow in 1usize..25, oh in 1usize..25) {
        let mask = binarize_raster(&checkerboard(w.max(h)));
        let m = mask.window(0, 0, w.min(mask.width), h.min(mask.height));
        let out = resize_mask_nearest(&m, ow, oh);
        prop_assert!(out.data.iter().all(|&v| v == 0 || v == 1));
    }
}
