//! Property-based invariants over randomized inputs.

use fusenet::dataio::{crop_at, load_depth_png, save_depth_png, synth_generate, SyntheticSceneConfig};
use fusenet::geometry::{gather, project, scatter, unproject, DepthImage, Intrinsics, PointSet};
use fusenet::neighbors::{brute_force_knn, KdTree};
use fusenet::Tensor;
use proptest::prelude::*;

fn arb_points(max_n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(
        (
            -20.0f64..20.0,
            -20.0f64..20.0,
            0.1f64..50.0,
        )
            .prop_map(|(x, y, z)| [x, y, z]),
        1..max_n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_always_matches_brute_force(
        coords in arb_points(60),
        qx in -25.0f64..25.0,
        qy in -25.0f64..25.0,
        qz in -5.0f64..55.0,
        k in 1usize..8,
    ) {
        prop_assume!(k <= coords.len());
        let points = PointSet::new(coords).unwrap();
        let tree = KdTree::build(&points).unwrap();
        let q = [qx, qy, qz];
        prop_assert_eq!(tree.query_knn(&q, k).unwrap(), brute_force_knn(&points, &q, k).unwrap());
    }

    #[test]
    fn unproject_project_is_identity_at_full_scale(
        coords in arb_points(40),
    ) {
        // Build a depth image from distinct pixels, lift to 3D, and
        // project back: every point must land on its source pixel.
        let intr = Intrinsics::new(50.0, 50.0, 31.5, 23.5, 64, 48).unwrap();
        let mut values = vec![0.0; 48 * 64];
        for (i, p) in coords.iter().enumerate() {
            let idx = (i * 97) % (48 * 64);
            values[idx] = p[2];
        }
        let depth = DepthImage::from_values(48, 64, values).unwrap();
        prop_assume!(depth.mask_count() > 0);
        let points = unproject(&depth, &intr).unwrap();
        let pixels = project(&points, &intr, 1.0).unwrap();
        let source = depth.masked_pixels();
        for i in 0..points.len() {
            prop_assert!(pixels.in_bounds[i]);
            prop_assert_eq!(pixels.u[i] as usize, source[i].0);
            prop_assert_eq!(pixels.v[i] as usize, source[i].1);
        }
    }

    #[test]
    fn scatter_then_gather_averages_collisions(
        coords in arb_points(30),
        feat_seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let points = PointSet::new(coords).unwrap();
        let intr = Intrinsics::new(30.0, 30.0, 15.5, 11.5, 32, 24).unwrap();
        let pixels = project(&points, &intr, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(feat_seed);
        let n = points.len();
        let feats = Tensor::new(
            vec![n, 2],
            (0..n * 2).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
        ).unwrap();
        let map = scatter(&feats, &pixels).unwrap();
        let back = gather(&map, &pixels).unwrap();
        // A point colliding with nobody gets its own feature back.
        let mut hits = std::collections::HashMap::new();
        for i in 0..n {
            if let Some(px) = pixel_index(&pixels, i) {
                *hits.entry(px).or_insert(0usize) += 1;
            }
        }
        for i in 0..n {
            if let Some(px) = pixel_index(&pixels, i) {
                if hits[&px] == 1 {
                    prop_assert!((back.data[i * 2] - feats.data[i * 2]).abs() < 1e-12);
                    prop_assert!((back.data[i * 2 + 1] - feats.data[i * 2 + 1]).abs() < 1e-12);
                }
            } else {
                prop_assert_eq!(back.data[i * 2], 0.0);
            }
        }
    }

    #[test]
    fn depth_png_round_trip_on_codec_grid(
        raw in prop::collection::vec(0u16..20000, 12..48),
    ) {
        let w = raw.len();
        let values: Vec<f64> = raw.iter().map(|&v| v as f64 / 256.0).collect();
        let depth = DepthImage::from_values(1, w, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        save_depth_png(&path, &depth).unwrap();
        let back = load_depth_png(&path).unwrap();
        prop_assert_eq!(back.values, depth.values);
    }

    #[test]
    fn crops_are_windows_of_the_source(
        dy in 0usize..16,
        dx in 0usize..32,
        seed in 0u64..50,
    ) {
        let frame = synth_generate(&SyntheticSceneConfig {
            seed,
            ..SyntheticSceneConfig::default()
        }).unwrap();
        let cropped = crop_at(&frame, dy, dx, 32, 96).unwrap();
        let w = frame.width();
        for v in 0..32 {
            for u in 0..96 {
                prop_assert_eq!(
                    cropped.gt.values[v * 96 + u],
                    frame.gt.values[(v + dy) * w + (u + dx)]
                );
                prop_assert_eq!(
                    cropped.sparse.mask[v * 96 + u],
                    frame.sparse.mask[(v + dy) * w + (u + dx)]
                );
            }
        }
    }
}

fn pixel_index(pixels: &fusenet::geometry::ProjectedPixels, i: usize) -> Option<usize> {
    if pixels.in_bounds[i] {
        Some(pixels.v[i] as usize * pixels.grid_width + pixels.u[i] as usize)
    } else {
        None
    }
}
