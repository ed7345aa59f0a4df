//! Patch scores, pruning, score surfaces and top patches against direct
//! computations.

use fvdet_core::analysis::{
    gaussian_members, patch_score, patch_score_as, prune_patches_experiment, score_surface, surface_on_plane,
    top_patches, window_contributions, PatchScoreMode,
};
use fvdet_core::codebook::GmmModel;
use fvdet_core::detector::{evaluate_models, ApMethod};
use fvdet_core::encoder::{encode_pointwise, FvLayout, Normalization};
use fvdet_core::encoding::Accumulator;
use fvdet_core::model::LinearModel;
use fvdet_core::pca::fit_pca;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

fn random_model(layout: FvLayout, seed: u64) -> LinearModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LinearModel::new(0, layout, (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), -0.3).unwrap()
}

#[test]
fn patch_score_matches_dense_inner_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, d) = (4, 3);
    let gmm = GmmModel::new(
        k,
        d,
        (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..k * d).map(|_| rng.gen_range(0.2..2.0)).collect(),
        vec![0.1, 0.2, 0.3, 0.4],
    )
    .unwrap();
    let layout = FvLayout::new(2, k, d);
    let model = random_model(layout, 2);
    for _ in 0..200 {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pw = encode_pointwise(&gmm, &x);
        let dense = pw.densify(k);
        let norm = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
        for bin in 0..layout.bins() {
            let expected: f64 =
                model.bin_slice(bin).iter().zip(&dense).map(|(w, v)| w * v).sum::<f64>() / norm;
            assert!((patch_score(&gmm, &x, &model, bin) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn raw_contributions_add_up_to_the_raw_window_score() {
    let images = common::encoded_images(2, Normalization::Raw);
    let enc = &images[0].encoding;
    let model = random_model(enc.layout, 3);
    let mut acc = Accumulator::new(enc.layout);
    for w in &images[0].candidates {
        let (patches, contrib) = window_contributions(enc, w, &model, PatchScoreMode::Raw);
        acc.accumulate(enc, w, None);
        assert_eq!(patches.len(), acc.bin_count(0) as usize);
        let total: f64 = contrib.iter().sum::<f64>() + model.bias;
        let score = acc.score(&model, Normalization::Raw);
        assert!((total - score).abs() <= 1e-9 * (1.0 + score.abs()), "{w:?}: {total} vs {score}");
    }
}

#[test]
fn pruning_nothing_reproduces_detection_and_pruning_everything_leaves_the_bias() {
    for mode in [PatchScoreMode::Normalized, PatchScoreMode::Raw] {
        let images = common::encoded_images(4, Normalization::Intra);
        let model = random_model(images[0].encoding.layout, 4);
        let curve = prune_patches_experiment(&images, &[&model], 1, &[0.0, 0.5, 1.0], mode, 0.3, ApMethod::ElevenPoint)
            .unwrap();
        let baseline = evaluate_models(&images, &[&model], 1, 0.3, ApMethod::ElevenPoint);
        assert_eq!(curve.ap_values[0], baseline.map);
        assert_eq!(curve.per_class[0], baseline.per_class);
        assert_eq!(curve.all_bias, vec![false, false, true]);
    }
}

#[test]
fn surface_nodes_are_patch_scores_on_the_fitted_plane() {
    let images = common::encoded_images(3, Normalization::Intra);
    let first = common::test_image(100, 64, 64);
    let pipe = common::small_pipeline(&first, Normalization::Intra, 2);
    let model = random_model(images[0].encoding.layout, 5);
    let g = 1;
    let members = gaussian_members(&images, g);
    let grid = 7;
    let s = score_surface(&members, &pipe.gmm, &model, g, 2, grid).unwrap();
    let plane = fit_pca(&members, 2).unwrap();
    for row in 0..grid {
        for col in 0..grid {
            let x = plane.back_project(&s.coords(row, col));
            assert_eq!(s.value(row, col), patch_score_as(&pipe.gmm, &x, g, &model, 2));
        }
    }
    // the lattice center is the members' mean
    let mean: Vec<f64> = (0..members[0].len())
        .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
        .collect();
    let center = patch_score_as(&pipe.gmm, &mean, g, &model, 2);
    assert!((s.value(3, 3) - center).abs() < 1e-9);

    // flipping an axis mirrors the surface along it
    let mut flipped = plane.clone();
    flipped.flip_row(0);
    let m = surface_on_plane(flipped, &pipe.gmm, &model, g, 2, grid);
    for row in 0..grid {
        for col in 0..grid {
            assert!((m.value(row, col) - s.value(row, grid - 1 - col)).abs() < 1e-9);
        }
    }
}

#[test]
fn too_few_members_is_reported() {
    let first = common::test_image(100, 64, 64);
    let pipe = common::small_pipeline(&first, Normalization::Intra, 2);
    let model = random_model(pipe.layout(), 6);
    let x = vec![0.0; pipe.gmm.dim()];
    assert!(score_surface(&[&x, &x], &pipe.gmm, &model, 0, 0, 5).is_err());
}

#[test]
fn top_patches_match_a_full_sort() {
    let images = common::encoded_images(3, Normalization::Intra);
    let model = random_model(images[0].encoding.layout, 7);
    let (g, bin, n) = (2, 3, 15);
    let gmm = pipe_gmm();
    let mut all = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let enc = &im.encoding;
        for p in 0..enc.len() {
            if enc.patch(p).gaussian as usize == g {
                let s = patch_score_as(&gmm, enc.descriptor(p), g, &model, bin);
                all.push((s, i, p));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (top, short) = top_patches(&images, &model, g, bin, n).unwrap();
    assert!(!short);
    assert_eq!(top.len(), n);
    for (rec, (s, i, _)) in top.iter().zip(&all) {
        assert!((rec.score - s).abs() < 1e-9);
        assert_eq!(rec.image, *i);
    }
    assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
    let (everything, short) = top_patches(&images, &model, g, bin, all.len() + 5).unwrap();
    assert!(short);
    assert_eq!(everything.len(), all.len());
}

fn pipe_gmm() -> GmmModel {
    let first = common::test_image(100, 64, 64);
    common::small_pipeline(&first, Normalization::Intra, 2).gmm
}

/// Textbook Lloyd: assign each point to the first closest centroid, then
/// move every non-empty centroid to its members' mean.
fn naive_lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut prev: Vec<usize> = Vec::new();
    loop {
        let assign: Vec<usize> = points
            .iter()
            .map(|p| {
                let d: Vec<f64> = centroids.iter().map(|c| dist(p, c)).collect();
                (0..d.len()).fold(0, |best, j| if d[j] < d[best] { j } else { best })
            })
            .collect();
        if assign == prev {
            return (centroids, assign);
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (i, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        prev = assign;
    }
}

#[test]
fn lloyd_matches_a_textbook_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (n, d, k) = (rng.gen_range(10..80), rng.gen_range(1..5), rng.gen_range(1..6));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let init = fvdet_core::kmeans::kmeans_pp_init(&points, k, &mut rng);
        let start: Vec<Vec<f64>> = init.iter().map(|&i| points[i].clone()).collect();
        let ours = fvdet_core::kmeans::lloyd(&points, start.clone(), 1000);
        let (centroids, assign) = naive_lloyd(&points, start);
        assert_eq!(ours.assignments, assign);
        for (a, b) in ours.centroids.iter().flatten().zip(centroids.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
