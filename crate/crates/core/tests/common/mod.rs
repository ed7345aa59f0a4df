//! Fixtures shared by the integration tests.

use fvdet_core::codebook::fit_gmm;
use fvdet_core::encoder::Normalization;
use fvdet_core::encoding::FeaturePipeline;
use fvdet_core::features::{extract_patches, DescriptorParams, PatchParams};
use fvdet_core::image::GrayImage;
use fvdet_core::pca::fit_pca;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random texture with a few bright and dark rectangles.
pub fn test_image(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse: Vec<f64> = (0..36).map(|_| rng.gen_range(0.2..0.8)).collect();
    let coarse = GrayImage::new(6, 6, coarse).unwrap();
    let mut img = coarse.resize(w, h);
    for _ in 0..6 {
        let (x0, y0) = (rng.gen_range(0..w - 10), rng.gen_range(0..h - 10));
        let (rw, rh) = (rng.gen_range(5..20).min(w - x0), rng.gen_range(5..20).min(h - y0));
        let v = rng.gen_range(0.0..1.0);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img.set(x, y, v);
            }
        }
    }
    for p in img.pixels_mut() {
        *p = (*p + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    img
}

pub fn small_pipeline(img: &GrayImage, normalization: Normalization, r: usize) -> FeaturePipeline {
    let patch = PatchParams {
        patch_size: 8,
        step: 3,
        num_scales: 4,
        scale_factor: 1.3,
    };
    let descriptor = DescriptorParams::default();
    let raw: Vec<Vec<f64>> = extract_patches(img, &patch, &descriptor).into_iter().map(|p| p.raw).collect();
    let pca = fit_pca(&raw, 6).unwrap();
    let projected: Vec<Vec<f64>> = raw.iter().map(|x| pca.project(x)).collect();
    let gmm = fit_gmm(&projected, 5, 1).unwrap();
    FeaturePipeline {
        patch,
        descriptor,
        drop_zero_energy: false,
        pca,
        gmm,
        pyramid: r,
        normalization,
    }
}

/// Encoded test images, each with one class-0 box and candidates.
#[allow(dead_code)]
pub fn encoded_images(n: usize, normalization: Normalization) -> Vec<fvdet_core::detector::EncodedImage> {
    use fvdet_core::detector::{generate_candidates, CandidateParams, EncodedImage, GroundTruth};
    use fvdet_core::geometry::Window;
    let first = test_image(100, 64, 64);
    let pipe = small_pipeline(&first, normalization, 2);
    let params = CandidateParams {
        max_candidates: 120,
        min_side: 16,
        ..CandidateParams::default()
    };
    (0..n)
        .map(|i| {
            let img = test_image(100 + i as u64, 64, 64);
            EncodedImage {
                encoding: pipe.encode_image(&img),
                objects: vec![GroundTruth {
                    class_id: 0,
                    window: Window::new(8 + i as u32 % 8, 10, 32, 30),
                }],
                candidates: generate_candidates(64, 64, &params),
            }
        })
        .collect()
}
