//! Fixtures for the benchmarks: a synthetic scene, its vocabulary and
//! encoding, and a model with half of its groups zeroed.

use fvdet_cli::synth::{render, SynthSpec};
use fvdet_core::codebook::fit_gmm;
use fvdet_core::detector::{generate_candidates, CandidateParams};
use fvdet_core::encoder::Normalization;
use fvdet_core::encoding::{FeaturePipeline, ImageEncoding};
use fvdet_core::features::{extract_patches, DescriptorParams, PatchParams};
use fvdet_core::geometry::Window;
use fvdet_core::model::LinearModel;
use fvdet_core::pca::fit_pca;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Scene {
    pub pipeline: FeaturePipeline,
    pub encoding: ImageEncoding,
    pub windows: Vec<Window>,
    pub dense: LinearModel,
    /// `dense` with every other group zeroed.
    pub half: LinearModel,
}

/// One synthetic image at the default size encoded with K=16, D=32, R=4.
pub fn scene() -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = SynthSpec::default();
    let (image, _) = render(&spec, &mut rng);
    let patch = PatchParams::default();
    let descriptor = DescriptorParams::default();
    let raw: Vec<Vec<f64>> = extract_patches(&image, &patch, &descriptor).into_iter().map(|p| p.raw).collect();
    let pca = fit_pca(&raw, 32).expect("enough patches");
    let projected: Vec<Vec<f64>> = raw.iter().map(|x| pca.project(x)).collect();
    let gmm = fit_gmm(&projected, 16, 1).expect("enough patches");
    let pipeline = FeaturePipeline {
        patch,
        descriptor,
        drop_zero_energy: false,
        pca,
        gmm,
        pyramid: 4,
        normalization: Normalization::Intra,
    };
    let encoding = pipeline.encode_image(&image);
    let windows = generate_candidates(spec.width, spec.height, &CandidateParams::default());
    let layout = pipeline.layout();
    let weights: Vec<f64> = (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dense = LinearModel::new(0, layout, weights.clone(), 0.0).expect("layout length");
    let mut sparse = weights;
    for g in (0..layout.groups()).step_by(2) {
        sparse[layout.group_range(g)].iter_mut().for_each(|v| *v = 0.0);
    }
    let half = LinearModel::new(0, layout, sparse, 0.0).expect("layout length");
    Scene {
        pipeline,
        encoding,
        windows,
        dense,
        half,
    }
}
