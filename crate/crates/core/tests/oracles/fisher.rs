//! Point-wise Fisher statistics written out coordinate by coordinate.

use fvdet_core::codebook::GmmModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
    let means = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let variances = (0..k * d).map(|_| rng.gen_range(0.05..3.0)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GmmModel::new(k, d, means, variances, raw.iter().map(|p| p / total).collect()).unwrap()
}

/// Most probable component (first on ties) by a direct log-density loop.
pub fn oracle_assign(gmm: &GmmModel, x: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..gmm.num_components() {
        let mut lp = gmm.priors()[k].ln();
        for j in 0..gmm.dim() {
            let var = gmm.variance(k)[j];
            let diff = x[j] - gmm.mean(k)[j];
            lp -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
        }
        if lp > best.0 {
            best = (lp, k);
        }
    }
    best.1
}

/// Dense `K * 2D` statistics of one descriptor, written out per coordinate.
pub fn oracle_pointwise(gmm: &GmmModel, x: &[f64]) -> Vec<f64> {
    let (k, d) = (gmm.num_components(), gmm.dim());
    let a = oracle_assign(gmm, x);
    let mut out = vec![0.0; k * 2 * d];
    let prior = gmm.priors()[a];
    for j in 0..d {
        let sigma = gmm.variance(a)[j].sqrt();
        let u = (x[j] - gmm.mean(a)[j]) / sigma;
        out[a * 2 * d + j] = u / prior.sqrt();
        out[a * 2 * d + d + j] = (u * u - 1.0) / (2.0 * prior).sqrt();
    }
    out
}
