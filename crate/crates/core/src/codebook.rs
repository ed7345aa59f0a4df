//! Diagonal-covariance GMM vocabulary: EM training and hard assignment.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans_pp_init, sq_dist};

/// Minimum absolute variance floor, used when the data has no variance at all.
const ABSOLUTE_VARIANCE_FLOOR: f64 = 1e-10;
/// E-step work unit. Fixed so that reductions do not depend on thread count.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    k: usize,
    d: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
    priors: Vec<f64>,
    inv_std: Vec<f64>,
    /// `log pi_k - 0.5 * sum_j log(2 pi sigma_kj^2)`
    log_norm: Vec<f64>,
}

impl GmmModel {
    /// Validates the parameters. Priors must be positive and sum to one
    /// within 1e-6 (the tolerance of single-precision storage).
    pub fn new(
        k: usize,
        d: usize,
        means: Vec<f64>,
        variances: Vec<f64>,
        priors: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidArgument("GMM needs k > 0 and d > 0".into()));
        }
        for (what, len, expected) in [
            ("GMM means", means.len(), k * d),
            ("GMM variances", variances.len(), k * d),
            ("GMM priors", priors.len(), k),
        ] {
            if len != expected {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got: len,
                });
            }
        }
        if priors.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidArgument("GMM priors must be positive".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "GMM priors sum to {total}, expected 1"
            )));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "GMM variances must be positive and finite".into(),
            ));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("GMM means must be finite".into()));
        }
        let inv_std = variances.iter().map(|v| 1.0 / v.sqrt()).collect();
        let log_norm = (0..k)
            .map(|c| {
                priors[c].ln()
                    - 0.5
                        * variances[c * d..(c + 1) * d]
                            .iter()
                            .map(|v| (2.0 * PI * v).ln())
                            .sum::<f64>()
            })
            .collect();
        Ok(Self {
            k,
            d,
            means,
            variances,
            priors,
            inv_std,
            log_norm,
        })
    }

    pub fn num_components(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.d..(k + 1) * self.d]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.d..(k + 1) * self.d]
    }

    /// `1 / sigma_k`, elementwise.
    pub fn inv_std(&self, k: usize) -> &[f64] {
        &self.inv_std[k * self.d..(k + 1) * self.d]
    }

    /// `log pi_k + log N(x; mu_k, sigma_k^2)`.
    pub fn log_joint(&self, x: &[f64], k: usize) -> f64 {
        let mahal: f64 = x
            .iter()
            .zip(self.mean(k))
            .zip(self.inv_std(k))
            .map(|((xi, m), is)| {
                let z = (xi - m) * is;
                z * z
            })
            .sum();
        self.log_norm[k] - 0.5 * mahal
    }

    /// Most probable component; ties go to the lowest index.
    pub fn hard_assign(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.d);
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.k {
            let lp = self.log_joint(x, k);
            if lp > best.1 {
                best = (k, lp);
            }
        }
        best.0
    }

    /// Posterior responsibilities and `log p(x)`.
    pub fn responsibilities(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut lp: Vec<f64> = (0..self.k).map(|k| self.log_joint(x, k)).collect();
        let lse = log_sum_exp(&lp);
        lp.iter_mut().for_each(|v| *v = (*v - lse).exp());
        (lp, lse)
    }

    /// Mean per-point log-likelihood.
    pub fn mean_log_likelihood<S: AsRef<[f64]>>(&self, samples: &[S]) -> f64 {
        let lp: Vec<f64> = samples
            .iter()
            .map(|s| {
                let v: Vec<f64> = (0..self.k).map(|k| self.log_joint(s.as_ref(), k)).collect();
                log_sum_exp(&v)
            })
            .collect();
        lp.iter().sum::<f64>() / samples.len() as f64
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmParams {
    pub max_iter: usize,
    /// Stop when the relative mean log-likelihood gain drops below this.
    pub tol: f64,
    /// Variance floor as a fraction of the mean per-dimension data variance.
    pub floor_ratio: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-5,
            floor_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the parameters at each E-step.
    pub log_likelihoods: Vec<f64>,
    pub variance_floor: f64,
    pub reseeded: usize,
    pub converged: bool,
}

struct ChunkStats {
    nk: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    ll: f64,
    worst: (f64, usize),
}

pub fn fit_gmm<S: AsRef<[f64]> + Sync>(samples: &[S], k: usize, seed: u64) -> Result<GmmModel> {
    fit_gmm_with(samples, k, seed, &GmmParams::default()).map(|f| f.model)
}

/// k-means++ seeded EM with diagonal covariances, computed in log space.
pub fn fit_gmm_with<S: AsRef<[f64]> + Sync>(
    samples: &[S],
    k: usize,
    seed: u64,
    params: &GmmParams,
) -> Result<GmmFit> {
    let n = samples.len();
    if k == 0 {
        return Err(Error::InvalidArgument("GMM needs at least one component".into()));
    }
    if n < 10 * k {
        return Err(Error::InsufficientData(format!(
            "GMM with {k} components needs at least {} samples, got {n}",
            10 * k
        )));
    }
    let d = samples[0].as_ref().len();
    if let Some(bad) = samples.iter().find(|s| s.as_ref().len() != d) {
        return Err(Error::DimensionMismatch {
            what: "GMM sample length",
            expected: d,
            got: bad.as_ref().len(),
        });
    }
    let mut distinct = HashSet::new();
    for s in samples {
        distinct.insert(s.as_ref().iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if distinct.len() >= k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "only {} distinct points for {k} components",
            distinct.len()
        )));
    }

    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s.as_ref()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for s in samples {
        var.iter_mut()
            .zip(s.as_ref().iter().zip(&mean))
            .for_each(|(a, (v, m))| *a += (v - m) * (v - m));
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    let mean_var = var.iter().sum::<f64>() / d as f64;
    let floor = (params.floor_ratio * mean_var).max(ABSOLUTE_VARIANCE_FLOOR);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp_init(samples, k, &mut rng);
    let mut means: Vec<f64> = centers
        .iter()
        .flat_map(|&i| samples[i].as_ref().iter().copied())
        .collect();
    let mut counts = vec![0usize; k];
    for s in samples {
        let s = s.as_ref();
        let (mut best, mut bd) = (0, f64::INFINITY);
        for c in 0..k {
            let dist = sq_dist(s, &means[c * d..(c + 1) * d]);
            if dist < bd {
                best = c;
                bd = dist;
            }
        }
        counts[best] += 1;
    }
    let priors: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = priors.iter().sum();
    let mut model = GmmModel::new(
        k,
        d,
        means.clone(),
        (0..k).flat_map(|_| var.iter().map(|v| v.max(floor))).collect(),
        priors.iter().map(|p| p / total).collect(),
    )?;

    let mut log_likelihoods = Vec::new();
    let mut reseeded = 0;
    let mut converged = false;
    for iter in 0..=params.max_iter {
        let stats = e_step(&model, samples);
        let ll = stats.ll / n as f64;
        if let Some(&prev) = log_likelihoods.last() {
            let gain = (ll - prev) / f64::abs(prev).max(f64::MIN_POSITIVE);
            log_likelihoods.push(ll);
            if gain < params.tol {
                converged = true;
                break;
            }
        } else {
            log_likelihoods.push(ll);
        }
        if iter == params.max_iter {
            break;
        }

        let mut variances = vec![0.0; k * d];
        let mut priors = vec![0.0; k];
        for c in 0..k {
            let nk = stats.nk[c];
            let (mu, va) = (c * d..(c + 1) * d, c * d..(c + 1) * d);
            if nk <= 1e-10 * n as f64 {
                // empty component: restart it on the worst-explained point
                reseeded += 1;
                log::warn!("GMM component {c} emptied at iteration {iter}; re-seeding");
                means[mu.clone()].copy_from_slice(samples[stats.worst.1].as_ref());
                variances[va].iter_mut().zip(&var).for_each(|(v, g)| *v = g.max(floor));
                priors[c] = 1.0 / n as f64;
                continue;
            }
            for j in 0..d {
                let m = stats.sx[c * d + j] / nk;
                means[c * d + j] = m;
                variances[c * d + j] = (stats.sxx[c * d + j] / nk - m * m).max(floor);
            }
            priors[c] = nk / n as f64;
        }
        let total: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= total);
        model = GmmModel::new(k, d, means.clone(), variances, priors)?;
    }
    Ok(GmmFit {
        model,
        log_likelihoods,
        variance_floor: floor,
        reseeded,
        converged,
    })
}

fn e_step<S: AsRef<[f64]> + Sync>(model: &GmmModel, samples: &[S]) -> ChunkStats {
    let (k, d) = (model.k, model.d);
    let partials: Vec<ChunkStats> = samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut st = ChunkStats {
                nk: vec![0.0; k],
                sx: vec![0.0; k * d],
                sxx: vec![0.0; k * d],
                ll: 0.0,
                worst: (f64::INFINITY, 0),
            };
            let mut lp = vec![0.0; k];
            for (i, s) in chunk.iter().enumerate() {
                let x = s.as_ref();
                for (c, v) in lp.iter_mut().enumerate() {
                    *v = model.log_joint(x, c);
                }
                let lse = log_sum_exp(&lp);
                st.ll += lse;
                if lse < st.worst.0 {
                    st.worst = (lse, ci * CHUNK + i);
                }
                for c in 0..k {
                    let r = (lp[c] - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    st.nk[c] += r;
                    let sx = &mut st.sx[c * d..(c + 1) * d];
                    let sxx = &mut st.sxx[c * d..(c + 1) * d];
                    for j in 0..d {
                        sx[j] += r * x[j];
                        sxx[j] += r * x[j] * x[j];
                    }
                }
            }
            st
        })
        .collect();
    let mut it = partials.into_iter();
    let mut acc = it.next().expect("at least one chunk");
    for p in it {
        acc.nk.iter_mut().zip(&p.nk).for_each(|(a, b)| *a += b);
        acc.sx.iter_mut().zip(&p.sx).for_each(|(a, b)| *a += b);
        acc.sxx.iter_mut().zip(&p.sxx).for_each(|(a, b)| *a += b);
        acc.ll += p.ll;
        if p.worst.0 < acc.worst.0 {
            acc.worst = p.worst;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(n0: usize, n1: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut out: Vec<Vec<f64>> = Vec::new();
        for i in 0..n0 + n1 {
            let c = if i < n0 { [0.0, 0.0, 0.0] } else { [20.0, -20.0, 10.0] };
            out.push(c.iter().map(|m| m + noise.sample(&mut rng)).collect());
        }
        // interleave so that order does not reveal the labels
        let mut idx: Vec<usize> = (0..out.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        idx.into_iter().map(|i| out[i].clone()).collect()
    }

    #[test]
    fn identical_points_single_component() {
        let samples = vec![vec![0.25, -1.0]; 30];
        let fit = fit_gmm_with(&samples, 1, 0, &GmmParams::default()).unwrap();
        assert_eq!(fit.model.mean(0), &[0.25, -1.0]);
        assert!(fit.model.variance(0).iter().all(|&v| v == fit.variance_floor));
        assert_eq!(fit.model.priors(), &[1.0]);
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let samples = two_clusters(600, 400, 7);
        let fit = fit_gmm_with(&samples, 2, 11, &GmmParams::default()).unwrap();
        let m = &fit.model;
        let (a, b) = if m.mean(0)[0] < m.mean(1)[0] { (0, 1) } else { (1, 0) };
        for (got, want) in m.mean(a).iter().zip([0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 0.1, "{got} vs {want}");
        }
        for (got, want) in m.mean(b).iter().zip([20.0, -20.0, 10.0]) {
            assert!((got - want).abs() < 0.1, "{got} vs {want}");
        }
        assert!((m.priors()[a] - 0.6).abs() < 0.05);
        assert!((m.priors()[b] - 0.4).abs() < 0.05);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..4).map(|_| rng.gen::<f64>().powi(3)).collect())
            .collect();
        let fit = fit_gmm_with(&samples, 6, 2, &GmmParams::default()).unwrap();
        assert_eq!(fit.reseeded, 0);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let samples = two_clusters(100, 100, 1);
        let a = fit_gmm(&samples, 3, 42).unwrap();
        let b = fit_gmm(&samples, 3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_distinct_points() {
        let mut samples = vec![vec![1.0]; 40];
        samples[0] = vec![2.0];
        assert!(matches!(fit_gmm(&samples, 3, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn too_few_samples() {
        let samples: Vec<Vec<f64>> = (0..19).map(|i| vec![i as f64]).collect();
        assert!(matches!(fit_gmm(&samples, 2, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let samples = two_clusters(50, 50, 3);
        let m = fit_gmm(&samples, 4, 0).unwrap();
        for s in &samples {
            let (r, _) = m.responsibilities(s);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((m.priors().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hard_assign_prefers_lowest_index_on_ties() {
        let m = GmmModel::new(2, 1, vec![-1.0, 1.0], vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(m.hard_assign(&[0.0]), 0);
        assert_eq!(m.hard_assign(&[0.5]), 1);
        assert_eq!(m.hard_assign(&[-3.0]), 0);
    }
}
