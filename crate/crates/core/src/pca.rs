//! PCA decorrelation and projection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Linear map `x -> basis * (x - mean)` with orthonormal basis rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    mean: Vec<f64>,
    /// `out_dim x in_dim`, row-major.
    basis: Vec<f64>,
    /// Sample variance along each basis row.
    variances: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl PcaProjection {
    pub fn from_parts(
        mean: Vec<f64>,
        basis: Vec<f64>,
        variances: Vec<f64>,
        out_dim: usize,
    ) -> Result<Self> {
        let in_dim = mean.len();
        if out_dim == 0 || out_dim > in_dim {
            return Err(Error::InvalidArgument(format!(
                "output dimension {out_dim} must be in 1..={in_dim}"
            )));
        }
        if basis.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                what: "PCA basis length",
                expected: in_dim * out_dim,
                got: basis.len(),
            });
        }
        if variances.len() != out_dim {
            return Err(Error::DimensionMismatch {
                what: "PCA variance count",
                expected: out_dim,
                got: variances.len(),
            });
        }
        Ok(Self {
            mean,
            basis,
            variances,
            in_dim,
            out_dim,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        Self {
            mean: vec![0.0; dim],
            basis,
            variances: vec![1.0; dim],
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.project_into(x, &mut out);
        out
    }

    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, row) in out.iter_mut().zip(self.basis.chunks_exact(self.in_dim)) {
            *o = row
                .iter()
                .zip(x.iter().zip(&self.mean))
                .map(|(b, (v, m))| b * (v - m))
                .sum();
        }
    }

    /// `basis^T * y + mean`.
    pub fn back_project(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (coef, row) in y.iter().zip(self.basis.chunks_exact(self.in_dim)) {
            for (xi, b) in x.iter_mut().zip(row) {
                *xi += coef * b;
            }
        }
        x
    }

    /// Negates basis row `i` (the projection stays a valid PCA).
    pub fn flip_row(&mut self, i: usize) {
        let d = self.in_dim;
        self.basis[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = -*v);
    }
}

/// Fits the top-`out_dim` principal directions of `samples`, ordered by
/// decreasing variance. Rows are sign-normalized so that their largest
/// magnitude entry is positive. A rank-deficient sample is completed with an
/// orthonormal complement and logged.
pub fn fit_pca<S: AsRef<[f64]>>(samples: &[S], out_dim: usize) -> Result<PcaProjection> {
    let n = samples.len();
    let in_dim = samples.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::InvalidArgument(format!(
            "PCA dimension {out_dim} must be in 1..={in_dim}"
        )));
    }
    if n <= out_dim {
        return Err(Error::InsufficientData(format!(
            "PCA to {out_dim} dimensions needs more than {out_dim} samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; in_dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != in_dim {
            return Err(Error::DimensionMismatch {
                what: "PCA sample length",
                expected: in_dim,
                got: s.len(),
            });
        }
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // upper triangle of the scatter matrix
    let mut cov = vec![0.0; in_dim * in_dim];
    let mut centered = vec![0.0; in_dim];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s.as_ref()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..in_dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * in_dim..(i + 1) * in_dim];
            for j in i..in_dim {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    let cov = DMatrix::from_fn(in_dim, in_dim, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        cov[a * in_dim + b] / denom
    });

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..in_dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-12 * top.max(f64::MIN_POSITIVE))
        .count();
    if rank < out_dim {
        log::warn!(
            "PCA sample has rank {rank} < {out_dim}; completing the basis with an arbitrary orthonormal complement"
        );
    }

    let mut basis = Vec::with_capacity(out_dim * in_dim);
    let mut variances = Vec::with_capacity(out_dim);
    for &idx in order.iter().take(out_dim) {
        let col = eig.eigenvectors.column(idx);
        let mut row: Vec<f64> = col.iter().copied().collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
            .0;
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend_from_slice(&row);
        variances.push(eig.eigenvalues[idx].max(0.0));
    }
    PcaProjection::from_parts(mean, basis, variances, out_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|j| rng.gen::<f64>() * (1.0 + j as f64)).collect())
            .collect()
    }

    fn max_gram_error(p: &PcaProjection) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..p.out_dim() {
            for j in 0..p.out_dim() {
                let dot: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn two_axis_data_recovers_axes_in_variance_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let mut v = vec![0.5; 128];
                v[0] += rng.gen_range(-3.0..3.0);
                v[1] += rng.gen_range(-1.0..1.0);
                v
            })
            .collect();
        let p = fit_pca(&samples, 2).unwrap();
        // closed-form eigenvectors of the 2x2 sample covariance of dims 0, 1
        let n = samples.len() as f64;
        let m0 = samples.iter().map(|v| v[0]).sum::<f64>() / n;
        let m1 = samples.iter().map(|v| v[1]).sum::<f64>() / n;
        let c = |f: &dyn Fn(&Vec<f64>) -> f64| samples.iter().map(f).sum::<f64>() / (n - 1.0);
        let a = c(&|v| (v[0] - m0) * (v[0] - m0));
        let b = c(&|v| (v[0] - m0) * (v[1] - m1));
        let d = c(&|v| (v[1] - m1) * (v[1] - m1));
        let theta = 0.5 * (2.0 * b).atan2(a - d);
        let (e0, e1) = ([theta.cos(), theta.sin()], [-theta.sin(), theta.cos()]);
        for (row, e) in [(p.row(0), e0), (p.row(1), e1)] {
            let dot = row[0] * e[0] + row[1] * e[1];
            assert!((dot.abs() - 1.0).abs() < 1e-9, "dot {dot}");
            assert!(row[2..].iter().all(|x| x.abs() < 1e-9));
        }
        assert!(p.variances()[0] > p.variances()[1]);
    }

    #[test]
    fn complete_basis_reconstructs_exactly() {
        let samples = random_samples(300, 16, 2);
        let p = fit_pca(&samples, 16).unwrap();
        for s in samples.iter().take(10) {
            let back = p.back_project(&p.project(s));
            for (a, b) in back.iter().zip(s) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_projects_to_origin() {
        let samples = random_samples(100, 8, 3);
        let p = fit_pca(&samples, 4).unwrap();
        assert!(p.project(p.mean()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_projection_is_identity() {
        let p = PcaProjection::identity(128);
        let x: Vec<f64> = (0..128).map(|i| i as f64 * 0.25).collect();
        assert_eq!(p.project(&x), x);
    }

    #[test]
    fn rank_deficient_basis_is_still_orthonormal() {
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let mut v = vec![0.0; 10];
                v[3] = i as f64;
                v
            })
            .collect();
        let p = fit_pca(&samples, 5).unwrap();
        assert!(max_gram_error(&p) < 1e-9);
    }

    #[test]
    fn projected_sample_is_decorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let a: f64 = rng.gen();
                let b: f64 = rng.gen();
                (0..12).map(|j| a * j as f64 + b * (12 - j) as f64 + rng.gen::<f64>() * 0.1).collect()
            })
            .collect();
        let p = fit_pca(&samples, 6).unwrap();
        assert!(max_gram_error(&p) < 1e-5);
        let proj: Vec<Vec<f64>> = samples.iter().map(|s| p.project(s)).collect();
        let mut cov = vec![vec![0.0; 6]; 6];
        for y in &proj {
            for i in 0..6 {
                for j in 0..6 {
                    cov[i][j] += y[i] * y[j] / 499.0;
                }
            }
        }
        let max_diag = (0..6).map(|i| cov[i][i]).fold(0.0, f64::max);
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!(cov[i][j].abs() <= 1e-3 * max_diag);
                }
            }
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let samples = random_samples(4, 8, 5);
        assert!(matches!(fit_pca(&samples, 4), Err(Error::InsufficientData(_))));
    }
}
