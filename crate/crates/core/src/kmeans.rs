//! Seeded k-means (k-means++ seeding, Lloyd iterations).

use rand::Rng;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks `k` initial centers: the first uniformly, each next one with
/// probability proportional to the squared distance to the nearest chosen
/// center. Returns indices into `points`.
pub fn kmeans_pp_init<S: AsRef<[f64]>, R: Rng>(points: &[S], k: usize, rng: &mut R) -> Vec<usize> {
    assert!(!points.is_empty() && k > 0, "k-means++ needs points and k > 0");
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), points[chosen[0]].as_ref()))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            // guard against rounding at the tail landing on a zero-weight point
            if nearest[pick] == 0.0 {
                pick = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        let c = points[next].as_ref();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), c));
        }
    }
    chosen
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub objective: f64,
    /// Clusters that ended with no members (their centroid is stale).
    pub empty: Vec<bool>,
    pub iterations: usize,
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from the given centroids until assignments stop changing.
pub fn lloyd<S: AsRef<[f64]>>(points: &[S], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    let mut empty = vec![false; k];
    loop {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, _) = nearest_centroid(p.as_ref(), &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.as_ref()).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            empty[j] = counts[j] == 0;
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let mut counts = vec![0usize; k];
    let mut objective = 0.0;
    for (&a, p) in assignments.iter().zip(points) {
        counts[a] += 1;
        objective += sq_dist(p.as_ref(), &centroids[a]);
    }
    for j in 0..k {
        empty[j] = counts[j] == 0;
    }
    KMeansResult {
        centroids,
        assignments,
        objective,
        empty,
        iterations,
    }
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans<S: AsRef<[f64]>, R: Rng>(points: &[S], k: usize, max_iter: usize, rng: &mut R) -> KMeansResult {
    let init = kmeans_pp_init(points, k, rng);
    let centroids = init.iter().map(|&i| points[i].as_ref().to_vec()).collect();
    lloyd(points, centroids, max_iter)
}
