//! Linear model training: l2 hinge-loss SVM, group-lasso RDA, hard-negative
//! mining and l2 fine-tuning on a Gaussian support.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::ops::Range;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detector::{nms, score_encoded, Detection, EncodedImage};
use crate::encoder::FvLayout;
use crate::encoding::Accumulator;
use crate::error::{Error, Result};
use crate::geometry::{iou, Window};
use crate::model::LinearModel;

/// Rows per parallel chunk in loss evaluation; fixed so that reductions do
/// not depend on the thread count.
const LOSS_CHUNK: usize = 256;

/// `rda_gamma too small` is reported once `||w||` exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `lambda_l2 * ||w||^2 + mean hinge`.
    pub lambda_l2: f64,
    /// `lambda_group * sum_g ||w_g|| + mean hinge`.
    pub lambda_group: f64,
    pub mining_rounds: usize,
    /// Hard negatives added per image and class in each round.
    pub negatives_per_image: usize,
    /// Random round-0 negatives per image.
    pub initial_negatives_per_image: usize,
    /// Candidates at least this close to a ground-truth box are positives.
    pub positive_iou: f64,
    /// Round-0 negatives overlap every ground-truth box less than this.
    pub negative_iou: f64,
    /// Mined windows must overlap every same-class box less than this.
    pub mining_exclusion_iou: f64,
    /// Suppression applied to mined windows before taking the top ones.
    pub mining_nms: f64,
    pub rda_gamma: f64,
    pub rda_iterations: usize,
    /// Examples per RDA step; 0 uses the full batch.
    pub rda_batch: usize,
    pub svm_epochs: usize,
    pub eta0: f64,
    /// Steps between objective evaluations of the averaged iterate.
    pub check_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 1e-4,
            lambda_group: 1e-3,
            mining_rounds: 3,
            negatives_per_image: 2,
            initial_negatives_per_image: 10,
            positive_iou: 0.7,
            negative_iou: 0.3,
            mining_exclusion_iou: 0.5,
            mining_nms: 0.3,
            rda_gamma: 1.0,
            rda_iterations: 2000,
            rda_batch: 64,
            svm_epochs: 10,
            eta0: 1.0,
            check_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda_l2 >= 0.0) || !(self.lambda_group >= 0.0) {
            return bad("regularization strengths must be >= 0");
        }
        if !(self.rda_gamma > 0.0) || !(self.eta0 > 0.0) {
            return bad("rda_gamma and eta0 must be > 0");
        }
        if self.check_every == 0 {
            return bad("check_every must be >= 1");
        }
        Ok(())
    }
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressRow {
    pub iteration: usize,
    pub objective: f64,
    pub active_groups: usize,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: LinearModel,
    pub objective: f64,
    pub progress: Vec<ProgressRow>,
}

/// Mixes `parts` into `seed` with splitmix64; gives every sub-task its own
/// stable stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// `<w, x>` with four independent partial sums.
#[inline]
pub fn dot_f32(w: &[f64], x: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (wc, xc) = (w.chunks_exact(4), x.chunks_exact(4));
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (a, b) in wc.zip(xc) {
        for l in 0..4 {
            acc[l] += a[l] * f64::from(b[l]);
        }
    }
    let mut tail = 0.0;
    for (a, b) in wr.iter().zip(xr) {
        tail += a * f64::from(*b);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Training set after merging identical examples; `mult` are integer
/// multiplicities divided by their gcd.
struct Problem<'a> {
    rows: Vec<&'a [f32]>,
    labels: Vec<f64>,
    mult: Vec<u64>,
    total: f64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl<'a> Problem<'a> {
    fn new(positives: &[&'a [f32]], negatives: &[&'a [f32]], dim: usize) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::EmptyClass("positive"));
        }
        if negatives.is_empty() {
            return Err(Error::EmptyClass("negative"));
        }
        let mut rows: Vec<&[f32]> = Vec::new();
        let mut labels = Vec::new();
        let mut mult: Vec<u64> = Vec::new();
        let mut index: HashMap<u64, Vec<usize>> = HashMap::new();
        let labelled = positives.iter().map(|r| (*r, 1.0)).chain(negatives.iter().map(|r| (*r, -1.0)));
        for (row, y) in labelled {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "training example",
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite training example".into()));
            }
            let mut h = DefaultHasher::new();
            (y > 0.0).hash(&mut h);
            for v in row {
                v.to_bits().hash(&mut h);
            }
            let slot = index.entry(h.finish()).or_default();
            if let Some(&i) = slot.iter().find(|&&i| labels[i] == y && rows[i] == row) {
                mult[i] += 1;
            } else {
                slot.push(rows.len());
                rows.push(row);
                labels.push(y);
                mult.push(1);
            }
        }
        let g = mult.iter().copied().fold(0, gcd);
        for m in &mut mult {
            *m /= g;
        }
        let total = mult.iter().sum::<u64>() as f64;
        Ok(Self {
            rows,
            labels,
            mult,
            total,
        })
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    /// Weighted mean hinge loss.
    fn hinge(&self, w: &[f64], b: f64) -> f64 {
        let idx: Vec<usize> = (0..self.len()).collect();
        let partial: Vec<f64> = idx
            .par_chunks(LOSS_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&i| {
                        let m = self.labels[i] * (dot_f32(w, self.rows[i]) + b);
                        self.mult[i] as f64 * (1.0 - m).max(0.0)
                    })
                    .sum::<f64>()
            })
            .collect();
        partial.iter().sum::<f64>() / self.total
    }

    fn sampler(&self) -> WeightedIndex<u64> {
        WeightedIndex::new(&self.mult).expect("positive multiplicities")
    }
}

/// Coordinate ranges of the groups allowed by `mask`, merged when adjacent.
fn active_ranges(dim: usize, group_len: usize, mask: Option<&[bool]>) -> Vec<Range<usize>> {
    let Some(mask) = mask else {
        return vec![0..dim];
    };
    let mut out: Vec<Range<usize>> = Vec::new();
    for (g, _) in mask.iter().enumerate().filter(|(_, &a)| a) {
        let r = g * group_len..(g + 1) * group_len;
        match out.last_mut() {
            Some(last) if last.end == r.start => last.end = r.end,
            _ => out.push(r),
        }
    }
    out
}

fn count_active(w: &[f64], group_len: usize) -> usize {
    w.chunks(group_len).filter(|g| g.iter().any(|&v| v != 0.0)).count()
}

fn sq_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v * v).sum()
}

/// `lambda * ||w||^2 + mean hinge` over the given examples.
pub fn svm_objective(w: &[f64], b: f64, lambda: f64, positives: &[&[f32]], negatives: &[&[f32]]) -> Result<f64> {
    let p = Problem::new(positives, negatives, w.len())?;
    Ok(lambda * sq_norm(w) + p.hinge(w, b))
}

/// `lambda * sum_g ||w_g|| + mean hinge` with contiguous groups of `group_len`.
pub fn group_lasso_objective(
    w: &[f64],
    b: f64,
    lambda: f64,
    group_len: usize,
    positives: &[&[f32]],
    negatives: &[&[f32]],
) -> Result<f64> {
    let p = Problem::new(positives, negatives, w.len())?;
    Ok(group_penalty(w, group_len, lambda) + p.hinge(w, b))
}

fn group_penalty(w: &[f64], group_len: usize, lambda: f64) -> f64 {
    lambda * w.chunks(group_len).map(|g| sq_norm(g).sqrt()).sum::<f64>()
}

/// Seeded SGD with iterate averaging on `lambda_l2 ||w||^2 + mean hinge`.
pub fn train_svm_l2(
    positives: &[&[f32]],
    negatives: &[&[f32]],
    layout: FvLayout,
    class_id: usize,
    cfg: &TrainConfig,
) -> Result<Fit> {
    train_svm_l2_masked(positives, negatives, layout, class_id, cfg, None)
}

/// As [`train_svm_l2`] with every group outside `mask` held at exactly zero,
/// which is the same as training on FVs masked to the support.
pub fn train_svm_l2_masked(
    positives: &[&[f32]],
    negatives: &[&[f32]],
    layout: FvLayout,
    class_id: usize,
    cfg: &TrainConfig,
    mask: Option<&[bool]>,
) -> Result<Fit> {
    cfg.validate()?;
    let dim = layout.len();
    let group_len = layout.block_len();
    if let Some(m) = mask {
        if m.len() != layout.groups() {
            return Err(Error::DimensionMismatch {
                what: "group mask",
                expected: layout.groups(),
                got: m.len(),
            });
        }
        if !m.iter().any(|&a| a) {
            return Err(Error::InvalidArgument("empty support".into()));
        }
    }
    let problem = Problem::new(positives, negatives, dim)?;
    let ranges = active_ranges(dim, group_len, mask);
    let lambda = cfg.lambda_l2;
    let n = problem.len();
    let steps = cfg.svm_epochs.max(1) * n;
    let avg_start = if cfg.svm_epochs > 1 { n } else { 0 };
    let sampler = problem.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let (mut wa, mut ba) = (vec![0.0; dim], 0.0);
    let mut averaged = 0usize;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut progress = Vec::new();

    let mut evaluate = |t: usize, wa: &[f64], ba: f64, best: &mut Option<(f64, Vec<f64>, f64)>| {
        let obj = lambda * sq_norm(wa) + problem.hinge(wa, ba);
        progress.push(ProgressRow {
            iteration: t,
            objective: obj,
            active_groups: count_active(wa, group_len),
        });
        if best.as_ref().map_or(true, |(o, _, _)| obj < *o) {
            *best = Some((obj, wa.to_vec(), ba));
        }
    };

    for t in 0..steps {
        let i = sampler.sample(&mut rng);
        let (x, y) = (problem.rows[i], problem.labels[i]);
        let eta = cfg.eta0 / (1.0 + 2.0 * lambda * cfg.eta0 * t as f64);
        let margin = y * (dot_f32(&w, x) + b);
        let shrink = (1.0 - 2.0 * lambda * eta).max(0.0);
        for r in &ranges {
            if margin < 1.0 {
                for (wj, xj) in w[r.clone()].iter_mut().zip(&x[r.clone()]) {
                    *wj = *wj * shrink + eta * y * f64::from(*xj);
                }
            } else {
                w[r.clone()].iter_mut().for_each(|wj| *wj *= shrink);
            }
        }
        if margin < 1.0 {
            b += eta * y;
        }
        if t >= avg_start {
            averaged += 1;
            let mu = 1.0 / averaged as f64;
            for r in &ranges {
                for (a, v) in wa[r.clone()].iter_mut().zip(&w[r.clone()]) {
                    *a += (v - *a) * mu;
                }
            }
            ba += (b - ba) * mu;
            if averaged % cfg.check_every == 0 {
                evaluate(t + 1, &wa, ba, &mut best);
            }
        }
    }
    if averaged % cfg.check_every != 0 || averaged == 0 {
        evaluate(steps, &wa, ba, &mut best);
    }
    let (objective, w, b) = best.expect("at least one evaluation");
    Ok(Fit {
        model: LinearModel::new(class_id, layout, w, b)?,
        objective,
        progress,
    })
}

/// State exposed to an observer after every RDA step.
#[derive(Debug)]
pub struct RdaStep<'a> {
    pub iteration: usize,
    /// Running mean of the loss subgradients over the weights.
    pub mean_grad: &'a [f64],
    /// Iterate produced from `mean_grad`.
    pub weights: &'a [f64],
    pub bias: f64,
    pub lambda: f64,
    pub group_len: usize,
}

/// Group-lasso hinge training by regularized dual averaging.
pub fn train_group_lasso(
    positives: &[&[f32]],
    negatives: &[&[f32]],
    layout: FvLayout,
    class_id: usize,
    cfg: &TrainConfig,
) -> Result<Fit> {
    train_group_lasso_observed(positives, negatives, layout, class_id, cfg, |_| {})
}

/// RDA with closed-form group soft-thresholding: after step `t`, group `g`
/// is `0` when `||gbar_g|| <= lambda` and otherwise
/// `-(sqrt(t)/gamma) (1 - lambda/||gbar_g||) gbar_g`. The bias follows the
/// unregularized dual-averaging step. Returns the iterate with the lowest
/// objective among the checked ones.
pub fn train_group_lasso_observed(
    positives: &[&[f32]],
    negatives: &[&[f32]],
    layout: FvLayout,
    class_id: usize,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&RdaStep),
) -> Result<Fit> {
    cfg.validate()?;
    let dim = layout.len();
    let group_len = layout.block_len();
    let problem = Problem::new(positives, negatives, dim)?;
    let lambda = cfg.lambda_group;
    let sampler = problem.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let full_batch = cfg.rda_batch == 0;
    let all: Vec<usize> = (0..problem.len()).collect();
    let mut batch: Vec<usize> = Vec::with_capacity(cfg.rda_batch);

    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let mut grad_sum = vec![0.0; dim];
    let mut bias_sum = 0.0;
    let mut mean = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut progress = Vec::new();

    for t in 1..=cfg.rda_iterations.max(1) {
        // subgradient of the (weighted) mean hinge at the current iterate
        g.fill(0.0);
        let mut gb = 0.0;
        let (idx, weight_of, denom): (&[usize], &dyn Fn(usize) -> f64, f64) = if full_batch {
            (&all, &|i| problem.mult[i] as f64, problem.total)
        } else {
            batch.clear();
            batch.extend((0..cfg.rda_batch).map(|_| sampler.sample(&mut rng)));
            (&batch, &|_| 1.0, cfg.rda_batch as f64)
        };
        for &i in idx {
            let (x, y) = (problem.rows[i], problem.labels[i]);
            if y * (dot_f32(&w, x) + b) < 1.0 {
                let c = -y * weight_of(i) / denom;
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += c * f64::from(*xj);
                }
                gb += c;
            }
        }
        for (s, v) in grad_sum.iter_mut().zip(&g) {
            *s += v;
        }
        bias_sum += gb;

        let tf = t as f64;
        let step = tf.sqrt() / cfg.rda_gamma;
        for ((m, s), wj) in mean.iter_mut().zip(&grad_sum).zip(w.iter_mut()) {
            *m = s / tf;
            *wj = 0.0;
        }
        for (wg, mg) in w.chunks_mut(group_len).zip(mean.chunks(group_len)) {
            let norm = sq_norm(mg).sqrt();
            if norm > lambda {
                let c = -step * (1.0 - lambda / norm);
                for (wj, mj) in wg.iter_mut().zip(mg) {
                    *wj = c * mj;
                }
            }
        }
        b = -step * (bias_sum / tf);

        observer(&RdaStep {
            iteration: t,
            mean_grad: &mean,
            weights: &w,
            bias: b,
            lambda,
            group_len,
        });

        let norm = sq_norm(&w).sqrt();
        if !(norm <= DIVERGENCE_LIMIT) {
            return Err(Error::Diverged {
                norm,
                limit: DIVERGENCE_LIMIT,
                iteration: t,
            });
        }
        if t % cfg.check_every == 0 || t == cfg.rda_iterations.max(1) {
            let obj = group_penalty(&w, group_len, lambda) + problem.hinge(&w, b);
            progress.push(ProgressRow {
                iteration: t,
                objective: obj,
                active_groups: count_active(&w, group_len),
            });
            if best.as_ref().map_or(true, |(o, _, _)| obj < *o) {
                best = Some((obj, w.clone(), b));
            }
        }
    }
    let (objective, w, b) = best.expect("at least one evaluation");
    Ok(Fit {
        model: LinearModel::new(class_id, layout, w, b)?,
        objective,
        progress,
    })
}

/// Groups with non-zero weight norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub active: Vec<bool>,
    pub count: usize,
    pub fraction: f64,
}

impl Support {
    pub fn groups(&self) -> Vec<usize> {
        self.active.iter().enumerate().filter(|(_, &a)| a).map(|(g, _)| g).collect()
    }
}

pub fn gaussian_support(model: &LinearModel) -> Support {
    let active = model.active_groups();
    let count = active.iter().filter(|&&a| a).count();
    Support {
        fraction: count as f64 / active.len() as f64,
        active,
        count,
    }
}

/// A window of a training image.
pub type WindowKey = (usize, Window);

/// Normalized FVs of training windows, computed once and stored as f32.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    data: Vec<f32>,
    index: HashMap<WindowKey, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Computes the rows of `keys` not stored yet.
    pub fn ensure(&mut self, images: &[EncodedImage], keys: &[WindowKey]) {
        let mut missing: Vec<WindowKey> = Vec::new();
        let mut seen = HashSet::new();
        for k in keys {
            if !self.index.contains_key(k) && seen.insert(*k) {
                missing.push(*k);
            }
        }
        let rows: Vec<Vec<f32>> = missing
            .par_iter()
            .map_init(
                || None::<Accumulator>,
                |acc, (i, w)| {
                    let enc = &images[*i].encoding;
                    let acc = acc.get_or_insert_with(|| Accumulator::new(enc.layout));
                    acc.accumulate(enc, w, None);
                    acc.to_normalized(enc.normalization).data.iter().map(|&v| v as f32).collect()
                },
            )
            .collect();
        for (k, row) in missing.into_iter().zip(rows) {
            self.index.insert(k, self.data.len() / self.dim);
            self.data.extend_from_slice(&row);
        }
    }

    /// Rows of `keys`, which must have been ensured.
    pub fn rows(&self, keys: &[WindowKey]) -> Vec<&[f32]> {
        keys.iter()
            .map(|k| {
                let i = self.index[k];
                &self.data[i * self.dim..(i + 1) * self.dim]
            })
            .collect()
    }
}

/// Ground-truth boxes of `class_id` plus candidates overlapping one of them
/// by at least `positive_iou`.
pub fn positive_windows(images: &[EncodedImage], class_id: usize, cfg: &TrainConfig) -> Vec<WindowKey> {
    let mut out = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let boxes: Vec<Window> = im.objects.iter().filter(|o| o.class_id == class_id).map(|o| o.window).collect();
        let mut seen = HashSet::new();
        for b in &boxes {
            if seen.insert(*b) {
                out.push((i, *b));
            }
        }
        for c in &im.candidates {
            if boxes.iter().any(|b| iou(b, c) >= cfg.positive_iou) && seen.insert(*c) {
                out.push((i, *c));
            }
        }
    }
    out
}

/// Random candidates overlapping every ground-truth box by less than
/// `negative_iou`, drawn per image from a seed-derived stream.
pub fn initial_negatives(images: &[EncodedImage], cfg: &TrainConfig) -> Vec<WindowKey> {
    let mut out = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let pool: Vec<Window> = im
            .candidates
            .iter()
            .filter(|c| im.objects.iter().all(|o| iou(&o.window, c) < cfg.negative_iou))
            .copied()
            .collect();
        let n = cfg.initial_negatives_per_image.min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x6e65_67, i as u64]));
        let mut picked = sample(&mut rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|j| (i, pool[j])));
    }
    out
}

/// For every model, the top `per_image` scoring windows of each image that
/// overlap no same-class ground-truth box by `mining_exclusion_iou` or more,
/// after `mining_nms` suppression and excluding windows in `exclude`.
/// All models are scored from a single accumulation per window.
pub fn mine_hard_negatives_multi(
    models: &[&LinearModel],
    images: &[EncodedImage],
    per_image: usize,
    exclude: &[HashSet<WindowKey>],
    cfg: &TrainConfig,
) -> Vec<Vec<WindowKey>> {
    let per_image_hits: Vec<Vec<Vec<WindowKey>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            if im.candidates.is_empty() {
                return vec![Vec::new(); models.len()];
            }
            let (scores, degenerate) = score_encoded(&im.encoding, &im.candidates, models, true);
            models
                .iter()
                .enumerate()
                .map(|(m, model)| {
                    let dets: Vec<Detection> = im
                        .candidates
                        .iter()
                        .zip(&scores[m])
                        .zip(&degenerate)
                        .filter(|((w, _), _)| {
                            im.objects
                                .iter()
                                .filter(|o| o.class_id == model.class_id)
                                .all(|o| iou(&o.window, w) < cfg.mining_exclusion_iou)
                        })
                        .map(|((w, s), d)| Detection {
                            window: *w,
                            class_id: model.class_id,
                            score: *s,
                            degenerate: *d,
                        })
                        .collect();
                    let skip = exclude.get(m);
                    nms(&dets, cfg.mining_nms)
                        .into_iter()
                        .map(|d| (i, d.window))
                        .filter(|k| skip.map_or(true, |s| !s.contains(k)))
                        .take(per_image)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut out = vec![Vec::new(); models.len()];
    for hits in per_image_hits {
        for (dst, h) in out.iter_mut().zip(hits) {
            dst.extend(h);
        }
    }
    out
}

pub fn mine_hard_negatives(
    model: &LinearModel,
    images: &[EncodedImage],
    per_image: usize,
    cfg: &TrainConfig,
) -> Vec<WindowKey> {
    mine_hard_negatives_multi(&[model], images, per_image, &[], cfg).remove(0)
}

#[derive(Debug, Clone)]
pub struct MiningRun {
    /// Positive windows per class.
    pub positive_keys: Vec<Vec<WindowKey>>,
    /// Final negative pool per class.
    pub negative_keys: Vec<Vec<WindowKey>>,
    /// Features of every positive and pooled window.
    pub store: FeatureStore,
    /// Final model per class.
    pub models: Vec<LinearModel>,
    /// Models after each training, `mining_rounds + 1` entries.
    pub history: Vec<Vec<LinearModel>>,
    /// Negative pool size per class after each round.
    pub pool_sizes: Vec<Vec<usize>>,
    pub positives: Vec<usize>,
    /// Progress of the final training per class.
    pub progress: Vec<Vec<ProgressRow>>,
}

/// Trains one model per class, classes `0..num_classes`, with rounds of
/// hard-negative mining shared across classes.
pub fn train_with_mining(images: &[EncodedImage], num_classes: usize, cfg: &TrainConfig) -> Result<MiningRun> {
    train_with_mining_masked(images, num_classes, cfg, &vec![None; num_classes])
}

/// As [`train_with_mining`] with an optional group support per class.
pub fn train_with_mining_masked(
    images: &[EncodedImage],
    num_classes: usize,
    cfg: &TrainConfig,
    masks: &[Option<Vec<bool>>],
) -> Result<MiningRun> {
    cfg.validate()?;
    let layout = images
        .first()
        .map(|im| im.encoding.layout)
        .ok_or_else(|| Error::InsufficientData("no training images".into()))?;
    if masks.len() != num_classes {
        return Err(Error::InvalidArgument("one mask per class required".into()));
    }
    let mut store = FeatureStore::new(layout.len());
    let positives: Vec<Vec<WindowKey>> = (0..num_classes).map(|c| positive_windows(images, c, cfg)).collect();
    let initial = initial_negatives(images, cfg);
    let mut pools: Vec<Vec<WindowKey>> = vec![initial.clone(); num_classes];
    let mut pool_sets: Vec<HashSet<WindowKey>> = vec![initial.iter().copied().collect(); num_classes];
    for p in &positives {
        store.ensure(images, p);
    }
    store.ensure(images, &initial);

    let mut history = Vec::new();
    let mut pool_sizes = Vec::new();
    let mut progress = Vec::new();
    for round in 0..=cfg.mining_rounds {
        let fits: Vec<Fit> = (0..num_classes)
            .into_par_iter()
            .map(|c| {
                let sub = TrainConfig {
                    seed: derive_seed(cfg.seed, &[c as u64, round as u64]),
                    ..cfg.clone()
                };
                let pos = store.rows(&positives[c]);
                let neg = store.rows(&pools[c]);
                train_svm_l2_masked(&pos, &neg, layout, c, &sub, masks[c].as_deref())
            })
            .collect::<Result<_>>()?;
        progress = fits.iter().map(|f| f.progress.clone()).collect();
        let models: Vec<LinearModel> = fits.into_iter().map(|f| f.model).collect();
        pool_sizes.push(pools.iter().map(Vec::len).collect());
        history.push(models.clone());
        log::info!("training round {round}: pools {:?}", pool_sizes.last().unwrap());
        if round == cfg.mining_rounds {
            break;
        }
        let refs: Vec<&LinearModel> = models.iter().collect();
        let mined = mine_hard_negatives_multi(&refs, images, cfg.negatives_per_image, &pool_sets, cfg);
        for (c, keys) in mined.into_iter().enumerate() {
            store.ensure(images, &keys);
            for k in keys {
                if pool_sets[c].insert(k) {
                    pools[c].push(k);
                }
            }
        }
    }
    Ok(MiningRun {
        positive_keys: positives.clone(),
        negative_keys: pools,
        store,
        models: history.last().cloned().unwrap_or_default(),
        history,
        pool_sizes,
        positives: positives.iter().map(Vec::len).collect(),
        progress,
    })
}

/// l2 retraining with mining, restricted to each class's group support.
/// A full support trains exactly as [`train_with_mining`].
pub fn finetune_l2(images: &[EncodedImage], supports: &[Vec<bool>], cfg: &TrainConfig) -> Result<MiningRun> {
    let masks = supports
        .iter()
        .map(|s| {
            if !s.iter().any(|&a| a) {
                Err(Error::InvalidArgument("empty support".into()))
            } else if s.iter().all(|&a| a) {
                Ok(None)
            } else {
                Ok(Some(s.clone()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    train_with_mining_masked(images, supports.len(), cfg, &masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    fn toy_layout() -> FvLayout {
        // one bin, two groups of two coordinates
        FvLayout::new(0, 2, 1)
    }

    #[test]
    fn separable_points_are_separated() {
        let layout = toy_layout();
        let pos = vec![vec![1.0f32, 0.0, 0.0, 0.0]];
        let neg = vec![vec![-1.0f32, 0.0, 0.0, 0.0]];
        let cfg = TrainConfig {
            lambda_l2: 1e-3,
            svm_epochs: 200,
            ..Default::default()
        };
        let fit = train_svm_l2(&rows(&pos), &rows(&neg), layout, 0, &cfg).unwrap();
        assert!(fit.model.weights[0] + fit.model.bias > 0.0);
        assert!(-fit.model.weights[0] + fit.model.bias < 0.0);
    }

    #[test]
    fn duplicating_the_data_gives_the_same_model() {
        let layout = toy_layout();
        let pos = vec![vec![1.0f32, 0.5, 0.0, 0.2], vec![0.7, -0.1, 0.3, 0.0]];
        let neg = vec![vec![-1.0f32, 0.0, 0.4, 0.0], vec![-0.2, 0.9, 0.0, -0.5]];
        let twice = |v: &Vec<Vec<f32>>| [v.clone(), v.clone()].concat();
        let cfg = TrainConfig::default();
        let a = train_svm_l2(&rows(&pos), &rows(&neg), layout, 0, &cfg).unwrap();
        let b = train_svm_l2(&rows(&twice(&pos)), &rows(&twice(&neg)), layout, 0, &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn empty_class_is_an_error() {
        let pos = vec![vec![1.0f32; 4]];
        let r = train_svm_l2(&rows(&pos), &[], toy_layout(), 0, &TrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyClass(_))));
    }

    #[test]
    fn mask_keeps_outside_weights_zero() {
        let pos = vec![vec![1.0f32, 0.5, 0.3, 0.2]];
        let neg = vec![vec![-1.0f32, 0.0, -0.4, 0.1]];
        let fit =
            train_svm_l2_masked(&rows(&pos), &rows(&neg), toy_layout(), 0, &TrainConfig::default(), Some(&[false, true]))
                .unwrap();
        assert_eq!(&fit.model.weights[..2], &[0.0, 0.0]);
        assert!(fit.model.weights[2..].iter().any(|&w| w != 0.0));
    }

    #[test]
    fn huge_group_penalty_leaves_bias_only() {
        let pos = vec![vec![1.0f32, 0.5, 0.3, 0.2]];
        let neg = vec![vec![-1.0f32, 0.0, -0.4, 0.1]];
        let cfg = TrainConfig {
            lambda_group: 10.0,
            rda_batch: 0,
            ..Default::default()
        };
        let fit = train_group_lasso(&rows(&pos), &rows(&neg), toy_layout(), 0, &cfg).unwrap();
        assert!(fit.model.weights.iter().all(|&w| w == 0.0));
        assert_eq!(gaussian_support(&fit.model).count, 0);
    }

    #[test]
    fn tiny_gamma_diverges() {
        let pos = vec![vec![1.0f32, 0.5, 0.3, 0.2]];
        let neg = vec![vec![1.0f32, 0.5, 0.3, 0.25]];
        let cfg = TrainConfig {
            lambda_group: 0.0,
            rda_gamma: 1e-9,
            rda_batch: 0,
            ..Default::default()
        };
        let err = train_group_lasso(&rows(&pos), &rows(&neg), toy_layout(), 0, &cfg).unwrap_err();
        assert!(err.to_string().starts_with("rda_gamma too small"));
    }

    #[test]
    fn active_ranges_merge_adjacent_groups() {
        let r = active_ranges(8, 2, Some(&[true, true, false, true]));
        assert_eq!(r, vec![0..4, 6..8]);
    }
}
