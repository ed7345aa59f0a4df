//! Interpretability and sparsity experiments: per-patch scores, patch and
//! Gaussian pruning curves, 2D score surfaces, top patches and part
//! appearance clusters.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codebook::GmmModel;
use crate::detector::{
    detect_all, detection_order, evaluate_ap, evaluate_models, nms_per_class, ApMethod, ApReport, Detection,
    EncodedImage, GroundTruth, ImageDetection,
};
use crate::encoder::{encode_pointwise, encode_pointwise_as, l2};
use crate::encoding::{Accumulator, ImageEncoding};
use crate::error::{Error, Result};
use crate::geometry::Window;
use crate::image::GrayImage;
use crate::kmeans::kmeans;
use crate::learner::{finetune_l2, gaussian_support, train_group_lasso, MiningRun, TrainConfig};
use crate::model::LinearModel;
use crate::pca::{fit_pca, PcaProjection};

/// `<w_{b,k}, phi / ||phi||>` for a point-wise FV `values` at Gaussian `k`;
/// zero when `phi` is zero.
pub fn pointwise_score(values: &[f64], gaussian: usize, model: &LinearModel, bin: usize) -> f64 {
    let n = l2(values);
    if n == 0.0 {
        return 0.0;
    }
    let w = model.group(model.layout.group(bin, gaussian));
    w.iter().zip(values).map(|(a, b)| a * b).sum::<f64>() / n
}

/// Score of a projected descriptor in spatial bin `bin` of `model`.
pub fn patch_score(gmm: &GmmModel, x: &[f64], model: &LinearModel, bin: usize) -> f64 {
    let pw = encode_pointwise(gmm, x);
    pointwise_score(&pw.values, pw.gaussian, model, bin)
}

/// As [`patch_score`] with the assignment forced to `gaussian`.
pub fn patch_score_as(gmm: &GmmModel, x: &[f64], gaussian: usize, model: &LinearModel, bin: usize) -> f64 {
    let pw = encode_pointwise_as(gmm, x, gaussian);
    pointwise_score(&pw.values, gaussian, model, bin)
}

/// How a patch's individual score is measured when pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchScoreMode {
    /// Sum over the containing bins of the normalized point-wise score.
    #[default]
    Normalized,
    /// Sum over the containing bins of `<w_{b,k}, phi> / N_b`; these add up
    /// to the unnormalized window score minus the bias.
    Raw,
}

impl std::str::FromStr for PatchScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(Error::InvalidArgument(format!("unknown patch score mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PatchScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
        })
    }
}

/// Pooled patches of `window` and each one's contribution under `mode`.
pub fn window_contributions(
    enc: &ImageEncoding,
    window: &Window,
    model: &LinearModel,
    mode: PatchScoreMode,
) -> (Vec<usize>, Vec<f64>) {
    let r = enc.layout.r;
    let patches = enc.patches_in_window(window);
    let cells: Vec<usize> = patches
        .iter()
        .map(|&i| {
            let p = enc.patch(i);
            crate::encoder::cell_bin(window, r, p.center_x, p.center_y)
        })
        .collect();
    let mut counts = vec![0usize; enc.layout.bins()];
    counts[0] = patches.len();
    for &c in &cells {
        counts[c] += 1;
    }
    let contributions = patches
        .iter()
        .zip(&cells)
        .map(|(&i, &cell)| {
            let k = enc.patch(i).gaussian as usize;
            let values = enc.pointwise(i);
            [0, cell]
                .iter()
                .map(|&b| match mode {
                    PatchScoreMode::Normalized => pointwise_score(values, k, model, b),
                    PatchScoreMode::Raw => {
                        let w = model.group(model.layout.group(b, k));
                        w.iter().zip(values).map(|(a, v)| a * v).sum::<f64>() / counts[b] as f64
                    }
                })
                .sum()
        })
        .collect();
    (patches, contributions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningCurve {
    pub fractions: Vec<f64>,
    /// Mean AP over classes with ground truth.
    pub ap_values: Vec<f64>,
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Whether every window score equalled its model's bias.
    pub all_bias: Vec<bool>,
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty()
        || fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || fractions.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidArgument(
            "fractions must be strictly increasing within [0, 1]".into(),
        ));
    }
    Ok(())
}

/// For each window and model, drops the `floor(f * n)` pooled patches with
/// the smallest absolute contribution, re-aggregates the survivors, and
/// re-scores; then per-class NMS and AP for every fraction `f`.
pub fn prune_patches_experiment(
    images: &[EncodedImage],
    models: &[&LinearModel],
    num_classes: usize,
    fractions: &[f64],
    mode: PatchScoreMode,
    nms_threshold: f64,
    method: ApMethod,
) -> Result<PruningCurve> {
    check_fractions(fractions)?;
    let nf = fractions.len();
    // per image: [fraction] -> detections, plus whether every score was the bias
    let per_image: Vec<(Vec<Vec<Detection>>, Vec<bool>)> = images
        .par_iter()
        .map(|im| {
            let enc = &im.encoding;
            let mut acc = Accumulator::new(enc.layout);
            let mut dets = vec![Vec::with_capacity(im.candidates.len() * models.len()); nf];
            let mut all_bias = vec![true; nf];
            for w in &im.candidates {
                for m in models {
                    let (patches, contrib) = window_contributions(enc, w, m, mode);
                    let mut order: Vec<usize> = (0..patches.len()).collect();
                    order.sort_by(|&a, &b| contrib[a].abs().total_cmp(&contrib[b].abs()).then(a.cmp(&b)));
                    for (fi, f) in fractions.iter().enumerate() {
                        let drop = ((f * patches.len() as f64).floor() as usize).min(patches.len());
                        let mut keep = vec![true; patches.len()];
                        for &j in &order[..drop] {
                            keep[j] = false;
                        }
                        acc.reset();
                        for (j, &i) in patches.iter().enumerate() {
                            if keep[j] {
                                acc.add(enc, i, w, None);
                            }
                        }
                        let score = acc.score(m, enc.normalization);
                        all_bias[fi] &= score == m.bias;
                        dets[fi].push(Detection {
                            window: *w,
                            class_id: m.class_id,
                            score,
                            degenerate: acc.is_degenerate(),
                        });
                    }
                }
            }
            (dets, all_bias)
        })
        .collect();

    let gt: Vec<Vec<GroundTruth>> = images.iter().map(|im| im.objects.clone()).collect();
    let mut curve = PruningCurve {
        fractions: fractions.to_vec(),
        ap_values: Vec::with_capacity(nf),
        per_class: Vec::with_capacity(nf),
        all_bias: vec![true; nf],
    };
    for fi in 0..nf {
        let mut submitted = Vec::new();
        for (image, (dets, bias)) in per_image.iter().enumerate() {
            curve.all_bias[fi] &= bias[fi];
            submitted.extend(
                nms_per_class(&dets[fi], nms_threshold)
                    .into_iter()
                    .map(|detection| ImageDetection { image, detection }),
            );
        }
        let report = evaluate_ap(&submitted, &gt, num_classes, 0.5, method);
        curve.ap_values.push(report.map);
        curve.per_class.push(report.per_class);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPruningPoint {
    pub lambda: f64,
    /// Mean over classes of the active-group fraction.
    pub support_fraction: f64,
    pub class_fractions: Vec<f64>,
    /// Per class, which groups the group-lasso model keeps.
    pub active: Vec<Vec<bool>>,
    /// Group-lasso models used as they are.
    pub raw: ApReport,
    /// l2 retraining with mining on the selected support.
    pub finetuned: ApReport,
}

/// Sweeps `lambdas` (increasing). For each, trains group-lasso models on the
/// positives and final negative pool of `baseline`, evaluates them directly,
/// then retrains with l2 and mining restricted to their support. Points
/// where a class loses every group are skipped.
#[allow(clippy::too_many_arguments)]
pub fn prune_gaussians_experiment(
    train: &[EncodedImage],
    test: &[EncodedImage],
    num_classes: usize,
    baseline: &MiningRun,
    lambdas: &[f64],
    cfg: &TrainConfig,
    nms_threshold: f64,
    method: ApMethod,
) -> Result<Vec<GaussianPruningPoint>> {
    if lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("lambda grid must be increasing".into()));
    }
    let layout = train
        .first()
        .map(|im| im.encoding.layout)
        .ok_or_else(|| Error::InsufficientData("no training images".into()))?;
    let mut points = Vec::new();
    for &lambda in lambdas {
        let sub = TrainConfig {
            lambda_group: lambda,
            ..cfg.clone()
        };
        let sparse: Vec<LinearModel> = (0..num_classes)
            .map(|c| {
                let pos = baseline.store.rows(&baseline.positive_keys[c]);
                let neg = baseline.store.rows(&baseline.negative_keys[c]);
                train_group_lasso(&pos, &neg, layout, c, &sub).map(|f| f.model)
            })
            .collect::<Result<_>>()?;
        let supports: Vec<_> = sparse.iter().map(gaussian_support).collect();
        if let Some(c) = supports.iter().position(|s| s.count == 0) {
            log::warn!("lambda {lambda}: class {c} has an empty support; point skipped");
            continue;
        }
        let class_fractions: Vec<f64> = supports.iter().map(|s| s.fraction).collect();
        let support_fraction = class_fractions.iter().sum::<f64>() / num_classes as f64;
        let refs: Vec<&LinearModel> = sparse.iter().collect();
        let raw = evaluate_models(test, &refs, num_classes, nms_threshold, method);
        let active: Vec<Vec<bool>> = supports.into_iter().map(|s| s.active).collect();
        let tuned_models = if active.iter().all(|a| a.iter().all(|&x| x)) {
            // a full support retrains exactly like the baseline
            baseline.models.clone()
        } else {
            finetune_l2(train, &active, cfg)?.models
        };
        let tuned_refs: Vec<&LinearModel> = tuned_models.iter().collect();
        let finetuned = evaluate_models(test, &tuned_refs, num_classes, nms_threshold, method);
        log::info!(
            "lambda {lambda}: support {support_fraction:.3}, raw mAP {:.4}, finetuned mAP {:.4}",
            raw.map,
            finetuned.map
        );
        points.push(GaussianPruningPoint {
            lambda,
            support_fraction,
            class_fractions,
            active,
            raw,
            finetuned,
        });
    }
    Ok(points)
}

/// Scores of one Gaussian's descriptor region in one bin, over a 2D PCA
/// plane of the descriptors assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSurface {
    pub gaussian: usize,
    pub class_id: usize,
    pub bin: usize,
    /// Rows are orthonormal; `mean` is that of the assigned descriptors.
    pub projection: PcaProjection,
    /// Half-width of the grid along each axis (three standard deviations).
    pub extent: [f64; 2],
    pub grid_size: usize,
    /// Row-major, rows along the second axis.
    pub values: Vec<f64>,
}

impl ScoreSurface {
    /// Plane coordinates of grid node `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> [f64; 2] {
        grid_coords(self.extent, self.grid_size, row, col)
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_size + col]
    }
}

fn grid_coords(extent: [f64; 2], g: usize, row: usize, col: usize) -> [f64; 2] {
    let t = |i: usize| if g == 1 { 0.0 } else { 2.0 * i as f64 / (g - 1) as f64 - 1.0 };
    [extent[0] * t(col), extent[1] * t(row)]
}

/// Projected descriptors of pooled patches hard-assigned to `gaussian`.
pub fn gaussian_members(images: &[EncodedImage], gaussian: usize) -> Vec<&[f64]> {
    images
        .iter()
        .flat_map(|im| {
            let enc = &im.encoding;
            (0..enc.len())
                .filter(move |&i| !enc.patch(i).skip && enc.patch(i).gaussian as usize == gaussian)
                .map(move |i| enc.descriptor(i))
        })
        .collect()
}

/// Fits the plane to `members` and evaluates the surface on a `grid x grid`
/// lattice spanning three standard deviations per axis.
pub fn score_surface(
    members: &[&[f64]],
    gmm: &GmmModel,
    model: &LinearModel,
    gaussian: usize,
    bin: usize,
    grid: usize,
) -> Result<ScoreSurface> {
    if members.len() < 3 {
        return Err(Error::InsufficientSupport(format!(
            "gaussian {gaussian} has {} assigned patches, at least 3 needed",
            members.len()
        )));
    }
    let projection = fit_pca(members, 2)?;
    Ok(surface_on_plane(projection, gmm, model, gaussian, bin, grid))
}

/// Evaluates a surface on a given plane.
pub fn surface_on_plane(
    projection: PcaProjection,
    gmm: &GmmModel,
    model: &LinearModel,
    gaussian: usize,
    bin: usize,
    grid: usize,
) -> ScoreSurface {
    let grid = grid.max(1);
    let extent = [
        3.0 * projection.variances()[0].max(0.0).sqrt(),
        3.0 * projection.variances()[1].max(0.0).sqrt(),
    ];
    let mut values = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let x = projection.back_project(&grid_coords(extent, grid, row, col));
            values.push(patch_score_as(gmm, &x, gaussian, model, bin));
        }
    }
    ScoreSurface {
        gaussian,
        class_id: model.class_id,
        bin,
        projection,
        extent,
        grid_size: grid,
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRecord {
    pub image: usize,
    pub patch: usize,
    pub left: f64,
    pub top: f64,
    pub side: f64,
    pub scale_index: usize,
    pub score: f64,
}

fn record_order(a: &PatchRecord, b: &PatchRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.left.total_cmp(&b.left))
        .then(a.top.total_cmp(&b.top))
        .then(a.scale_index.cmp(&b.scale_index))
}

/// The `n` best-scoring pooled patches assigned to `gaussian` in bin `bin`,
/// descending, ties by (image, x, y). The flag is set when fewer than `n`
/// patches exist.
pub fn top_patches(
    images: &[EncodedImage],
    model: &LinearModel,
    gaussian: usize,
    bin: usize,
    n: usize,
) -> Result<(Vec<PatchRecord>, bool)> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut all: Vec<PatchRecord> = Vec::new();
    for (image, im) in images.iter().enumerate() {
        let enc = &im.encoding;
        for i in 0..enc.len() {
            let p = enc.patch(i);
            if p.skip || p.gaussian as usize != gaussian {
                continue;
            }
            all.push(PatchRecord {
                image,
                patch: i,
                left: p.left,
                top: p.top,
                side: p.side,
                scale_index: p.scale_index,
                score: pointwise_score(enc.pointwise(i), gaussian, model, bin),
            });
        }
    }
    all.sort_by(record_order);
    let short = all.len() < n;
    all.truncate(n);
    Ok((all, short))
}

#[derive(Debug, Clone)]
pub struct BinClusters {
    /// 0 is the whole window, `1..=R*R` the cells in row-major order.
    pub bin: usize,
    pub assignments: Vec<usize>,
    pub empty: Vec<bool>,
    pub objective: f64,
    /// Pixel-wise mean of the member crops per cluster.
    pub means: Vec<GrayImage>,
}

#[derive(Debug, Clone)]
pub struct PartAppearances {
    pub detections: Vec<ImageDetection>,
    pub clusters: usize,
    pub bins: Vec<BinClusters>,
}

/// Sub-window of `window` covered by pyramid bin `bin`.
pub fn bin_window(window: &Window, r: usize, bin: usize) -> Window {
    if bin == 0 {
        *window
    } else {
        window.cell(r, (bin - 1) % r, (bin - 1) / r)
    }
}

/// Takes the `top_n` best detections of `model` after NMS, and for the whole
/// window and each cell clusters their bin FVs with seeded k-means and
/// averages the member crops resized to `raster x raster`.
#[allow(clippy::too_many_arguments)]
pub fn cluster_part_appearances(
    images: &[EncodedImage],
    pixels: &[GrayImage],
    model: &LinearModel,
    top_n: usize,
    clusters: usize,
    raster: usize,
    nms_threshold: f64,
    seed: u64,
) -> Result<PartAppearances> {
    if images.len() != pixels.len() {
        return Err(Error::InvalidArgument("one pixel image per encoded image required".into()));
    }
    if clusters == 0 || raster == 0 {
        return Err(Error::InvalidArgument("clusters and raster must be >= 1".into()));
    }
    let mut dets = detect_all(images, &[model], nms_threshold, true);
    dets.sort_by(|a, b| detection_order(&a.detection, &b.detection).then(a.image.cmp(&b.image)));
    dets.truncate(top_n);
    if dets.is_empty() {
        return Err(Error::InsufficientData("no detections to cluster".into()));
    }
    let clusters = if dets.len() < clusters {
        log::warn!("{} detections for {clusters} clusters; reducing", dets.len());
        dets.len()
    } else {
        clusters
    };
    let layout = model.layout;
    let fvs: Vec<Vec<f64>> = dets
        .par_iter()
        .map(|d| {
            let enc = &images[d.image].encoding;
            let mut acc = Accumulator::new(layout);
            acc.accumulate(enc, &d.detection.window, None);
            acc.to_normalized(enc.normalization).data
        })
        .collect();
    let mut bins = Vec::with_capacity(layout.bins());
    for bin in 0..layout.bins() {
        let points: Vec<&[f64]> = fvs.iter().map(|f| &f[layout.bin_range(bin)]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::learner::derive_seed(seed, &[bin as u64]));
        let km = kmeans(&points, clusters, 100, &mut rng);
        let mut sums = vec![vec![0.0; raster * raster]; clusters];
        let mut counts = vec![0usize; clusters];
        for (d, &a) in dets.iter().zip(&km.assignments) {
            let crop = pixels[d.image].crop(&bin_window(&d.detection.window, layout.r, bin)).resize(raster, raster);
            for (s, v) in sums[a].iter_mut().zip(crop.pixels()) {
                *s += v;
            }
            counts[a] += 1;
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let inv = if c == 0 { 0.0 } else { 1.0 / c as f64 };
                GrayImage::new(raster, raster, s.into_iter().map(|v| v * inv).collect()).expect("raster size")
            })
            .collect();
        bins.push(BinClusters {
            bin,
            assignments: km.assignments,
            empty: km.empty,
            objective: km.objective,
            means,
        });
    }
    Ok(PartAppearances {
        detections: dets,
        clusters,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FvLayout;

    fn gmm() -> GmmModel {
        GmmModel::new(2, 2, vec![0.0, 0.0, 5.0, 5.0], vec![1.0; 4], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn zero_model_scores_zero() {
        let m = LinearModel::zeros(0, FvLayout::new(1, 2, 2));
        assert_eq!(patch_score(&gmm(), &[0.3, -0.2], &m, 1), 0.0);
    }

    #[test]
    fn score_only_reads_the_assigned_block() {
        let layout = FvLayout::new(1, 2, 2);
        let mut w: Vec<f64> = (0..layout.len()).map(|i| i as f64 * 0.1).collect();
        let x = [0.3, -0.2];
        let before = patch_score(&gmm(), &x, &LinearModel::new(0, layout, w.clone(), 0.0).unwrap(), 1);
        // change everything outside bin 1, gaussian 0
        let keep = layout.group_range(layout.group(1, 0));
        for (i, v) in w.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *v = -7.0;
            }
        }
        let after = patch_score(&gmm(), &x, &LinearModel::new(0, layout, w, 0.0).unwrap(), 1);
        assert_eq!(before, after);
    }

    #[test]
    fn bin_windows_cover_cells() {
        let w = Window::new(10, 20, 40, 40);
        assert_eq!(bin_window(&w, 4, 0), w);
        assert_eq!(bin_window(&w, 4, 1), Window::new(10, 20, 10, 10));
        assert_eq!(bin_window(&w, 4, 16), Window::new(40, 50, 10, 10));
    }

    #[test]
    fn fractions_must_increase() {
        assert!(check_fractions(&[0.0, 0.5, 1.0]).is_ok());
        assert!(check_fractions(&[0.5, 0.5]).is_err());
        assert!(check_fractions(&[1.5]).is_err());
    }
}
