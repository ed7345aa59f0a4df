//! Candidate windows, window scoring, non-maximum suppression and VOC AP.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::encoder::Normalization;
use crate::encoding::{union_support, Accumulator, FeaturePipeline, ImageEncoding};
use crate::geometry::{iou, Window};
use crate::image::GrayImage;
use crate::model::LinearModel;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateParams {
    pub max_candidates: usize,
    pub min_side: u32,
    /// Width / height ratios.
    pub aspects: Vec<f64>,
    pub area_step: f64,
    /// Stride as a fraction of the window side.
    pub stride_fraction: f64,
    pub dedup_iou: f64,
}

impl Default for CandidateParams {
    fn default() -> Self {
        Self {
            max_candidates: 1500,
            min_side: 32,
            aspects: vec![0.5, 1.0, 2.0],
            area_step: 2.0,
            stride_fraction: 0.25,
            dedup_iou: 0.95,
        }
    }
}

fn positions(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let last = extent - size;
    let mut out: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Dense multi-scale, multi-aspect sliding grid. Window areas grow by
/// `area_step` from `min_side^2` up to the image area; near-duplicates
/// (IoU above `dedup_iou`) are dropped and the list is thinned evenly down to
/// `max_candidates`.
pub fn generate_candidates(width: usize, height: usize, params: &CandidateParams) -> Vec<Window> {
    let (iw, ih) = (width as u32, height as u32);
    let image_area = width as f64 * height as f64;
    let mut all: Vec<Window> = Vec::new();
    let mut area = f64::from(params.min_side).powi(2);
    while area <= image_area * (1.0 + 1e-9) {
        for &aspect in &params.aspects {
            let w = (area * aspect).sqrt().round() as u32;
            let h = (area / aspect).sqrt().round() as u32;
            if w == 0 || h == 0 || w > iw || h > ih {
                continue;
            }
            let sx = ((f64::from(w) * params.stride_fraction).round() as u32).max(1);
            let sy = ((f64::from(h) * params.stride_fraction).round() as u32).max(1);
            let xs = positions(iw, w, sx);
            for y in positions(ih, h, sy) {
                for &x in &xs {
                    all.push(Window::new(x, y, w, h));
                }
            }
        }
        area *= params.area_step;
    }

    let mut kept: Vec<Window> = Vec::with_capacity(all.len());
    for w in all {
        let dup = kept.iter().rev().any(|k| {
            let (a, b) = (k.area(), w.area());
            a.min(b) / a.max(b) > params.dedup_iou && iou(k, &w) > params.dedup_iou
        });
        if !dup {
            kept.push(w);
        }
    }
    if kept.len() > params.max_candidates {
        let n = kept.len();
        let m = params.max_candidates;
        kept = (0..m).map(|i| kept[i * n / m]).collect();
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub window: Window,
    pub class_id: usize,
    pub score: f64,
    /// No patch fell inside the window; the score is the bias.
    pub degenerate: bool,
}

/// Scores every window for every model, accumulating each window once.
/// Returns `scores[model][window]` and the per-window degenerate flags.
/// With `skip_inactive`, groups unused by all models are not summed (exact
/// for raw and intra normalization; ignored for SSR).
pub fn score_encoded(
    enc: &ImageEncoding,
    windows: &[Window],
    models: &[&LinearModel],
    skip_inactive: bool,
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let normalization = enc.normalization;
    let mask = if skip_inactive && normalization != Normalization::Ssr {
        union_support(models)
    } else {
        None
    };
    let per_window: Vec<(Vec<f64>, bool)> = windows
        .par_iter()
        .with_min_len(16)
        .map_init(
            || Accumulator::new(enc.layout),
            |acc, w| {
                acc.accumulate(enc, w, mask.as_deref());
                let scores = models.iter().map(|m| acc.score(m, normalization)).collect();
                (scores, acc.is_degenerate())
            },
        )
        .collect();
    let mut scores = vec![Vec::with_capacity(windows.len()); models.len()];
    let mut degenerate = Vec::with_capacity(windows.len());
    for (s, d) in per_window {
        for (dst, v) in scores.iter_mut().zip(s) {
            dst.push(v);
        }
        degenerate.push(d);
    }
    (scores, degenerate)
}

/// Extracts patches once and scores every candidate window with `model`.
pub fn score_windows(
    image: &GrayImage,
    model: &LinearModel,
    pipeline: &FeaturePipeline,
    candidates: &CandidateParams,
) -> Vec<Detection> {
    let enc = pipeline.encode_image(image);
    let windows = generate_candidates(image.width(), image.height(), candidates);
    detections_from(&enc, &windows, &[model], true)
}

pub fn detections_from(
    enc: &ImageEncoding,
    windows: &[Window],
    models: &[&LinearModel],
    skip_inactive: bool,
) -> Vec<Detection> {
    let (scores, degenerate) = score_encoded(enc, windows, models, skip_inactive);
    let mut out = Vec::with_capacity(windows.len() * models.len());
    for (m, row) in models.iter().zip(scores) {
        for ((w, s), d) in windows.iter().zip(row).zip(&degenerate) {
            out.push(Detection {
                window: *w,
                class_id: m.class_id,
                score: s,
                degenerate: *d,
            });
        }
    }
    out
}

/// An image reduced to what detection and training need: its patch cache,
/// ground truth and candidate windows.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub encoding: ImageEncoding,
    pub objects: Vec<GroundTruth>,
    pub candidates: Vec<Window>,
}

/// Scores every candidate with every model and applies per-class NMS.
pub fn detect(image: &EncodedImage, models: &[&LinearModel], nms_threshold: f64, skip_inactive: bool) -> Vec<Detection> {
    let dets = detections_from(&image.encoding, &image.candidates, models, skip_inactive);
    nms_per_class(&dets, nms_threshold)
}

/// Runs [`detect`] on every image; output is in image order.
pub fn detect_all(
    images: &[EncodedImage],
    models: &[&LinearModel],
    nms_threshold: f64,
    skip_inactive: bool,
) -> Vec<ImageDetection> {
    let per_image: Vec<Vec<Detection>> = images
        .par_iter()
        .map(|im| detect(im, models, nms_threshold, skip_inactive))
        .collect();
    per_image
        .into_iter()
        .enumerate()
        .flat_map(|(image, dets)| dets.into_iter().map(move |detection| ImageDetection { image, detection }))
        .collect()
}

/// Detection plus AP evaluation against the images' own ground truth.
pub fn evaluate_models(
    images: &[EncodedImage],
    models: &[&LinearModel],
    num_classes: usize,
    nms_threshold: f64,
    method: ApMethod,
) -> ApReport {
    let dets = detect_all(images, models, nms_threshold, true);
    let gt: Vec<Vec<GroundTruth>> = images.iter().map(|im| im.objects.clone()).collect();
    evaluate_ap(&dets, &gt, num_classes, 0.5, method)
}

/// Descending score, ties broken by lexicographic window order.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.window.cmp(&b.window))
}

/// Greedy suppression: a detection survives if its IoU with every
/// previously kept detection is at most `threshold`.
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.window, &d.window) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

/// NMS applied separately to each class, output sorted by class then score.
pub fn nms_per_class(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = detections.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .flat_map(|c| {
            let of_class: Vec<Detection> = detections.iter().filter(|d| d.class_id == c).copied().collect();
            nms(&of_class, threshold)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMethod {
    /// VOC-07 11-point interpolated AP.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Precision/recall points for one class after greedy matching.
pub fn precision_recall(
    detections: &[ImageDetection],
    gt: &[Vec<GroundTruth>],
    class_id: usize,
    iou_threshold: f64,
) -> (Vec<f64>, Vec<f64>, usize) {
    let mut dets: Vec<&ImageDetection> = detections
        .iter()
        .filter(|d| d.detection.class_id == class_id)
        .collect();
    dets.sort_by(|a, b| {
        b.detection
            .score
            .total_cmp(&a.detection.score)
            .then(a.image.cmp(&b.image))
            .then(a.detection.window.cmp(&b.detection.window))
    });
    let boxes: Vec<Vec<Window>> = gt
        .iter()
        .map(|objs| objs.iter().filter(|o| o.class_id == class_id).map(|o| o.window).collect())
        .collect();
    let total: usize = boxes.iter().map(Vec::len).sum();
    let mut matched: Vec<Vec<bool>> = boxes.iter().map(|b| vec![false; b.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = boxes.get(d.image) {
            for (j, g) in cands.iter().enumerate() {
                if matched[d.image][j] {
                    continue;
                }
                let o = iou(g, &d.detection.window);
                if o >= iou_threshold && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, _)) => {
                matched[d.image][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if total > 0 { tp as f64 / total as f64 } else { 0.0 });
    }
    (precision, recall, total)
}

pub fn average_precision(precision: &[f64], recall: &[f64], method: ApMethod) -> f64 {
    match method {
        ApMethod::ElevenPoint => {
            let mut ap = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                let p = precision
                    .iter()
                    .zip(recall)
                    .filter(|(_, &rc)| rc >= r)
                    .map(|(&p, _)| p)
                    .fold(0.0, f64::max);
                ap += p;
            }
            ap / 11.0
        }
        ApMethod::AllPoint => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    }
}

/// Per-class AP and their mean over classes that have ground truth.
pub fn evaluate_ap(
    detections: &[ImageDetection],
    gt: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f64,
    method: ApMethod,
) -> ApReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let (p, r, total) = precision_recall(detections, gt, c, iou_threshold);
        if total == 0 {
            log::warn!("class {c} has no ground truth; excluded from mAP");
            per_class.push(None);
        } else {
            per_class.push(Some(average_precision(&p, &r, method)));
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    ApReport { per_class, map }
}
