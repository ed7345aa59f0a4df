//! Detector invariants: overlap, suppression, AP and hard-negative mining.

use std::collections::HashSet;

use fvdet_core::detector::{
    average_precision, detection_order, evaluate_ap, nms, precision_recall, score_encoded, ApMethod, Detection,
    GroundTruth, ImageDetection,
};
use fvdet_core::encoder::Normalization;
use fvdet_core::geometry::{iou, Window};
use fvdet_core::learner::{mine_hard_negatives, mine_hard_negatives_multi, TrainConfig};
use fvdet_core::model::LinearModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

fn window() -> impl Strategy<Value = Window> {
    (0u32..60, 0u32..60, 1u32..40, 1u32..40).prop_map(|(x, y, w, h)| Window::new(x, y, w, h))
}

fn detection() -> impl Strategy<Value = Detection> {
    (window(), 0usize..2, -2.0f64..2.0).prop_map(|(window, class_id, score)| Detection {
        window,
        class_id,
        // coarse scores make ties common
        score: (score * 4.0).round() / 4.0,
        degenerate: false,
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in window(), b in window()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_output_is_an_antichain_covering_the_input(
        dets in prop::collection::vec(detection(), 0..40),
        t in 0.0f64..1.0,
    ) {
        let kept = nms(&dets, t);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.window, &b.window) <= t);
            }
        }
        for d in &dets {
            let covered = kept.iter().any(|k| k == d)
                || kept.iter().any(|k| iou(&k.window, &d.window) > t && detection_order(k, d).is_le());
            prop_assert!(covered, "{:?} neither kept nor suppressed by a better one", d);
        }
        prop_assert_eq!(nms(&kept, t), kept);
    }

    #[test]
    fn ap_ignores_submission_order(
        dets in prop::collection::vec((0usize..3, detection()), 1..30),
        gt_boxes in prop::collection::vec((0usize..3, 0usize..2, window()), 1..8),
        seed in any::<u64>(),
    ) {
        let submitted: Vec<ImageDetection> =
            dets.iter().map(|&(image, detection)| ImageDetection { image, detection }).collect();
        let mut gt = vec![Vec::new(); 3];
        for &(image, class_id, window) in &gt_boxes {
            gt[image].push(GroundTruth { class_id, window });
        }
        let mut shuffled = submitted.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        for method in [ApMethod::ElevenPoint, ApMethod::AllPoint] {
            let a = evaluate_ap(&submitted, &gt, 2, 0.5, method);
            let b = evaluate_ap(&shuffled, &gt, 2, 0.5, method);
            prop_assert_eq!(&a, &b);
            for ap in a.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(ap));
            }
        }
    }

    #[test]
    fn precision_and_recall_stay_in_range(
        dets in prop::collection::vec((0usize..2, detection()), 0..30),
        boxes in prop::collection::vec((0usize..2, window()), 1..6),
    ) {
        let submitted: Vec<ImageDetection> =
            dets.iter().map(|&(image, detection)| ImageDetection { image, detection }).collect();
        let mut gt = vec![Vec::new(); 2];
        for &(image, window) in &boxes {
            gt[image].push(GroundTruth { class_id: 0, window });
        }
        let (p, r, total) = precision_recall(&submitted, &gt, 0, 0.5);
        prop_assert_eq!(total, boxes.len());
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(p.iter().chain(&r).all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn detecting_every_box_first_gives_unit_ap() {
    let gt = vec![
        vec![GroundTruth { class_id: 0, window: Window::new(0, 0, 10, 10) }],
        vec![GroundTruth { class_id: 0, window: Window::new(5, 5, 10, 10) }],
    ];
    let dets = vec![
        ImageDetection { image: 0, detection: Detection { window: Window::new(0, 0, 10, 10), class_id: 0, score: 2.0, degenerate: false } },
        ImageDetection { image: 1, detection: Detection { window: Window::new(5, 5, 10, 10), class_id: 0, score: 1.5, degenerate: false } },
        ImageDetection { image: 1, detection: Detection { window: Window::new(40, 40, 10, 10), class_id: 0, score: 0.5, degenerate: false } },
    ];
    for method in [ApMethod::ElevenPoint, ApMethod::AllPoint] {
        let (p, r, _) = precision_recall(&dets, &gt, 0, 0.5);
        assert_eq!(average_precision(&p, &r, method), 1.0);
    }
}

/// Top windows by direct scoring: eligible, greedily suppressed, truncated.
fn mined_by_brute_force(images: &[fvdet_core::detector::EncodedImage], model: &LinearModel, per_image: usize, cfg: &TrainConfig) -> Vec<(usize, Window)> {
    let mut out = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let (scores, _) = score_encoded(&im.encoding, &im.candidates, &[model], false);
        let mut order: Vec<usize> = (0..im.candidates.len())
            .filter(|&j| im.objects.iter().all(|o| iou(&o.window, &im.candidates[j]) < cfg.mining_exclusion_iou))
            .collect();
        order.sort_by(|&a, &b| {
            scores[0][b].total_cmp(&scores[0][a]).then(im.candidates[a].cmp(&im.candidates[b]))
        });
        let mut kept: Vec<Window> = Vec::new();
        for j in order {
            let w = im.candidates[j];
            if kept.iter().all(|k| iou(k, &w) <= cfg.mining_nms) {
                kept.push(w);
            }
        }
        out.extend(kept.into_iter().take(per_image).map(|w| (i, w)));
    }
    out
}

#[test]
fn mining_returns_the_best_windows_away_from_objects() {
    let images = common::encoded_images(5, Normalization::Intra);
    let layout = images[0].encoding.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = LinearModel::new(0, layout, (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.0).unwrap();
    let cfg = TrainConfig::default();
    let mined = mine_hard_negatives(&model, &images, 3, &cfg);
    assert_eq!(mined, mined_by_brute_force(&images, &model, 3, &cfg));
    for (i, w) in &mined {
        let gt = images[*i].objects[0].window;
        assert!(iou(&gt, w) < 0.5, "mined a positive {w:?}");
    }
}

#[test]
fn mining_skips_windows_already_pooled() {
    let images = common::encoded_images(3, Normalization::Intra);
    let layout = images[0].encoding.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = LinearModel::new(0, layout, (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.0).unwrap();
    let cfg = TrainConfig::default();
    let first = mine_hard_negatives(&model, &images, 2, &cfg);
    let pool: HashSet<(usize, Window)> = first.iter().copied().collect();
    let second = mine_hard_negatives_multi(&[&model], &images, 2, &[pool.clone()], &cfg).remove(0);
    assert!(second.iter().all(|k| !pool.contains(k)));
    assert!(!second.is_empty());
}
