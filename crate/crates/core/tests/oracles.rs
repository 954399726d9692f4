//! Property tests against reference implementations written here.

mod common;

use common::{bilinear, exhaustive_min, greedy_reference, overlap};

use dedetr::eval::{compute_ap, compute_pr, evaluate};
use dedetr::geometry::{giou, iou, nms, BBox, Detection};
use dedetr::sampling::{roi_align, FeatureMap};
use dedetr::selftest::gradient_cases;
use dedetr::supervision::{
    assign_labels, augment_fixed_ratio, augment_fixed_repeat, hungarian, AugmentedLabelSet, CostWeights, Label,
    LabelSet,
};
use dedetr::tensor::{finite_diff_check, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<i32>>> {
    (1usize..=8).prop_flat_map(|n| {
        (0..=n.min(7)).prop_flat_map(move |m| prop::collection::vec(prop::collection::vec(-50i32..50, n), m))
    })
}

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.02f64..1.0, 0.02f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(w, h, u, v)| {
        let cx = w / 2.0 + u * (1.0 - w);
        let cy = h / 2.0 + v * (1.0 - h);
        BBox::cxcywh(cx, cy, w, h).unwrap()
    })
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(
        (unit_box(), 0usize..3, 0.0f64..1.0).prop_map(|(bbox, class_id, score)| Detection {
            bbox,
            class_id,
            score,
        }),
        0..20,
    )
}

fn labels(m: usize, n: usize) -> impl Strategy<Value = LabelSet> {
    prop::collection::vec((0usize..4, unit_box()), m).prop_map(move |v| {
        let fg = v.into_iter().map(|(class_id, bbox)| Label { class_id, bbox }).collect();
        LabelSet::new(fg, n, 4).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hungarian_matches_exhaustive_search(cost in cost_matrix()) {
        let f: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
        let a = hungarian(&f).unwrap();
        prop_assert_eq!(a.total_cost, exhaustive_min(&cost) as f64);
        prop_assert_eq!(a.pairs.len(), cost.len());
        let mut cols = a.pairs.clone();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), cost.len());
    }

    #[test]
    fn nms_matches_greedy_reference(dets in detections()) {
        for thr in [0.3, 0.5, 0.7, 0.9] {
            let got = nms(&dets, thr);
            prop_assert_eq!(&got, &greedy_reference(&dets, thr));
            prop_assert_eq!(nms(&got, thr), got);
        }
    }

    #[test]
    fn roi_align_matches_pointwise_bilinear(
        h in 1usize..8, w in 1usize..8, d in 1usize..4, k in 1usize..5,
        boxes in prop::collection::vec(unit_box(), 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let map = FeatureMap::new(8, Tensor::new(vec![h, w, d], data.clone()).unwrap()).unwrap();
        let out = roi_align(&map, &boxes, k).unwrap();
        for (n, b) in boxes.iter().enumerate() {
            let [x1, y1, x2, y2] = b.corners();
            for a in 0..k {
                for c in 0..k {
                    let x = (x1 + (c as f64 + 0.5) * (x2 - x1) / k as f64) * w as f64;
                    let y = (y1 + (a as f64 + 0.5) * (y2 - y1) / k as f64) * h as f64;
                    for ch in 0..d {
                        let got = out.data()[((n * k * k) + a * k + c) * d + ch];
                        prop_assert!((got - bilinear(&data, h, w, d, x, y, ch)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_repeat_structure(l in (0usize..6).prop_flat_map(|m| labels(m, 20)), r in 1usize..4) {
        let m = l.len();
        let a = augment_fixed_repeat(&l, r).unwrap();
        prop_assert_eq!(a.len(), r * m);
        prop_assert!(a.counts(m).iter().all(|&c| c == r));
        for e in &a.entries {
            prop_assert_eq!(e.class_id, l.foreground[e.source].class_id);
            prop_assert_eq!(e.bbox, l.foreground[e.source].bbox);
        }
    }

    #[test]
    fn fixed_ratio_structure(l in (1usize..=30).prop_flat_map(|n| (0..=n).prop_flat_map(move |m| labels(m, n))),
                             ratio in 0.01f64..=1.0, seed in any::<u64>()) {
        let (m, n) = (l.len(), l.pad_to);
        let a = augment_fixed_ratio(&l, ratio, seed).unwrap();
        let want = if m == 0 { 0 } else { ((n as f64 * ratio) + 1e-9).floor().max(m as f64) as usize };
        prop_assert_eq!(a.len(), want);
        let c = a.counts(m);
        if m > 0 {
            prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            prop_assert!(c.iter().all(|&x| x >= 1));
        }
    }

    #[test]
    fn repeat_two_assigns_two_predictions_per_label(l in (2usize..=5).prop_flat_map(|m| labels(m, 12)), seed in any::<u64>()) {
        let m = l.len();
        let out = common::random_output(12, 4, seed);
        let aug = augment_fixed_repeat(&l, 2).unwrap();
        let a = assign_labels(&aug.entries, &out, &CostWeights::default()).unwrap();
        let mut cols = a.pairs.clone();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), 2 * m);
        let plain = assign_labels(&AugmentedLabelSet::plain(&l).entries, &out, &CostWeights::default()).unwrap();
        prop_assert_eq!(plain.pairs.len(), m);
    }

    /// The added detection recovers a ground truth no existing detection
    /// reaches at IoU 0.5, so it cannot take a match from a lower-scored one.
    #[test]
    fn adding_a_top_scoring_true_positive_never_lowers_ap(
        dets in prop::collection::vec((unit_box(), 0.0f64..0.99), 0..12),
        gts in prop::collection::vec(unit_box(), 1..6),
        pick in 0usize..6,
    ) {
        let target = gts[pick % gts.len()];
        prop_assume!(dets.iter().all(|(b, _)| overlap(b, &target) < 0.5));
        let gt = LabelSet::new(gts.iter().map(|&bbox| Label { class_id: 0, bbox }).collect(), 10, 1).unwrap();
        let mut d: Vec<Detection> = dets.into_iter().map(|(bbox, score)| Detection { bbox, class_id: 0, score }).collect();
        let before = evaluate(std::slice::from_ref(&d), std::slice::from_ref(&gt), 1);
        d.push(Detection { bbox: target, class_id: 0, score: 1.0 });
        let after = evaluate(&[d], &[gt], 1);
        prop_assert!(after.ap50 >= before.ap50 - 1e-12);
        prop_assert!(after.ap >= before.ap - 1e-12);
        prop_assert!((0.0..=1.0).contains(&after.ap) && after.ap50 >= after.ap - 1e-12);
    }

    #[test]
    fn pr_recall_is_monotone(dets in detections(), gts in prop::collection::vec(unit_box(), 0..5)) {
        let gt = LabelSet::new(gts.iter().map(|&bbox| Label { class_id: 0, bbox }).collect(), 10, 3).unwrap();
        let pr = compute_pr(&[dets], &[gt], 0.5, 0);
        prop_assert!(pr.points.windows(2).all(|w| w[1].1 >= w[0].1));
        let ap = compute_ap(&pr.points);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn iou_and_giou_bounds(a in unit_box(), b in unit_box()) {
        let (o, g) = (iou(&a, &b), giou(&a, &b));
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert!(g <= o + 1e-12 && g > -1.0);
        prop_assert!((o - overlap(&a, &b)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn every_op_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, dims, g) in gradient_cases() {
        let n = dims.iter().product();
        for _ in 0..5 {
            let x = Tensor::new(dims.clone(), g.domain.sample(&mut rng, n)).unwrap();
            let err = finite_diff_check(g.f, &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }
}

#[test]
fn aligned_boxes_read_cells_exactly() {
    let (h, w, d) = (4, 4, 3);
    let data: Vec<f64> = (0..h * w * d).map(|i| (i as f64 * 0.37).sin()).collect();
    let map = FeatureMap::new(8, Tensor::new(vec![h, w, d], data.clone()).unwrap()).unwrap();
    let b = BBox::xyxy(0.25, 0.0, 0.75, 0.5).unwrap();
    let out = roi_align(&map, &[b], 2).unwrap();
    for a in 0..2 {
        for c in 0..2 {
            let cell = (a * w + 1 + c) * d;
            assert_eq!(&out.data()[(a * 2 + c) * d..(a * 2 + c + 1) * d], &data[cell..cell + d]);
        }
    }
}
