//! COCO-style average precision and ablation aggregation.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, nms, Detection};
use crate::model::LayerOutput;
use crate::supervision::LabelSet;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Precision/recall after each detection in score order, plus the number
/// of ground truths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    /// `(precision, recall)`.
    pub points: Vec<(f64, f64)>,
    pub num_gt: usize,
}

/// Greedy matching of class-`class` detections, highest score first, each to
/// the best-overlapping unmatched ground truth of its scene with IoU at
/// least `iou_thr`. Ties in score keep scene order.
pub fn compute_pr(dets: &[Vec<Detection>], labels: &[LabelSet], iou_thr: f64, class: usize) -> PrCurve {
    let gts: Vec<Vec<_>> = labels
        .iter()
        .map(|l| l.foreground.iter().filter(|g| g.class_id == class).map(|g| g.bbox).collect())
        .collect();
    let num_gt = gts.iter().map(Vec::len).sum();
    let mut flat: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.iter().filter(|d| d.class_id == class).map(move |d| (s, d)))
        .collect();
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(flat.len());
    for (s, d) in flat {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts[s].iter().enumerate() {
            if used[s][k] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                used[s][k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        points.push((tp as f64 / (tp + fp) as f64, recall));
    }
    PrCurve { points, num_gt }
}

/// 101-point interpolated AP: the mean over `t in {0, 0.01, ..., 1}` of the
/// best precision reached at recall `>= t`.
pub fn compute_ap(points: &[(f64, f64)]) -> f64 {
    (0..=100)
        .map(|t| {
            let r = t as f64 / 100.0;
            points
                .iter()
                .filter(|(_, rec)| *rec >= r - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-class AP over all thresholds; `None` for classes with no ground truth.
    pub per_class: Vec<Option<f64>>,
    pub num_gt: usize,
    pub num_dets: usize,
}

/// Averages class APs (over classes with ground truth) at every threshold.
pub fn evaluate(dets: &[Vec<Detection>], labels: &[LabelSet], num_classes: usize) -> EvalResult {
    let thresholds = iou_thresholds();
    let mut per_thr = vec![Vec::new(); thresholds.len()];
    let mut per_class = vec![None; num_classes];
    let mut num_gt = 0;
    for (c, slot) in per_class.iter_mut().enumerate() {
        let mut aps = Vec::with_capacity(thresholds.len());
        for (t, &thr) in thresholds.iter().enumerate() {
            let pr = compute_pr(dets, labels, thr, c);
            if pr.num_gt == 0 {
                break;
            }
            if t == 0 {
                num_gt += pr.num_gt;
            }
            let ap = compute_ap(&pr.points);
            per_thr[t].push(ap);
            aps.push(ap);
        }
        if !aps.is_empty() {
            *slot = Some(aps.iter().sum::<f64>() / aps.len() as f64);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let thr_means: Vec<f64> = per_thr.iter().map(|v| mean(v)).collect();
    EvalResult {
        ap: mean(&thr_means),
        ap50: thr_means[0],
        ap75: thr_means[5],
        per_class,
        num_gt,
        num_dets: dets.iter().map(Vec::len).sum(),
    }
}

/// One detection per query: the most probable foreground class and its
/// probability. Greedy NMS follows when `nms_threshold` is given.
pub fn detections_from(output: &LayerOutput, nms_threshold: Option<f64>) -> Vec<Detection> {
    let c = output.class_probs.dims()[1] - 1;
    let dets: Vec<Detection> = output
        .boxes
        .iter()
        .enumerate()
        .map(|(q, b)| {
            let row = &output.class_probs.row(q)[..c];
            let (class_id, &score) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            Detection {
                bbox: *b,
                class_id,
                score,
            }
        })
        .collect();
    match nms_threshold {
        Some(t) => nms(&dets, t),
        None => dets,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_id: String,
    pub seeds: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub ap50_mean: f64,
    pub ap50_std: f64,
    pub ap75_mean: f64,
    pub ap75_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// One row per configuration, in input order.
pub fn ablation_report(results: &[(String, Vec<EvalResult>)]) -> Vec<ReportRow> {
    results
        .iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(id, r)| {
            let stat = |f: fn(&EvalResult) -> f64| mean_std(&r.iter().map(f).collect::<Vec<_>>());
            let (ap_mean, ap_std) = stat(|e| e.ap);
            let (ap50_mean, ap50_std) = stat(|e| e.ap50);
            let (ap75_mean, ap75_std) = stat(|e| e.ap75);
            ReportRow {
                config_id: id.clone(),
                seeds: r.len(),
                ap_mean,
                ap_std,
                ap50_mean,
                ap50_std,
                ap75_mean,
                ap75_std,
            }
        })
        .collect()
}
