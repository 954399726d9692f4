//! Built-in oracle suite behind the `selftest` command.
//!
//! Each check compares an implementation against an independent reference.
//! The implementation is reached through [`Subject`], so a deliberately
//! broken one can be substituted to confirm the suite notices.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{iou_corners, nms, BBox, Detection};
use crate::sampling::{roi_align, roi_points, FeatureMap};
use crate::supervision::{
    augment_fixed_ratio, augment_fixed_repeat, hungarian, Assignment, AugmentedLabelSet, Label, LabelSet,
};
use crate::tensor::{finite_diff_check, Tap, Tape, Tensor, Var};

/// The operations under test. Every method defaults to the library.
pub trait Subject: Sync {
    fn hungarian(&self, cost: &[Vec<f64>]) -> Result<Assignment> {
        hungarian(cost)
    }

    fn roi_align(&self, map: &FeatureMap, boxes: &[BBox], k: usize) -> Result<Tensor> {
        roi_align(map, boxes, k)
    }

    fn nms(&self, dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
        nms(dets, iou_threshold)
    }

    fn fixed_repeat(&self, labels: &LabelSet, repeat: usize) -> Result<AugmentedLabelSet> {
        augment_fixed_repeat(labels, repeat)
    }

    fn fixed_ratio(&self, labels: &LabelSet, ratio: f64, seed: u64) -> Result<AugmentedLabelSet> {
        augment_fixed_ratio(labels, ratio, seed)
    }
}

/// The library itself.
pub struct Library;

impl Subject for Library {}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
        }
        s.push_str(&format!(
            "{} of {} checks passed in {:.2?}\n",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.elapsed
        ));
        s
    }
}

type Check = fn(&dyn Subject, &mut ChaCha8Rng) -> std::result::Result<String, String>;

const CHECKS: [(&str, Check); 6] = [
    ("hungarian", check_hungarian),
    ("roi_align", check_roi_align),
    ("nms", check_nms),
    ("augmentation", check_augmentation),
    ("op_gradients", check_op_gradients),
    ("roi_align_gradient", check_roi_gradient),
];

/// Runs every check against `subject`.
pub fn run(subject: &dyn Subject) -> Report {
    let start = Instant::now();
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5E1F_7E57 + i as u64);
            let (passed, detail) = match f(subject, &mut rng) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect();
    Report {
        checks,
        elapsed: start.elapsed(),
    }
}

/// Minimum total over every injective row-to-column map.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let n = cost.first().map_or(0, Vec::len);
    let mut best = if cost.is_empty() { 0.0 } else { f64::INFINITY };
    go(cost, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

fn check_hungarian(s: &dyn Subject, rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let cases = 300;
    for case in 0..cases {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..=n);
        // small integers keep exhaustive sums exact
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(-20..=20) as f64).collect())
            .collect();
        let a = s.hungarian(&cost).map_err(|e| format!("case {case}: {e}"))?;
        let mut seen = vec![false; n];
        for &c in &a.pairs {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(format!("case {case}: not injective"));
            }
        }
        let total: f64 = a.pairs.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let best = brute_force_assignment(&cost);
        if a.pairs.len() != m || total != best || a.total_cost != best {
            return Err(format!("case {case}: cost {} vs optimum {best}", a.total_cost));
        }
    }
    Ok(format!("{cases} matrices match exhaustive search"))
}

/// Bilinear value at continuous cell coordinate `(x, y)` written as a sum
/// of tent functions centred on the cells; zero outside the grid.
pub fn tent_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let d = map.channels();
    let mut out = vec![0.0; d];
    for i in 0..map.height() {
        let wy = (1.0 - (y - (i as f64 + 0.5)).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for j in 0..map.width() {
            let wx = (1.0 - (x - (j as f64 + 0.5)).abs()).max(0.0);
            if wx == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(map.cell(i, j)) {
                *o += wy * wx * v;
            }
        }
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let data = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(8, Tensor::new(vec![h, w, d], data).unwrap()).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.02..1.0);
    let h = rng.random_range(0.02..1.0);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BBox::cxcywh(cx, cy, w, h).unwrap()
}

fn check_roi_align(s: &dyn Subject, rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let cases = 60;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (h, w, d) = (rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=4));
        let k = rng.random_range(1..=5);
        let map = random_map(rng, h, w, d);
        let mut boxes: Vec<BBox> = (0..rng.random_range(1..=3)).map(|_| random_box(rng)).collect();
        if case == 0 {
            // bins centred exactly on cells
            boxes = vec![BBox::xyxy(0.0, 0.0, 1.0, 1.0).unwrap()];
        }
        let k = if case == 0 && h == w { h } else { k };
        let got = s.roi_align(&map, &boxes, k).map_err(|e| format!("case {case}: {e}"))?;
        if got.dims() != [boxes.len(), k * k, d] {
            return Err(format!("case {case}: dims {:?}", got.dims()));
        }
        for (p, (x, y)) in roi_points(&boxes, k).into_iter().enumerate() {
            let want = tent_sample(&map, x * w as f64, y * h as f64);
            for (g, t) in got.data()[p * d..(p + 1) * d].iter().zip(&want) {
                worst = worst.max((g - t).abs());
            }
        }
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:.3e}"));
    }
    Ok(format!("{cases} cases within {worst:.1e}"))
}

/// Greedy suppression written as repeated arg-max over the survivors.
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut pick: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && pick.is_none_or(|p| dets[i].score > dets[p].score) {
                pick = Some(i);
            }
        }
        let Some(p) = pick else { break };
        alive[p] = false;
        out.push(dets[p]);
        for i in 0..dets.len() {
            let same = dets[i].class_id == dets[p].class_id;
            if alive[i] && same && iou_corners(&dets[i].bbox.corners(), &dets[p].bbox.corners()) > thr {
                alive[i] = false;
            }
        }
    }
    out
}

fn check_nms(s: &dyn Subject, rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let cases = 100;
    for case in 0..cases {
        let dets: Vec<Detection> = (0..rng.random_range(0..15))
            .map(|_| Detection {
                bbox: random_box(rng),
                class_id: rng.random_range(0..3),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        for thr in [0.3, 0.5, 0.7, 0.9] {
            let got = s.nms(&dets, thr);
            if got != reference_nms(&dets, thr) {
                return Err(format!("case {case}, threshold {thr}: differs from reference"));
            }
            if s.nms(&got, thr) != got {
                return Err(format!("case {case}, threshold {thr}: not idempotent"));
            }
        }
    }
    Ok(format!("{cases} sets at 4 thresholds, idempotent"))
}

fn random_labels(rng: &mut ChaCha8Rng, m: usize, pad_to: usize) -> LabelSet {
    let fg = (0..m)
        .map(|_| Label {
            class_id: rng.random_range(0..4),
            bbox: random_box(rng),
        })
        .collect();
    LabelSet::new(fg, pad_to, 4).unwrap()
}

fn check_augmentation(s: &dyn Subject, rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let cases = 100;
    for case in 0..cases {
        let n = rng.random_range(1..=30);
        let m = rng.random_range(0..=n);
        let labels = random_labels(rng, m, n);
        let fail = |what: &str| Err(format!("case {case} (M={m}, N={n}): {what}"));
        let r = rng.random_range(1..=4);
        if r * m <= n {
            let a = s.fixed_repeat(&labels, r).map_err(|e| e.to_string())?;
            if a.len() != r * m || a.counts(m).iter().any(|&c| c != r) {
                return fail("fixed repeat count");
            }
            let sources_ok = a.entries.iter().all(|e| {
                let l = &labels.foreground[e.source];
                l.class_id == e.class_id && l.bbox == e.bbox
            });
            if !sources_ok {
                return fail("fixed repeat entry differs from its source");
            }
        } else if s.fixed_repeat(&labels, r).is_ok() {
            return fail("over-full repeat accepted");
        }
        let ratio = rng.random_range(0.01..=1.0);
        let a = s.fixed_ratio(&labels, ratio, case as u64).map_err(|e| e.to_string())?;
        let want = if m == 0 { 0 } else { ((n as f64 * ratio) + 1e-9).floor().max(m as f64) as usize };
        let counts = a.counts(m);
        let spread = counts.iter().max().unwrap_or(&0) - counts.iter().min().unwrap_or(&0);
        if a.len() != want || spread > 1 || counts.contains(&0) {
            return fail("fixed ratio counts");
        }
    }
    Ok(format!("{cases} label sets"))
}

/// Named scalar functions covering every differentiable tape operation,
/// each with an input drawn where the function is smooth.
pub fn gradient_cases() -> Vec<(&'static str, Vec<usize>, GradFn)> {
    fn reduce(t: &mut Tape, y: Var) -> Result<Var> {
        // fixed, uneven weights so every output element matters
        let n = t.value(y).numel();
        let w = Tensor::new(t.dims(y).to_vec(), (0..n).map(|i| 0.3 + 0.17 * (i % 7) as f64).collect())?;
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum_all(p)
    }
    fn halves(t: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let n = t.dims(x)[0];
        Ok((t.slice(x, 0, 0, n / 2)?, t.slice(x, 0, n / 2, n)?))
    }
    macro_rules! case {
        ($name:expr, $dims:expr, $dom:expr, |$t:ident, $x:ident| $body:expr) => {
            (
                $name,
                $dims.to_vec(),
                GradFn {
                    domain: $dom,
                    f: |$t: &mut Tape, $x: Var| -> Result<Var> {
                        let y = $body;
                        reduce($t, y)
                    },
                },
            )
        };
    }
    use Domain::*;
    vec![
        case!("add", [4, 3], Any, |t, x| {
            let (a, b) = halves(t, x)?;
            t.add(a, b)?
        }),
        case!("add_broadcast", [3, 2, 2], Any, |t, x| {
            let b = t.slice(x, 0, 0, 1)?;
            let b = t.reshape(b, &[2, 2])?;
            t.add(x, b)?
        }),
        case!("sub", [4, 3], Any, |t, x| {
            let (a, b) = halves(t, x)?;
            t.sub(a, b)?
        }),
        case!("mul", [4, 3], Any, |t, x| {
            let (a, b) = halves(t, x)?;
            t.mul(a, b)?
        }),
        case!("div", [4, 3], Positive, |t, x| {
            let (a, b) = halves(t, x)?;
            t.div(a, b)?
        }),
        case!("maximum", [2, 6], Separated, |t, x| {
            let (a, b) = halves(t, x)?;
            t.maximum(a, b)?
        }),
        case!("minimum", [2, 6], Separated, |t, x| {
            let (a, b) = halves(t, x)?;
            t.minimum(a, b)?
        }),
        case!("affine", [5], Any, |t, x| t.affine(x, -1.5, 0.25)?),
        case!("relu", [8], AwayFromZero, |t, x| t.relu(x)?),
        case!("abs", [8], AwayFromZero, |t, x| t.abs(x)?),
        case!("sigmoid", [6], Any, |t, x| t.sigmoid(x)?),
        case!("inverse_sigmoid", [6], Unit, |t, x| t.inverse_sigmoid(x)?),
        case!("log", [6], Positive, |t, x| t.log(x)?),
        case!("exp", [6], Any, |t, x| t.exp(x)?),
        case!("matmul", [2, 3, 3], Any, |t, x| {
            let a = t.slice(x, 0, 0, 1)?;
            let a = t.reshape(a, &[3, 3])?;
            let b = t.slice(x, 0, 1, 2)?;
            let b = t.reshape(b, &[3, 3])?;
            let ab = t.matmul(a, b)?;
            t.matmul(ab, a)?
        }),
        case!("matmul_batched", [2, 2, 3], Any, |t, x| {
            let xt = t.transpose(x)?;
            t.matmul(x, xt)?
        }),
        case!("linear", [4, 3], Any, |t, x| {
            let w = t.slice(x, 0, 0, 3)?;
            let b = t.slice(x, 0, 3, 4)?;
            let b = t.reshape(b, &[3])?;
            t.linear(x, w, b)?
        }),
        case!("softmax", [3, 4], Any, |t, x| t.softmax(x, 1)?),
        case!("softmax_axis0", [3, 4], Any, |t, x| t.softmax(x, 0)?),
        case!("log_softmax", [3, 4], Any, |t, x| t.log_softmax(x, 1)?),
        case!("layer_norm", [3, 5], Any, |t, x| t.layer_norm(x, 1)?),
        case!("sum", [3, 4], Any, |t, x| {
            let s = t.sum(x, 0)?;
            t.mul(s, s)?
        }),
        case!("mean", [3, 4], Any, |t, x| {
            let s = t.mean(x, 1)?;
            t.mul(s, s)?
        }),
        case!("concat", [2, 3], Any, |t, x| {
            let e = t.exp(x)?;
            t.concat(&[x, e, x], 1)?
        }),
        case!("permute", [2, 3, 4], Any, |t, x| {
            let p = t.permute(x, &[2, 0, 1])?;
            let s = t.sigmoid(p)?;
            t.mul(p, s)?
        }),
        case!("take", [6], Any, |t, x| {
            let g = t.take(x, &[5, 0, 0, 3])?;
            t.mul(g, g)?
        }),
        case!("rows", [4, 2], Any, |t, x| {
            let g = t.rows(x, &[3, 1, 3])?;
            t.mul(g, g)?
        }),
        case!("weighted_rows", [3, 2], Any, |t, x| {
            let taps = vec![
                Tap { row: 0, weight: 0.25 },
                Tap { row: 2, weight: 0.75 },
                Tap { row: 1, weight: -0.5 },
                Tap { row: 1, weight: 2.0 },
            ];
            let g = t.weighted_rows(x, taps, 2, &[2, 2])?;
            t.mul(g, g)?
        }),
    ]
}

/// Input distribution under which a gradient case is smooth.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    Any,
    Positive,
    Unit,
    AwayFromZero,
    /// The two halves of the input differ by at least 0.1 everywhere.
    Separated,
}

#[derive(Clone, Copy)]
pub struct GradFn {
    pub domain: Domain,
    pub f: fn(&mut Tape, Var) -> Result<Var>,
}

impl Domain {
    pub fn sample(self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n)
            .map(|_| match self {
                Domain::Any | Domain::Separated => rng.random_range(-1.5..1.5),
                Domain::Positive => rng.random_range(0.5..2.0),
                Domain::Unit => rng.random_range(0.1..0.9),
                Domain::AwayFromZero => {
                    let m = rng.random_range(0.1..1.5);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                }
            })
            .collect();
        if let Domain::Separated = self {
            let half = n / 2;
            for i in 0..half {
                let gap = rng.random_range(0.1..0.8);
                v[half + i] = v[i] + if rng.random_bool(0.5) { gap } else { -gap };
            }
        }
        v
    }
}

fn check_op_gradients(_: &dyn Subject, rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let cases = gradient_cases();
    let mut worst: f64 = 0.0;
    for (name, dims, g) in &cases {
        let n = dims.iter().product();
        for point in 0..5 {
            let x = Tensor::new(dims.clone(), g.domain.sample(rng, n)).unwrap();
            let err = finite_diff_check(g.f, &x, 1e-6).map_err(|e| format!("{name}: {e}"))?;
            if err >= 1e-4 {
                return Err(format!("{name} at point {point}: relative error {err:.3e}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("{} ops x 5 points, worst {worst:.1e}", cases.len()))
}

fn check_roi_gradient(_: &dyn Subject, rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for case in 0..5 {
        let (h, w, d, k) = (5, 4, 2, 3);
        let boxes: Vec<BBox> = (0..2).map(|_| random_box(rng)).collect();
        let x = Tensor::new(vec![h * w, d], (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let level = crate::sampling::LevelVar {
                values: v,
                height: h,
                width: w,
            };
            let y = crate::sampling::roi_align_var(t, level, &boxes, k)?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        };
        let err = finite_diff_check(f, &x, 1e-6).map_err(|e| format!("case {case}: {e}"))?;
        if err >= 1e-4 {
            return Err(format!("case {case}: relative error {err:.3e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("5 cases, worst {worst:.1e}"))
}
