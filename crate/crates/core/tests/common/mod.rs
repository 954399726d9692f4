#![allow(dead_code)]

use dedetr::config::RunConfig;
use dedetr::data::{gen_scene, SceneSpec};
use dedetr::geometry::{BBox, Detection};
use dedetr::model::{LayerOutput, Model, ModelConfig, Toggles};
use dedetr::supervision::{set_loss, AugConfig, AugmentedLabelSet, LossConfig};
use dedetr::tensor::{ParamId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec() -> SceneSpec {
    SceneSpec {
        image_size: 64,
        max_objects: 2,
        channels: 4,
        num_classes: 3,
        ..SceneSpec::default()
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        num_queries: 4,
        hidden_dim: 16,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        ffn_dim: 32,
        num_classes: 3,
        roi_resolution: 2,
        in_channels: 4,
        num_levels: 3,
        levels_used: vec![0, 1, 2],
        toggles: Toggles::default(),
    }
}

/// A tiny runnable training config.
pub fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.config_id = "tiny".into();
    c.model = tiny_model_config();
    c.data.spec = tiny_spec();
    c.data.train_count = 20;
    c.data.eval_count = 5;
    c.optim.epochs = 3;
    c.optim.batch_size = 2;
    c
}

/// Total deep-supervision loss of `model` on one scene, with the boxes passed
/// between decoder layers held at `held`.
pub fn loss_value(model: &Model, labels: &AugmentedLabelSet, scene: &dedetr::data::Scene, held: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let preds = model.forward_held(&mut tape, &scene.pyramid, false, held).unwrap();
    let l = set_loss(&mut tape, &preds, labels, &LossConfig::default()).unwrap();
    tape.data(l.total)[0]
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over
/// `count` randomly chosen scalar parameters.
pub fn end_to_end_grad_error(seed: u64, count: usize, h: f64) -> f64 {
    let spec = tiny_spec();
    let scene = gen_scene(&spec, seed as usize).unwrap();
    let mut model = Model::new(tiny_model_config(), seed).unwrap();
    // move off the zero-initialised box layers so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _, _)| id).collect();
    for &id in &ids {
        for x in model.params.get_mut(id).data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    let aug = AugConfig::default();
    let labels = aug
        .apply(&scene.labels_for(4).unwrap(), 0)
        .unwrap();

    let mut tape = Tape::new();
    let preds = model.forward(&mut tape, &scene.pyramid, true).unwrap();
    let l = set_loss(&mut tape, &preds, &labels, &LossConfig::default()).unwrap();
    let held: Vec<Vec<f64>> = preds.iter().map(|p| tape.data(p.boxes).to_vec()).collect();
    tape.backward(l.total).unwrap().accumulate_into(&mut model.params).unwrap();

    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..model.params.get(id).numel());
        let g = model.params.get(id).grad().unwrap()[k];
        let x0 = model.params.get(id).data()[k];
        let mut probe = model.clone();
        probe.params.get_mut(id).data_mut()[k] = x0 + h;
        let up = loss_value(&probe, &labels, &scene, &held);
        probe.params.get_mut(id).data_mut()[k] = x0 - h;
        let down = loss_value(&probe, &labels, &scene, &held);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(1.0));
    }
    worst
}

/// Random class probabilities and boxes for `n` predictions over `c`
/// classes plus no-object.
pub fn random_output(n: usize, c: usize, seed: u64) -> LayerOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(n * (c + 1));
    for _ in 0..n {
        let row: Vec<f64> = (0..=c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|p| p / s));
    }
    let boxes = (0..n)
        .map(|_| {
            let w = rng.random_range(0.05..0.5);
            let h = rng.random_range(0.05..0.5);
            BBox::cxcywh(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
                .unwrap()
        })
        .collect();
    LayerOutput {
        class_probs: Tensor::new(vec![n, c + 1], probs).unwrap(),
        boxes,
    }
}

/// Minimum total cost over every injection of rows into columns.
pub fn exhaustive_min(cost: &[Vec<i32>]) -> i64 {
    let m = cost.len();
    let n = if m == 0 { 0 } else { cost[0].len() };
    let mut best = i64::MAX;
    // every injection, as a mixed-radix counter with a distinctness filter
    let mut pick = vec![0usize; m];
    loop {
        let mut seen = vec![false; n];
        if pick.iter().all(|&c| !std::mem::replace(&mut seen[c], true)) {
            let s: i64 = pick.iter().enumerate().map(|(r, &c)| cost[r][c] as i64).sum();
            best = best.min(s);
        }
        let mut i = 0;
        while i < m {
            pick[i] += 1;
            if pick[i] < n {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
        if i == m {
            break;
        }
    }
    if m == 0 {
        0
    } else {
        best
    }
}

/// Greedy class-wise suppression written directly from its definition.
pub fn greedy_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if dets[j].class_id == dets[i].class_id && overlap(&dets[i].bbox, &dets[j].bbox) > thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.corners(), b.corners());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

/// Bilinear read at pixel-centre convention with zero padding, from the
/// four surrounding cells.
pub fn bilinear(map: &[f64], h: usize, w: usize, d: usize, x: f64, y: f64, c: usize) -> f64 {
    let (u, v) = (x - 0.5, y - 0.5);
    let (j, i) = (u.floor() as i64, v.floor() as i64);
    let (fx, fy) = (u - j as f64, v - i as f64);
    let at = |i: i64, j: i64| {
        if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
            0.0
        } else {
            map[(i as usize * w + j as usize) * d + c]
        }
    };
    at(i, j) * (1.0 - fx) * (1.0 - fy) + at(i, j + 1) * fx * (1.0 - fy) + at(i + 1, j) * (1.0 - fx) * fy
        + at(i + 1, j + 1) * fx * fy
}
