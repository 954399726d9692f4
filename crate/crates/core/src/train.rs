//! Training loop, optimiser and evaluation of trained models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{gen_scene, subsample, Scene};
use crate::error::{Error, Result};
use crate::eval::{detections_from, evaluate, EvalResult};
use crate::model::Model;
use crate::supervision::{set_loss, LossBreakdown};
use crate::tensor::{Params, Tape};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies accumulated gradients; parameters without one are skipped.
    pub fn step(&mut self, params: &mut Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((x, g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut Params, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|x| x * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub config_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub eval: EvalResult,
}

pub const METRICS_HEADER: &str = "config_id,seed,epoch,loss_total,loss_cls,loss_l1,loss_giou,ap,ap50,ap75";

impl EpochRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.config_id,
            self.seed,
            self.epoch,
            self.loss.total,
            self.loss.cls,
            self.loss.l1,
            self.loss.giou,
            self.eval.ap,
            self.eval.ap50,
            self.eval.ap75
        )
    }
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Training and evaluation scenes described by a config.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let d = &cfg.data;
    let train: Vec<Scene> = (0..d.train_count)
        .map(|i| gen_scene(&d.spec, i))
        .collect::<Result<_>>()?;
    let train = if d.subsample < 1.0 {
        subsample(&train, d.subsample, d.subsample_seed)?
    } else {
        train
    };
    let eval = (d.train_count..d.train_count + d.eval_count)
        .map(|i| gen_scene(&d.spec, i))
        .collect::<Result<_>>()?;
    Ok((train, eval))
}

/// Evaluates the last decoder layer, with NMS when `nms` is set.
pub fn evaluate_model(model: &Model, scenes: &[Scene], nms: Option<f64>) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(scenes.len());
    for s in scenes {
        let out = model.predict(&s.pyramid)?;
        dets.push(detections_from(out.last().unwrap(), nms));
    }
    let labels: Vec<_> = scenes.iter().map(|s| s.labels.clone()).collect();
    Ok(evaluate(&dets, &labels, model.config.num_classes))
}

pub struct TrainOutcome {
    pub model: Model,
    pub rows: Vec<EpochRow>,
    /// Parameters of the epoch with the highest AP.
    pub best: Params,
    pub best_epoch: usize,
}

/// Per-scene seed for randomised augmentation.
fn aug_seed(seed: u64, epoch: usize, scene: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ scene as u64
}

/// Loss, gradient accumulation and breakdown for one scene.
pub fn scene_step(model: &mut Model, cfg: &RunConfig, scene: &Scene, seed: u64, weight: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let preds = model.forward(&mut tape, &scene.pyramid, true)?;
    let labels = cfg
        .effective_aug()
        .apply(&scene.labels_for(model.config.num_queries)?, seed)?;
    let loss = set_loss(&mut tape, &preds, &labels, &cfg.loss)?;
    let parts = loss.summed();
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on scene {}", scene.index)));
    }
    let scaled = tape.scale(loss.total, weight)?;
    tape.backward(scaled)?.accumulate_into(&mut model.params)?;
    Ok(parts)
}

/// Trains from a fresh initialisation under `cfg.seed`. `on_epoch` sees
/// every metrics row as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Scene],
    eval_set: &[Scene],
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.optim.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let nms = cfg.eval_nms();
    let mut rows = Vec::with_capacity(cfg.optim.epochs);
    let mut best = (f64::NEG_INFINITY, 0, model.params.clone());

    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.optim.batch_size) {
            model.params.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train_set[i];
                sum += scene_step(&mut model, cfg, s, aug_seed(cfg.seed, epoch, s.index), w)?;
            }
            clip_grad_norm(&mut model.params, cfg.optim.clip_norm);
            adam.step(&mut model.params, lr);
        }
        let n = train_set.len() as f64;
        let loss = LossBreakdown {
            cls: sum.cls / n,
            l1: sum.l1 / n,
            giou: sum.giou / n,
            total: sum.total / n,
        };
        let eval = evaluate_model(&model, eval_set, nms)?;
        if eval.ap > best.0 {
            best = (eval.ap, epoch, model.params.clone());
        }
        let row = EpochRow {
            config_id: cfg.config_id.clone(),
            seed: cfg.seed,
            epoch: epoch + 1,
            loss,
            eval,
        };
        on_epoch(&row);
        rows.push(row);
    }
    model.params.zero_grad();
    let (_, best_epoch, mut best) = best;
    best.zero_grad();
    Ok(TrainOutcome {
        model,
        rows,
        best,
        best_epoch: best_epoch + 1,
    })
}
