//! Matching cost and the deep-supervision set loss.

use serde::{Deserialize, Serialize};

use super::augment::{AugEntry, AugmentedLabelSet};
use super::hungarian::{hungarian, Assignment};
use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::model::{LayerOutput, LayerPrediction};
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the classification, L1 and GIoU terms, shared by matching and
/// the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cls: self.cls * s,
            l1: self.l1 * s,
            giou: self.giou * s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: CostWeights,
    /// Cross-entropy weight of the no-object class relative to objects.
    pub no_object_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            no_object_weight: 0.1,
        }
    }
}

/// `cost[i][j] = -w_cls p_j(class_i) + w_l1 |b_i - b_j|_1 + w_giou (1 - giou(b_i, b_j))`.
pub fn match_cost_matrix(
    entries: &[AugEntry],
    output: &LayerOutput,
    w: &CostWeights,
) -> Result<Vec<Vec<f64>>> {
    let n = output.boxes.len();
    if entries.len() > n {
        return Err(Error::Contract(format!(
            "{} label entries for {n} predictions",
            entries.len()
        )));
    }
    let cost = entries
        .iter()
        .map(|e| {
            (0..n)
                .map(|j| {
                    let p = output.class_probs.row(j)[e.class_id];
                    let pb = &output.boxes[j];
                    let l1: f64 = e.bbox.v.iter().zip(pb.v).map(|(a, b)| (a - b).abs()).sum();
                    -w.cls * p + w.l1 * l1 + w.giou * (1.0 - giou(&e.bbox, pb))
                })
                .collect()
        })
        .collect();
    Ok(cost)
}

/// Bipartite assignment of (possibly repeated) label entries to predictions.
pub fn assign_labels(entries: &[AugEntry], output: &LayerOutput, w: &CostWeights) -> Result<Assignment> {
    hungarian(&match_cost_matrix(entries, output, w)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weighted sum of the three terms.
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.total += o.total;
    }
}

pub struct SetLoss {
    pub total: Var,
    pub per_layer: Vec<LossBreakdown>,
    pub assignments: Vec<Assignment>,
}

impl SetLoss {
    pub fn summed(&self) -> LossBreakdown {
        let mut s = LossBreakdown::default();
        for l in &self.per_layer {
            s += *l;
        }
        s
    }
}

/// Per-box corner columns `[M, 1]` of a `[M, 4]` cxcywh tensor.
fn corners(tape: &mut Tape, b: Var) -> Result<[Var; 4]> {
    let cx = tape.slice(b, 1, 0, 1)?;
    let cy = tape.slice(b, 1, 1, 2)?;
    let w = tape.slice(b, 1, 2, 3)?;
    let h = tape.slice(b, 1, 3, 4)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

/// Sum over rows of `1 - giou` between two `[M, 4]` cxcywh tensors.
pub fn giou_loss_sum(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let [ax1, ay1, ax2, ay2] = corners(tape, pred)?;
    let [bx1, by1, bx2, by2] = corners(tape, target)?;
    let area = |tape: &mut Tape, x1, y1, x2, y2| -> Result<Var> {
        let w = tape.sub(x2, x1)?;
        let h = tape.sub(y2, y1)?;
        tape.mul(w, h)
    };
    let area_a = area(tape, ax1, ay1, ax2, ay2)?;
    let area_b = area(tape, bx1, by1, bx2, by2)?;
    let ix1 = tape.maximum(ax1, bx1)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let ix2 = tape.minimum(ax2, bx2)?;
    let iy2 = tape.minimum(ay2, by2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let sum_areas = tape.add(area_a, area_b)?;
    let union = tape.sub(sum_areas, inter)?;
    let hx1 = tape.minimum(ax1, bx1)?;
    let hy1 = tape.minimum(ay1, by1)?;
    let hx2 = tape.maximum(ax2, bx2)?;
    let hy2 = tape.maximum(ay2, by2)?;
    let hull = area(tape, hx1, hy1, hx2, hy2)?;
    let iou = tape.div(inter, union)?;
    let gap = tape.sub(hull, union)?;
    let gap = tape.div(gap, hull)?;
    let g = tape.sub(iou, gap)?;
    let one_minus = tape.affine(g, -1.0, 1.0)?;
    tape.sum_all(one_minus)
}

/// Loss of one decoder layer under a fixed assignment.
pub fn layer_loss(
    tape: &mut Tape,
    pred: &LayerPrediction,
    entries: &[AugEntry],
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let dims = tape.dims(pred.logits).to_vec();
    let (n, classes) = (dims[0], dims[1]);
    let no_object = classes - 1;
    let owner = assignment.row_of_column(n);

    let mut index = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for (j, o) in owner.iter().enumerate() {
        let (c, w) = match o {
            Some(r) => (entries[*r].class_id, 1.0),
            None => (no_object, cfg.no_object_weight),
        };
        index.push(j * classes + c);
        weight.push(w);
    }
    let wsum: f64 = weight.iter().sum();
    let logp = tape.log_softmax(pred.logits, 1)?;
    let picked = tape.take(logp, &index)?;
    let wv = tape.constant(Tensor::from_vec(weight)?);
    let weighted = tape.mul(picked, wv)?;
    let ce = tape.sum_all(weighted)?;
    let ce = tape.scale(ce, -1.0 / wsum)?;

    let w = &cfg.weights;
    let mut total = tape.scale(ce, w.cls)?;
    let mut parts = LossBreakdown {
        cls: tape.data(ce)[0],
        ..Default::default()
    };
    if !entries.is_empty() {
        let norm = entries.len() as f64;
        let matched = tape.rows(pred.boxes, &assignment.pairs)?;
        let target: Vec<f64> = entries.iter().flat_map(|e| e.bbox.v).collect();
        let target = tape.constant(Tensor::new(vec![entries.len(), 4], target)?);
        let diff = tape.sub(matched, target)?;
        let diff = tape.abs(diff)?;
        let l1 = tape.sum_all(diff)?;
        let l1 = tape.scale(l1, 1.0 / norm)?;
        let gl = giou_loss_sum(tape, matched, target)?;
        let gl = tape.scale(gl, 1.0 / norm)?;
        parts.l1 = tape.data(l1)[0];
        parts.giou = tape.data(gl)[0];
        let l1w = tape.scale(l1, w.l1)?;
        let glw = tape.scale(gl, w.giou)?;
        total = tape.add(total, l1w)?;
        total = tape.add(total, glw)?;
    }
    parts.total = tape.data(total)[0];
    Ok((total, parts))
}

/// Deep supervision: an independent assignment and loss per decoder layer,
/// summed over layers. Box terms are normalised by the number of
/// (augmented) foreground entries.
pub fn set_loss(
    tape: &mut Tape,
    layers: &[LayerPrediction],
    labels: &AugmentedLabelSet,
    cfg: &LossConfig,
) -> Result<SetLoss> {
    if layers.is_empty() {
        return Err(Error::Contract("set loss over zero layers".into()));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut assignments = Vec::with_capacity(layers.len());
    let mut total: Option<Var> = None;
    for pred in layers {
        let out = pred.to_output(tape)?;
        let a = assign_labels(&labels.entries, &out, &cfg.weights)?;
        let (l, parts) = layer_loss(tape, pred, &labels.entries, &a, cfg)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
        per_layer.push(parts);
        assignments.push(a);
    }
    Ok(SetLoss {
        total: total.unwrap(),
        per_layer,
        assignments,
    })
}
