use super::attention::{multi_head_attention, per_query_attention, AttnIds, AttnVars};
use super::load;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxFormat};
use crate::sampling::SparseKv;
use crate::tensor::{ParamId, Params, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub box_ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub attn: AttnVars,
    pub norm1: NormVars,
    pub ffn: FfnVars,
    pub norm2: NormVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub self_attn: AttnVars,
    pub norm1: NormVars,
    pub cross_attn: AttnVars,
    pub norm2: NormVars,
    pub ffn: FfnVars,
    pub norm3: NormVars,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls_w: Var,
    pub cls_b: Var,
    pub box_ffn: FfnVars,
}

impl NormIds {
    pub fn load(&self, t: &mut Tape, p: &Params, g: bool) -> NormVars {
        NormVars {
            gain: load(t, p, self.gain, g),
            bias: load(t, p, self.bias, g),
        }
    }
}

impl FfnIds {
    pub fn load(&self, t: &mut Tape, p: &Params, g: bool) -> FfnVars {
        FfnVars {
            w1: load(t, p, self.w1, g),
            b1: load(t, p, self.b1, g),
            w2: load(t, p, self.w2, g),
            b2: load(t, p, self.b2, g),
        }
    }
}

impl EncoderIds {
    pub fn load(&self, t: &mut Tape, p: &Params, g: bool) -> EncoderVars {
        EncoderVars {
            attn: self.attn.load(t, p, g),
            norm1: self.norm1.load(t, p, g),
            ffn: self.ffn.load(t, p, g),
            norm2: self.norm2.load(t, p, g),
        }
    }
}

impl DecoderIds {
    pub fn load(&self, t: &mut Tape, p: &Params, g: bool) -> DecoderVars {
        DecoderVars {
            self_attn: self.self_attn.load(t, p, g),
            norm1: self.norm1.load(t, p, g),
            cross_attn: self.cross_attn.load(t, p, g),
            norm2: self.norm2.load(t, p, g),
            ffn: self.ffn.load(t, p, g),
            norm3: self.norm3.load(t, p, g),
        }
    }
}

impl HeadIds {
    pub fn load(&self, t: &mut Tape, p: &Params, g: bool) -> HeadVars {
        HeadVars {
            cls_w: load(t, p, self.cls_w, g),
            cls_b: load(t, p, self.cls_b, g),
            box_ffn: self.box_ffn.load(t, p, g),
        }
    }
}

/// Decoder state entering a layer.
#[derive(Clone, Copy, Debug)]
pub struct QueryState {
    /// `[N, D]` content embeddings.
    pub content: Var,
    /// `[N, D]` learned query positions.
    pub query_pos: Var,
    /// `[N, 4]` reference boxes in logit space.
    pub reference_logits: Var,
}

pub fn norm(tape: &mut Tape, x: Var, w: &NormVars) -> Result<Var> {
    let axis = tape.dims(x).len() - 1;
    let n = tape.layer_norm(x, axis)?;
    let n = tape.mul(n, w.gain)?;
    tape.add(n, w.bias)
}

pub fn ffn(tape: &mut Tape, x: Var, w: &FfnVars) -> Result<Var> {
    let h = tape.linear(x, w.w1, w.b1)?;
    let h = tape.relu(h)?;
    tape.linear(h, w.w2, w.b2)
}

fn residual_norm(tape: &mut Tape, x: Var, update: Var, w: &NormVars) -> Result<Var> {
    let s = tape.add(x, update)?;
    norm(tape, s, w)
}

/// One post-norm encoder layer; positions enter queries and keys only.
pub fn encoder_layer(tape: &mut Tape, w: &EncoderVars, heads: usize, z: Var, pos: Var) -> Result<Var> {
    let a = multi_head_attention(tape, &w.attn, heads, z, z, z, Some(pos), Some(pos), None)?;
    let z = residual_norm(tape, z, a, &w.norm1)?;
    let f = ffn(tape, z, &w.ffn)?;
    residual_norm(tape, z, f, &w.norm2)
}

/// Runs `layers` in order; an empty stack is the identity.
pub fn encoder_forward(
    tape: &mut Tape,
    layers: &[EncoderVars],
    heads: usize,
    z: Var,
    pos: Var,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(z, |z, w| encoder_layer(tape, w, heads, z, pos))
}

fn self_attention_block(tape: &mut Tape, w: &DecoderVars, heads: usize, s: &QueryState) -> Result<Var> {
    let q = s.content;
    let p = Some(s.query_pos);
    let a = multi_head_attention(tape, &w.self_attn, heads, q, q, q, p, p, None)?;
    residual_norm(tape, q, a, &w.norm1)
}

fn finish(tape: &mut Tape, w: &DecoderVars, x: Var, cross: Var) -> Result<Var> {
    let x = residual_norm(tape, x, cross, &w.norm2)?;
    let f = ffn(tape, x, &w.ffn)?;
    residual_norm(tape, x, f, &w.norm3)
}

/// Self-attention over queries, cross-attention over every memory position
/// (optionally masked per query), feed-forward.
pub fn dense_decoder_layer(
    tape: &mut Tape,
    w: &DecoderVars,
    heads: usize,
    state: &QueryState,
    memory: Var,
    memory_pos: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let x = self_attention_block(tape, w, heads, state)?;
    let c = multi_head_attention(
        tape,
        &w.cross_attn,
        heads,
        x,
        memory,
        memory,
        Some(state.query_pos),
        Some(memory_pos),
        mask,
    )?;
    finish(tape, w, x, c)
}

/// As [`dense_decoder_layer`], but query `n` cross-attends only to its own
/// sampled sequence `kv[n]`.
pub fn sparse_decoder_layer(
    tape: &mut Tape,
    w: &DecoderVars,
    heads: usize,
    state: &QueryState,
    kv: &SparseKv,
) -> Result<Var> {
    let n = tape.dims(state.content)[0];
    if tape.dims(kv.keys_values)[0] != n {
        return Err(Error::Shape(format!(
            "sampled keys for {} queries, state has {n}",
            tape.dims(kv.keys_values)[0]
        )));
    }
    let x = self_attention_block(tape, w, heads, state)?;
    let c = per_query_attention(
        tape,
        &w.cross_attn,
        heads,
        x,
        Some(state.query_pos),
        kv.keys_values,
        kv.pos,
    )?;
    finish(tape, w, x, c)
}

/// Raw per-layer predictions on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// `[N, C + 1]`; the last column is the no-object class.
    pub logits: Var,
    /// `[N, 4]` normalised cxcywh in `(0, 1)`.
    pub boxes: Var,
}

/// Value-level view of one decoder layer's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    /// `[N, C + 1]`, rows sum to one.
    pub class_probs: crate::tensor::Tensor,
    pub boxes: Vec<BBox>,
}

/// Smallest extent reported for a predicted box.
const MIN_EXTENT: f64 = 1e-9;

/// Boxes from a `[N, 4]` value; extents are kept strictly positive.
pub fn boxes_of(values: &[f64]) -> Vec<BBox> {
    values
        .chunks(4)
        .map(|c| BBox {
            format: BoxFormat::CxcywhNorm,
            v: [c[0], c[1], c[2].max(MIN_EXTENT), c[3].max(MIN_EXTENT)],
        })
        .collect()
}

impl LayerPrediction {
    pub fn to_output(&self, tape: &Tape) -> Result<LayerOutput> {
        let logits = tape.value(self.logits);
        let c = logits.dims()[1];
        let mut probs = Vec::with_capacity(logits.numel());
        for row in logits.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.into_iter().map(|v| v / s));
        }
        Ok(LayerOutput {
            class_probs: crate::tensor::Tensor::new(logits.dims().to_vec(), probs)?,
            boxes: boxes_of(tape.data(self.boxes)),
        })
    }
}

/// Class logits and boxes from decoder content. With refinement, boxes are
/// `sigmoid(reference_logits + delta)`; otherwise `sigmoid(delta)`.
pub fn heads_forward(
    tape: &mut Tape,
    w: &HeadVars,
    content: Var,
    reference_logits: Var,
    box_refine: bool,
) -> Result<LayerPrediction> {
    let logits = tape.linear(content, w.cls_w, w.cls_b)?;
    let delta = ffn(tape, content, &w.box_ffn)?;
    let pre = if box_refine {
        tape.add(reference_logits, delta)?
    } else {
        delta
    };
    let boxes = tape.sigmoid(pre)?;
    Ok(LayerPrediction { logits, boxes })
}
