//! Encoder over the coarsest level, a decoder whose first layer attends
//! densely and whose later layers attend to box-guided samples, and
//! per-layer prediction heads.

mod attention;
mod layers;

pub use attention::{multi_head_attention, per_query_attention, AttnIds, AttnVars};
pub use layers::{
    boxes_of, dense_decoder_layer, encoder_forward, encoder_layer, heads_forward, sparse_decoder_layer,
    DecoderIds, DecoderVars, EncoderIds, EncoderVars, FfnIds, HeadIds, HeadVars, LayerOutput,
    LayerPrediction, NormIds, QueryState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{
    build_multiscale_kv, flatten_embed, sine_pos_embed, EncodedPyramid, FeaturePyramid, LevelVar,
};
use crate::tensor::{inverse_sigmoid_value, Init, ParamId, Params, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Later decoder layers attend to RoI samples instead of the full map.
    pub sparse_sampling: bool,
    /// Samples are drawn from every level in `levels_used`, not just the
    /// coarsest.
    pub multiscale: bool,
    /// Training labels are repeated before matching.
    pub label_aug: bool,
    /// Boxes are predicted as offsets from the previous layer's boxes.
    pub box_refine: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            sparse_sampling: true,
            multiscale: true,
            label_aug: true,
            box_refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    /// Foreground classes; the no-object class is appended.
    pub num_classes: usize,
    pub roi_resolution: usize,
    /// Raw feature channels of the input pyramid.
    pub in_channels: usize,
    /// Pyramid depth, fine to coarse.
    pub num_levels: usize,
    /// Levels sampled when multiscale is on.
    pub levels_used: Vec<usize>,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 25,
            hidden_dim: 64,
            num_heads: 4,
            enc_layers: 2,
            dec_layers: 3,
            ffn_dim: 256,
            num_classes: 6,
            roi_resolution: 4,
            in_channels: 16,
            num_levels: 3,
            levels_used: vec![0, 1, 2],
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.hidden_dim == 0 || self.hidden_dim % 4 != 0 {
            return bad(format!("hidden_dim {} not a positive multiple of 4", self.hidden_dim));
        }
        if self.ffn_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return bad("ffn_dim, num_classes and in_channels must be positive".into());
        }
        if self.roi_resolution == 0 {
            return bad("roi_resolution must be at least 1".into());
        }
        if self.num_levels == 0 {
            return bad("num_levels must be at least 1".into());
        }
        if self.levels_used.is_empty() {
            return bad("levels_used is empty".into());
        }
        if let Some(l) = self.levels_used.iter().find(|&&l| l >= self.num_levels) {
            return bad(format!("level {l} outside a {}-level pyramid", self.num_levels));
        }
        Ok(())
    }

    pub fn top_level(&self) -> usize {
        self.num_levels - 1
    }

    /// Levels actually sampled by sparse layers.
    pub fn sampled_levels(&self) -> Vec<usize> {
        if self.toggles.multiscale {
            self.levels_used.clone()
        } else {
            vec![self.top_level()]
        }
    }
}

pub(crate) fn load(tape: &mut Tape, p: &Params, id: ParamId, grad: bool) -> Var {
    if grad {
        tape.param(p, id)
    } else {
        tape.constant(p.get(id).clone())
    }
}

struct Builder<'a> {
    params: &'a mut Params,
    seed: u64,
    count: u64,
}

impl Builder<'_> {
    fn add(&mut self, name: String, dims: &[usize], init: Init) -> Result<ParamId> {
        self.count += 1;
        self.params.insert(name, Tensor::create(dims, init)?)
    }

    fn next_seed(&self) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.count.wrapping_mul(0xBF58_476D_1CE4_E5B9))
    }

    fn uniform(&mut self, name: String, dims: &[usize], a: f64) -> Result<ParamId> {
        let seed = self.next_seed();
        self.add(name, dims, Init::Uniform { lo: -a, hi: a, seed })
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], a)
    }

    fn zeros(&mut self, name: String, dims: &[usize]) -> Result<ParamId> {
        self.add(name, dims, Init::Zeros)
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.xavier(format!("{p}.wq"), d, d)?,
            bq: self.zeros(format!("{p}.bq"), &[d])?,
            wk: self.xavier(format!("{p}.wk"), d, d)?,
            bk: self.zeros(format!("{p}.bk"), &[d])?,
            wv: self.xavier(format!("{p}.wv"), d, d)?,
            bv: self.zeros(format!("{p}.bv"), &[d])?,
            wo: self.xavier(format!("{p}.wo"), d, d)?,
            bo: self.zeros(format!("{p}.bo"), &[d])?,
        })
    }

    fn norm(&mut self, p: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.add(format!("{p}.gain"), &[d], Init::Constant(1.0))?,
            bias: self.zeros(format!("{p}.bias"), &[d])?,
        })
    }

    fn ffn(&mut self, p: &str, d: usize, hidden: usize, out: usize, zero_last: bool) -> Result<FfnIds> {
        let w1 = self.xavier(format!("{p}.w1"), d, hidden)?;
        let b1 = self.zeros(format!("{p}.b1"), &[hidden])?;
        let w2 = if zero_last {
            self.zeros(format!("{p}.w2"), &[hidden, out])?
        } else {
            self.xavier(format!("{p}.w2"), hidden, out)?
        };
        let b2 = self.zeros(format!("{p}.b2"), &[out])?;
        Ok(FfnIds { w1, b1, w2, b2 })
    }
}

/// Reference boxes tiling the unit square on a `g x g` grid, `g = ceil(sqrt(N))`.
pub fn grid_reference_boxes(n: usize) -> Vec<[f64; 4]> {
    let g = (n as f64).sqrt().ceil() as usize;
    let s = 1.0 / g as f64;
    (0..n)
        .map(|i| {
            let (r, c) = (i / g, i % g);
            [(c as f64 + 0.5) * s, (r as f64 + 0.5) * s, s, s]
        })
        .collect()
}

/// Normalised centres of every cell of an `h x w` map, row-major.
pub fn cell_centres(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h)
        .flat_map(|i| (0..w).map(move |j| ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)))
        .collect()
}

/// A detector: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    embed: Vec<(ParamId, ParamId)>,
    encoder: Vec<EncoderIds>,
    decoder: Vec<DecoderIds>,
    heads: Vec<HeadIds>,
    query_pos: ParamId,
    query_ref: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f, c) = (config.hidden_dim, config.ffn_dim, config.num_classes);
        let mut params = Params::new();
        let mut b = Builder {
            params: &mut params,
            seed,
            count: 0,
        };
        let embed = (0..config.num_levels)
            .map(|l| {
                Ok((
                    b.xavier(format!("embed.{l}.w"), config.in_channels, d)?,
                    b.zeros(format!("embed.{l}.b"), &[d])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder = (0..config.enc_layers)
            .map(|e| {
                Ok(EncoderIds {
                    attn: b.attn(&format!("enc.{e}.attn"), d)?,
                    norm1: b.norm(&format!("enc.{e}.norm1"), d)?,
                    ffn: b.ffn(&format!("enc.{e}.ffn"), d, f, d, false)?,
                    norm2: b.norm(&format!("enc.{e}.norm2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let query_pos = b.uniform("query.pos".into(), &[config.num_queries, d], 0.1)?;
        let refs: Vec<f64> = grid_reference_boxes(config.num_queries)
            .into_iter()
            .flatten()
            .map(inverse_sigmoid_value)
            .collect();
        let query_ref = b.add("query.ref".into(), &[config.num_queries, 4], Init::Zeros)?;
        b.params.set_value("query.ref", refs)?;
        let mut decoder = Vec::new();
        let mut heads = Vec::new();
        for l in 0..config.dec_layers {
            decoder.push(DecoderIds {
                self_attn: b.attn(&format!("dec.{l}.self"), d)?,
                norm1: b.norm(&format!("dec.{l}.norm1"), d)?,
                cross_attn: b.attn(&format!("dec.{l}.cross"), d)?,
                norm2: b.norm(&format!("dec.{l}.norm2"), d)?,
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f, d, false)?,
                norm3: b.norm(&format!("dec.{l}.norm3"), d)?,
            });
            heads.push(HeadIds {
                cls_w: b.xavier(format!("head.{l}.cls.w"), d, c + 1)?,
                cls_b: b.zeros(format!("head.{l}.cls.b"), &[c + 1])?,
                box_ffn: b.ffn(&format!("head.{l}.box"), d, d, 4, true)?,
            });
        }
        Ok(Self {
            config,
            params,
            embed,
            encoder,
            decoder,
            heads,
            query_pos,
            query_ref,
        })
    }

    /// Replaces every parameter value with the same-named entry of `other`.
    pub fn load_values(&mut self, other: &Params) -> Result<()> {
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = other
                .find(&name)
                .map(|o| other.get(o))
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if src.dims() != self.params.get(id).dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    self.params.get(id).dims(),
                    src.dims()
                )));
            }
            self.params.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        if other.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters given, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn decoder_ids(&self, layer: usize) -> &DecoderIds {
        &self.decoder[layer]
    }

    pub fn head_ids(&self, layer: usize) -> &HeadIds {
        &self.heads[layer]
    }

    fn check_pyramid(&self, pyramid: &FeaturePyramid) -> Result<()> {
        if pyramid.levels.len() != self.config.num_levels {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, model expects {}",
                pyramid.levels.len(),
                self.config.num_levels
            )));
        }
        if pyramid.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "pyramid has {} channels, model expects {}",
                pyramid.channels(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Embeds every level and encodes the coarsest one.
    pub fn encode(&self, tape: &mut Tape, pyramid: &FeaturePyramid, grad: bool) -> Result<EncodedPyramid> {
        self.check_pyramid(pyramid)?;
        let cfg = &self.config;
        let mut levels = Vec::with_capacity(cfg.num_levels);
        for (map, &(w, b)) in pyramid.levels.iter().zip(&self.embed) {
            let w = load(tape, &self.params, w, grad);
            let b = load(tape, &self.params, b, grad);
            levels.push(LevelVar {
                values: flatten_embed(tape, map, w, Some(b))?,
                height: map.height(),
                width: map.width(),
            });
        }
        let top = *levels.last().unwrap();
        let pos = sine_pos_embed(&cell_centres(top.height, top.width), cfg.hidden_dim)?;
        let pos_top = tape.constant(pos);
        let enc: Vec<EncoderVars> = self
            .encoder
            .iter()
            .map(|e| e.load(tape, &self.params, grad))
            .collect();
        let z = encoder_forward(tape, &enc, cfg.num_heads, top.values, pos_top)?;
        levels.last_mut().unwrap().values = z;
        Ok(EncodedPyramid { levels, pos_top })
    }

    /// Parameter handles of decoder layer `l`.
    pub fn decoder_layer(&self, l: usize) -> Option<DecoderIds> {
        self.decoder.get(l).copied()
    }

    /// Initial decoder state: zero content, learned positions and references.
    pub fn initial_state(&self, tape: &mut Tape, grad: bool) -> Result<QueryState> {
        let cfg = &self.config;
        Ok(QueryState {
            content: tape.constant(Tensor::zeros(&[cfg.num_queries, cfg.hidden_dim])?),
            query_pos: load(tape, &self.params, self.query_pos, grad),
            reference_logits: load(tape, &self.params, self.query_ref, grad),
        })
    }

    /// Full forward pass; one prediction per decoder layer.
    pub fn forward(&self, tape: &mut Tape, pyramid: &FeaturePyramid, grad: bool) -> Result<Vec<LayerPrediction>> {
        let enc = self.encode(tape, pyramid, grad)?;
        let state = self.initial_state(tape, grad)?;
        self.decode(tape, &enc, state, grad, None)
    }

    /// Like [`Model::forward`], but the boxes passed between layers (which
    /// carry no gradient) are taken from `held` instead of the current
    /// predictions. `held[l]` stands for layer `l`'s flattened `[N, 4]` boxes.
    pub fn forward_held(
        &self,
        tape: &mut Tape,
        pyramid: &FeaturePyramid,
        grad: bool,
        held: &[Vec<f64>],
    ) -> Result<Vec<LayerPrediction>> {
        let enc = self.encode(tape, pyramid, grad)?;
        let state = self.initial_state(tape, grad)?;
        self.decode(tape, &enc, state, grad, Some(held))
    }

    /// Decoder stack from a given initial state.
    pub fn decode(
        &self,
        tape: &mut Tape,
        enc: &EncodedPyramid,
        mut state: QueryState,
        grad: bool,
        held: Option<&[Vec<f64>]>,
    ) -> Result<Vec<LayerPrediction>> {
        let cfg = &self.config;
        let sampled = cfg.sampled_levels();
        let mut out: Vec<LayerPrediction> = Vec::with_capacity(cfg.dec_layers);
        let mut prev_boxes = Vec::new();
        for l in 0..cfg.dec_layers {
            let w = self.decoder[l].load(tape, &self.params, grad);
            let content = match out.last() {
                Some(_) if cfg.toggles.sparse_sampling => {
                    let boxes = boxes_of(&prev_boxes);
                    let kv = build_multiscale_kv(tape, enc, &boxes, cfg.roi_resolution, &sampled)?;
                    sparse_decoder_layer(tape, &w, cfg.num_heads, &state, &kv)?
                }
                _ => {
                    let top = enc.encoded_top();
                    dense_decoder_layer(tape, &w, cfg.num_heads, &state, top.values, enc.pos_top, None)?
                }
            };
            let h = self.heads[l].load(tape, &self.params, grad);
            let pred = heads_forward(tape, &h, content, state.reference_logits, cfg.toggles.box_refine)?;
            prev_boxes = match held.and_then(|h| h.get(l)) {
                Some(h) if h.len() == cfg.num_queries * 4 => h.clone(),
                Some(_) => return Err(Error::Shape(format!("held boxes for layer {l} must be [N, 4]"))),
                None => tape.data(pred.boxes).to_vec(),
            };
            let next_ref: Vec<f64> = prev_boxes
                .iter()
                .map(|&v| inverse_sigmoid_value(v))
                .collect();
            state = QueryState {
                content,
                query_pos: state.query_pos,
                reference_logits: tape.constant(Tensor::new(vec![cfg.num_queries, 4], next_ref)?),
            };
            out.push(pred);
        }
        Ok(out)
    }

    /// Value-level outputs without recording gradients.
    pub fn predict(&self, pyramid: &FeaturePyramid) -> Result<Vec<LayerOutput>> {
        let mut tape = Tape::new();
        let preds = self.forward(&mut tape, pyramid, false)?;
        preds.iter().map(|p| p.to_output(&tape)).collect()
    }
}

#[cfg(test)]
mod tests;
