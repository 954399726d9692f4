use crate::error::{Error, Result};
use crate::tensor::{ParamId, Params, Tape, Tensor, Var};

/// Additive bias that removes a key from the softmax.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Attention projections loaded onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnIds {
    pub fn load(&self, tape: &mut Tape, p: &Params, grad: bool) -> AttnVars {
        let mut f = |id| super::load(tape, p, id, grad);
        AttnVars {
            wq: f(self.wq),
            bq: f(self.bq),
            wk: f(self.wk),
            bk: f(self.bk),
            wv: f(self.wv),
            bv: f(self.bv),
            wo: f(self.wo),
            bo: f(self.bo),
        }
    }
}

fn with_pos(tape: &mut Tape, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => tape.add(x, p),
        None => Ok(x),
    }
}

/// Standard multi-head attention over a shared key set.
///
/// `q: [Nq, D]`, `k, v: [Nk, D]`. Positional embeddings are added to the
/// query and key inputs before projection, never to the values. `mask`, if
/// given, holds `Nq * Nk` flags; `false` removes that key for that query.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    w: &AttnVars,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    q_pos: Option<Var>,
    k_pos: Option<Var>,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (nq, d) = (tape.dims(q)[0], tape.dims(q)[1]);
    let nk = tape.dims(k)[0];
    if tape.dims(k)[1] != d || tape.dims(v) != [nk, d] {
        return Err(Error::Shape(format!(
            "attention inputs q {:?}, k {:?}, v {:?}",
            tape.dims(q),
            tape.dims(k),
            tape.dims(v)
        )));
    }
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qi = with_pos(tape, q, q_pos)?;
    let ki = with_pos(tape, k, k_pos)?;
    let qp = tape.linear(qi, w.wq, w.bq)?;
    let kp = tape.linear(ki, w.wk, w.bk)?;
    let vp = tape.linear(v, w.wv, w.bv)?;
    let qh = tape.reshape(qp, &[nq, heads, dh])?;
    let qh = tape.permute(qh, &[1, 0, 2])?;
    let kh = tape.reshape(kp, &[nk, heads, dh])?;
    let kh = tape.permute(kh, &[1, 2, 0])?;
    let vh = tape.reshape(vp, &[nk, heads, dh])?;
    let vh = tape.permute(vh, &[1, 0, 2])?;
    let scores = tape.matmul(qh, kh)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        if m.len() != nq * nk {
            return Err(Error::Shape(format!("mask of {} for {nq}x{nk}", m.len())));
        }
        let bias: Vec<f64> = m.iter().map(|&keep| if keep { 0.0 } else { MASKED }).collect();
        let bias = tape.constant(Tensor::new(vec![nq, nk], bias)?);
        scores = tape.add(scores, bias)?;
    }
    let attn = tape.softmax(scores, 2)?;
    let out = tape.matmul(attn, vh)?;
    let out = tape.permute(out, &[1, 0, 2])?;
    let out = tape.reshape(out, &[nq, d])?;
    tape.linear(out, w.wo, w.bo)
}

/// Cross-attention where query `n` attends only to its own key set.
///
/// `q: [N, D]`, `kv, kv_pos: [N, S, D]`. Queries are treated as a batch of
/// `N` single-row attention problems.
pub fn per_query_attention(
    tape: &mut Tape,
    w: &AttnVars,
    heads: usize,
    q: Var,
    q_pos: Option<Var>,
    kv: Var,
    kv_pos: Var,
) -> Result<Var> {
    let (n, d) = (tape.dims(q)[0], tape.dims(q)[1]);
    let kd = tape.dims(kv).to_vec();
    if kd.len() != 3 || kd[0] != n || kd[2] != d || tape.dims(kv_pos) != kd.as_slice() {
        return Err(Error::Shape(format!(
            "per-query keys {kd:?} for queries {:?}",
            tape.dims(q)
        )));
    }
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let (s, dh) = (kd[1], d / heads);
    let qi = with_pos(tape, q, q_pos)?;
    let ki = tape.add(kv, kv_pos)?;
    let qp = tape.linear(qi, w.wq, w.bq)?;
    let kp = tape.linear(ki, w.wk, w.bk)?;
    let vp = tape.linear(kv, w.wv, w.bv)?;
    let qh = tape.reshape(qp, &[n, heads, 1, dh])?;
    let kh = tape.reshape(kp, &[n, s, heads, dh])?;
    let kh = tape.permute(kh, &[0, 2, 3, 1])?;
    let vh = tape.reshape(vp, &[n, s, heads, dh])?;
    let vh = tape.permute(vh, &[0, 2, 1, 3])?;
    let scores = tape.matmul(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores, 3)?;
    let out = tape.matmul(attn, vh)?;
    let out = tape.reshape(out, &[n, d])?;
    tape.linear(out, w.wo, w.bo)
}
