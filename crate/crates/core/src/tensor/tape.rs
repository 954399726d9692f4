use super::gemm::{gemm, View};
use super::{check_dims, lanes, ParamId, Params, Tensor};
use crate::error::{shape_err, Error, Result};

/// Clamp applied to the input of [`Tape::inverse_sigmoid`].
pub const INV_SIGMOID_EPS: f64 = 1e-6;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One weighted source row of a [`Tape::weighted_rows`] output row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub row: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Relu,
    Sigmoid,
    InvSigmoid,
    Abs,
    Log,
    Exp,
}

#[derive(Clone, Copy, Debug)]
enum MmKind {
    /// `[.., m, k] x [k, n]`, leading dims folded into rows.
    Shared { rows: usize, k: usize, n: usize },
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
enum Op {
    Const,
    Leaf { param: Option<ParamId> },
    Binary { a: Var, b: Var, kind: BinKind },
    Affine { a: Var, scale: f64 },
    Unary { a: Var, kind: UnKind },
    MatMul { a: Var, b: Var, kind: MmKind },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, axis: usize, rstd: Vec<f64> },
    Sum { a: Var, axis: usize, scale: f64 },
    SumAll { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Take { a: Var, index: Vec<usize> },
    Rows { a: Var, index: Vec<usize> },
    WeightedRows { a: Var, taps: Vec<Tap>, per_row: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamic record of differentiable operations, rebuilt every forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. An op is only recorded with its parents when at least
/// one input needs a gradient; otherwise the result is stored as a constant.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter leaf's gradient into the matching tensor's
    /// gradient buffer. Parameters that did not influence the loss get a
    /// zero gradient.
    pub fn accumulate_into(&self, params: &mut Params) -> Result<()> {
        for &(id, node) in &self.params {
            match &self.grads[node] {
                Some(g) => params.get_mut(id).accumulate_grad(g.data())?,
                None => {
                    let n = params.get(id).numel();
                    params.get_mut(id).accumulate_grad(&vec![0.0; n])?
                }
            }
        }
        Ok(())
    }
}

/// Elementwise `f` where the shorter operand repeats over leading dims.
#[inline(always)]
fn broadcast_map(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if a.len() == n && b.len() == n {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if b.len() < n {
        for ac in a.chunks(b.len()) {
            out.extend(ac.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for bc in b.chunks(a.len()) {
            out.extend(a.iter().zip(bc).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// `acc[k mod |acc|] += f(g[k], own[k mod |own|], other[k mod |other|])`,
/// where `acc` and `own` share a length and broadcasting is over leading dims.
#[inline(always)]
fn broadcast_acc(acc: &mut [f64], g: &[f64], own: &[f64], other: &[f64], f: impl Fn(f64, f64, f64) -> f64) {
    let n = g.len();
    if own.len() == n && other.len() == n {
        for (((d, &gk), &x), &z) in acc.iter_mut().zip(g).zip(own).zip(other) {
            *d += f(gk, x, z);
        }
    } else if own.len() == n {
        let m = other.len();
        for ((dc, gc), xc) in acc.chunks_mut(m).zip(g.chunks(m)).zip(own.chunks(m)) {
            for (((d, &gk), &x), &z) in dc.iter_mut().zip(gc).zip(xc).zip(other) {
                *d += f(gk, x, z);
            }
        }
    } else {
        let m = own.len();
        for (gc, zc) in g.chunks(m).zip(other.chunks(m)) {
            for (((d, &gk), &x), &z) in acc.iter_mut().zip(gc).zip(own).zip(zc) {
                *d += f(gk, x, z);
            }
        }
    }
}

fn broadcast_len(ad: &[usize], bd: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if ad.len() >= bd.len() { (ad, bd) } else { (bd, ad) };
    if long[long.len() - short.len()..] != *short {
        return shape_err(format!("cannot broadcast {ad:?} with {bd:?}"));
    }
    Ok(long.to_vec())
}

fn permute_data(data: &[f64], dims: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = dims.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let inner = out_dims[rank - 1];
    let inner_stride = out_strides[rank - 1];
    loop {
        for t in 0..inner {
            out.push(data[src + t * inner_stride]);
        }
        // advance the odometer over all but the innermost axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= out_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite result from {op:?}")));
        }
        value.set_requires_grad(needs_grad);
        let op = if needs_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_raw(&mut self, dims: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> Result<Var> {
        self.push(Tensor::new(dims, data)?, op, needs)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push_unchecked(t, Op::Leaf { param: None }, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Const, false)
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        let t = params.get(id).clone();
        self.push_unchecked(t, Op::Leaf { param: Some(id) }, true)
    }

    fn push_unchecked(&mut self, mut t: Tensor, op: Op, needs: bool) -> Var {
        t.set_requires_grad(needs);
        self.nodes.push(Node {
            value: t,
            op,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let dims = broadcast_len(av.dims(), bv.dims())?;
        let (ad, bd) = (av.data(), bv.data());
        let n: usize = dims.iter().product();
        let data = match kind {
            BinKind::Add => broadcast_map(ad, bd, n, |x, y| x + y),
            BinKind::Sub => broadcast_map(ad, bd, n, |x, y| x - y),
            BinKind::Mul => broadcast_map(ad, bd, n, |x, y| x * y),
            BinKind::Div => broadcast_map(ad, bd, n, |x, y| x / y),
            BinKind::Max => broadcast_map(ad, bd, n, f64::max),
            BinKind::Min => broadcast_map(ad, bd, n, f64::min),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push_raw(dims, data, Op::Binary { a, b, kind }, needs)
    }

    /// Elementwise sum; the shorter operand's dims must be a suffix of the
    /// longer one's (leading-batch expansion).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Max)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Min)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| scale * x + shift).collect();
        let needs = self.needs(a);
        self.push_raw(t.dims().to_vec(), data, Op::Affine { a, scale }, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    fn unary(&mut self, a: Var, kind: UnKind) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let f: fn(f64) -> f64 = match kind {
            UnKind::Relu => |x| x.max(0.0),
            UnKind::Sigmoid => sigmoid,
            UnKind::InvSigmoid => inverse_sigmoid,
            UnKind::Abs => f64::abs,
            UnKind::Log => f64::ln,
            UnKind::Exp => f64::exp,
        };
        let data = t.data().iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push_raw(t.dims().to_vec(), data, Op::Unary { a, kind }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Sigmoid)
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[1e-6, 1 - 1e-6]`. The gradient
    /// is zero where the clamp is active.
    pub fn inverse_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::InvSigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Abs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnKind::Exp)
    }

    /// Matrix product. `b` is either 2-D (shared across all leading dims of
    /// `a`) or has the same leading batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ad, bd) = (av.dims(), bv.dims());
        if ad.len() < 2 || bd.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {ad:?} x {bd:?}"));
        }
        let k = ad[ad.len() - 1];
        if bd[bd.len() - 2] != k {
            return shape_err(format!("matmul inner mismatch {ad:?} x {bd:?}"));
        }
        let n = bd[bd.len() - 1];
        let (kind, mut out_dims) = if bd.len() == 2 {
            let rows = av.numel() / k;
            (MmKind::Shared { rows, k, n }, ad[..ad.len() - 1].to_vec())
        } else if ad.len() == bd.len() && ad[..ad.len() - 2] == bd[..bd.len() - 2] {
            let batch = ad[..ad.len() - 2].iter().product();
            let m = ad[ad.len() - 2];
            (MmKind::Batched { batch, m, k, n }, ad[..ad.len() - 1].to_vec())
        } else {
            return shape_err(format!("matmul batch mismatch {ad:?} x {bd:?}"));
        };
        out_dims.push(n);
        let (a_data, b_data) = (av.data(), bv.data());
        let out = match kind {
            MmKind::Shared { rows, k, n } => {
                let mut c = vec![0.0; rows * n];
                gemm(rows, k, n, a_data, View::rm(k), b_data, View::rm(n), &mut c, 0.0);
                c
            }
            MmKind::Batched { batch, m, k, n } => {
                let mut c = vec![0.0; batch * m * n];
                for p in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a_data[p * m * k..],
                        View::rm(k),
                        &b_data[p * k * n..],
                        View::rm(n),
                        &mut c[p * m * n..],
                        0.0,
                    );
                }
                c
            }
        };
        let needs = self.needs(a) || self.needs(b);
        self.push_raw(out_dims, out, Op::MatMul { a, b, kind }, needs)
    }

    /// `x · w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let rank = self.dims(a).len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = lanes(t.dims(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    y[at(k)] /= s;
                }
            }
        }
        let needs = self.needs(a);
        self.push_raw(t.dims().to_vec(), y, Op::Softmax { a, axis }, needs)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = lanes(t.dims(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (x[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    y[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let needs = self.needs(a);
        self.push_raw(t.dims().to_vec(), y, Op::LogSoftmax { a, axis }, needs)
    }

    /// Normalises each lane along `axis` to zero mean and unit variance
    /// (no affine part; compose with `mul`/`add` for gain and bias).
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = lanes(t.dims(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mean = (0..n).map(|k| x[at(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (x[at(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for k in 0..n {
                    y[at(k)] = (x[at(k)] - mean) * r;
                }
                rstd.push(r);
            }
        }
        let needs = self.needs(a);
        self.push_raw(t.dims().to_vec(), y, Op::LayerNorm { a, axis, rstd }, needs)
    }

    fn reduce(&mut self, a: Var, axis: usize, scale: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = lanes(t.dims(), axis);
        let x = t.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= scale);
        let mut dims = t.dims().to_vec();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        let needs = self.needs(a);
        self.push_raw(dims, y, Op::Sum { a, axis, scale }, needs)
    }

    /// Sum over `axis`, removing it (a rank-1 input yields `[1]`).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        self.reduce(a, axis, 1.0)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let n = self.dims(a)[axis] as f64;
        self.reduce(a, axis, 1.0 / n)
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push_raw(vec![1], vec![s], Op::SumAll { a }, needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis(first, axis)?;
        let base = self.dims(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != base.len()
                || d.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return shape_err(format!("concat mismatch {base:?} vs {d:?} on axis {axis}"));
            }
            total += d[axis];
        }
        let (outer, _, inner) = lanes(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.dims(p)[axis];
                out.extend_from_slice(&self.data(p)[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push_raw(dims, out, op, needs)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = lanes(t.dims(), axis);
        if start >= end || end > n {
            return shape_err(format!("slice {start}..{end} out of extent {n}"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut dims = t.dims().to_vec();
        dims[axis] = w;
        let needs = self.needs(a);
        self.push_raw(dims, out, Op::Slice { a, axis, start }, needs)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let n = check_dims(dims)?;
        let t = &self.nodes[a.0].value;
        if n != t.numel() {
            return shape_err(format!("cannot reshape {:?} to {dims:?}", t.dims()));
        }
        let data = t.data().to_vec();
        let needs = self.needs(a);
        self.push_raw(dims.to_vec(), data, Op::Reshape { a }, needs)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return shape_err(format!("permutation {axes:?} for rank {rank}"));
        }
        for &ax in axes {
            if ax >= rank {
                return Err(Error::Axis { axis: ax, rank });
            }
            if std::mem::replace(&mut seen[ax], true) {
                return shape_err(format!("repeated axis in {axes:?}"));
            }
        }
        let data = permute_data(t.data(), t.dims(), axes);
        let dims = axes.iter().map(|&ax| t.dims()[ax]).collect();
        let needs = self.needs(a);
        let op = Op::Permute {
            a,
            axes: axes.to_vec(),
        };
        self.push_raw(dims, data, op, needs)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.dims(a).len();
        if rank < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Gathers flat element indices into a rank-1 tensor.
    pub fn take(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.data(a);
        if index.is_empty() {
            return shape_err("take with no indices");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return shape_err(format!("take index {bad} out of {}", x.len()));
        }
        let data = index.iter().map(|&i| x[i]).collect();
        let needs = self.needs(a);
        let op = Op::Take {
            a,
            index: index.to_vec(),
        };
        self.push_raw(vec![index.len()], data, op, needs)
    }

    /// Selects entries along axis 0.
    pub fn rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let r = t.dims()[0];
        let w = t.numel() / r;
        if index.is_empty() {
            return shape_err("row selection with no indices");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return shape_err(format!("row index {bad} out of {r}"));
        }
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut dims = t.dims().to_vec();
        dims[0] = index.len();
        let needs = self.needs(a);
        let op = Op::Rows {
            a,
            index: index.to_vec(),
        };
        self.push_raw(dims, data, op, needs)
    }

    /// Each output row is a weighted sum of rows of `a` (rows are the last
    /// axis; `a` is viewed as `[numel / width, width]`). `taps` holds
    /// `per_row` entries per output row. This is the differentiable core of
    /// bilinear feature sampling.
    pub fn weighted_rows(
        &mut self,
        a: Var,
        taps: Vec<Tap>,
        per_row: usize,
        out_dims: &[usize],
    ) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let width = *t.dims().last().unwrap();
        let src_rows = t.numel() / width;
        if per_row == 0 || taps.len() % per_row != 0 {
            return shape_err("taps not a multiple of per_row");
        }
        let out_rows = taps.len() / per_row;
        check_dims(out_dims)?;
        if out_dims.iter().product::<usize>() != out_rows * width
            || *out_dims.last().unwrap() != width
        {
            return shape_err(format!(
                "weighted_rows output {out_dims:?} for {out_rows} rows of width {width}"
            ));
        }
        if let Some(bad) = taps.iter().find(|tp| tp.row >= src_rows) {
            return shape_err(format!("tap row {} out of {src_rows}", bad.row));
        }
        let x = t.data();
        let mut out = vec![0.0; out_rows * width];
        for (r, chunk) in taps.chunks(per_row).enumerate() {
            let dst = &mut out[r * width..(r + 1) * width];
            for tp in chunk.iter().filter(|tp| tp.weight != 0.0) {
                let src = &x[tp.row * width..(tp.row + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += tp.weight * s;
                }
            }
        }
        let needs = self.needs(a);
        let op = Op::WeightedRows { a, taps, per_row };
        self.push_raw(out_dims.to_vec(), out, op, needs)
    }

    /// Reverse sweep from a `[1]`-shaped loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.dims(loss) != [1] {
            return Err(Error::Contract(format!(
                "loss must be a [1] scalar, got {:?}",
                self.dims(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut params = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                params.push((id, i));
            }
        }
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        // Lazily allocated accumulator for a parent, or None if it needs no grad.
        fn slot<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = node.value.data();
            match &node.op {
                Op::Const => {}
                Op::Leaf { .. } => {
                    leaf_grads[i] = Some(Tensor::new(node.value.dims().to_vec(), g)?);
                }
                Op::Binary { a, b, kind } => {
                    let (ax, bx) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        match kind {
                            BinKind::Add | BinKind::Sub => broadcast_acc(ga, &g, ax, bx, |gk, _, _| gk),
                            BinKind::Mul => broadcast_acc(ga, &g, ax, bx, |gk, _, z| gk * z),
                            BinKind::Div => broadcast_acc(ga, &g, ax, bx, |gk, _, z| gk / z),
                            BinKind::Max => broadcast_acc(ga, &g, ax, bx, |gk, x, z| if x >= z { gk } else { 0.0 }),
                            BinKind::Min => broadcast_acc(ga, &g, ax, bx, |gk, x, z| if x <= z { gk } else { 0.0 }),
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        // roles swap: the accumulator is aligned with b
                        match kind {
                            BinKind::Add => broadcast_acc(gb, &g, bx, ax, |gk, _, _| gk),
                            BinKind::Sub => broadcast_acc(gb, &g, bx, ax, |gk, _, _| -gk),
                            BinKind::Mul => broadcast_acc(gb, &g, bx, ax, |gk, _, x| gk * x),
                            BinKind::Div => broadcast_acc(gb, &g, bx, ax, |gk, z, x| -gk * x / (z * z)),
                            BinKind::Max => broadcast_acc(gb, &g, bx, ax, |gk, z, x| if x >= z { 0.0 } else { gk }),
                            BinKind::Min => broadcast_acc(gb, &g, bx, ax, |gk, z, x| if x <= z { 0.0 } else { gk }),
                        }
                    }
                }
                Op::Affine { a, scale } => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(d, s)| *d += scale * s);
                    }
                }
                Op::Unary { a, kind } => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            ga[k] += g[k]
                                * match kind {
                                    UnKind::Relu => (x[k] > 0.0) as u8 as f64,
                                    UnKind::Sigmoid => y[k] * (1.0 - y[k]),
                                    UnKind::InvSigmoid => {
                                        if x[k] < INV_SIGMOID_EPS || x[k] > 1.0 - INV_SIGMOID_EPS {
                                            0.0
                                        } else {
                                            1.0 / (x[k] * (1.0 - x[k]))
                                        }
                                    }
                                    UnKind::Abs => {
                                        if x[k] > 0.0 {
                                            1.0
                                        } else if x[k] < 0.0 {
                                            -1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    UnKind::Log => 1.0 / x[k],
                                    UnKind::Exp => y[k],
                                };
                        }
                    }
                }
                Op::MatMul { a, b, kind } => {
                    let (ax, bx) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    match *kind {
                        MmKind::Shared { rows, k, n } => {
                            if let Some(ga) = slot(&mut grads, &nodes, *a) {
                                gemm(rows, n, k, &g, View::rm(n), bx, View::tr(n), ga, 1.0);
                            }
                            if let Some(gb) = slot(&mut grads, &nodes, *b) {
                                gemm(k, rows, n, ax, View::tr(k), &g, View::rm(n), gb, 1.0);
                            }
                        }
                        MmKind::Batched { batch, m, k, n } => {
                            if let Some(ga) = slot(&mut grads, &nodes, *a) {
                                for p in 0..batch {
                                    gemm(
                                        m,
                                        n,
                                        k,
                                        &g[p * m * n..],
                                        View::rm(n),
                                        &bx[p * k * n..],
                                        View::tr(n),
                                        &mut ga[p * m * k..],
                                        1.0,
                                    );
                                }
                            }
                            if let Some(gb) = slot(&mut grads, &nodes, *b) {
                                for p in 0..batch {
                                    gemm(
                                        k,
                                        m,
                                        n,
                                        &ax[p * m * k..],
                                        View::tr(k),
                                        &g[p * m * n..],
                                        View::rm(n),
                                        &mut gb[p * k * n..],
                                        1.0,
                                    );
                                }
                            }
                        }
                    }
                }
                Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                    let log = matches!(node.op, Op::LogSoftmax { .. });
                    let (outer, n, inner) = lanes(node.value.dims(), *axis);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| o * n * inner + k * inner + i;
                                if log {
                                    let s: f64 = (0..n).map(|k| g[at(k)]).sum();
                                    for k in 0..n {
                                        ga[at(k)] += g[at(k)] - y[at(k)].exp() * s;
                                    }
                                } else {
                                    let s: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                                    for k in 0..n {
                                        ga[at(k)] += y[at(k)] * (g[at(k)] - s);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { a, axis, rstd } => {
                    let (outer, n, inner) = lanes(node.value.dims(), *axis);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| o * n * inner + k * inner + i;
                                let r = rstd[o * inner + i];
                                let mg = (0..n).map(|k| g[at(k)]).sum::<f64>() / n as f64;
                                let mgy =
                                    (0..n).map(|k| g[at(k)] * y[at(k)]).sum::<f64>() / n as f64;
                                for k in 0..n {
                                    ga[at(k)] += r * (g[at(k)] - mg - y[at(k)] * mgy);
                                }
                            }
                        }
                    }
                }
                Op::Sum { a, axis, scale } => {
                    let (outer, n, inner) = lanes(nodes[a.0].value.dims(), *axis);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for o in 0..outer {
                            for k in 0..n {
                                let dst = &mut ga[(o * n + k) * inner..(o * n + k + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += scale * s;
                                }
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = lanes(node.value.dims(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let ext = nodes[p.0].value.dims()[*axis];
                        if let Some(gp) = slot(&mut grads, &nodes, *p) {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner
                                    ..(o * total + offset + ext) * inner];
                                let dst = &mut gp[o * ext * inner..(o + 1) * ext * inner];
                                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        }
                        offset += ext;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let (outer, n, inner) = lanes(nodes[a.0].value.dims(), *axis);
                    let w = node.value.dims()[*axis];
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for o in 0..outer {
                            let dst = &mut ga[(o * n + start) * inner..(o * n + start + w) * inner];
                            let src = &g[o * w * inner..(o + 1) * w * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::Reshape { a } => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let back = permute_data(&g, node.value.dims(), &inverse);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Take { a, index } => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for (gk, &i) in g.iter().zip(index) {
                            ga[i] += gk;
                        }
                    }
                }
                Op::Rows { a, index } => {
                    let w = node.value.numel() / index.len();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for (r, &i) in index.iter().enumerate() {
                            let dst = &mut ga[i * w..(i + 1) * w];
                            dst.iter_mut()
                                .zip(&g[r * w..(r + 1) * w])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::WeightedRows { a, taps, per_row } => {
                    let width = *node.value.dims().last().unwrap();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for (r, chunk) in taps.chunks(*per_row).enumerate() {
                            let src = &g[r * width..(r + 1) * width];
                            for tp in chunk.iter().filter(|tp| tp.weight != 0.0) {
                                let dst = &mut ga[tp.row * width..(tp.row + 1) * width];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += tp.weight * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            params,
        })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit with the input clamped to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(x: f64) -> f64 {
    let c = x.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
    (c / (1.0 - c)).ln()
}
