//! Dense 64-bit tensors with a dynamic reverse-mode tape.
//!
//! [`Tensor`] is a plain value: row-major `f64` data plus an optional gradient
//! buffer. Differentiable computation happens on a [`Tape`], which hands out
//! copyable [`Var`] handles. Every forward op checks shapes and finiteness and
//! returns a [`Result`](crate::Result).
//!
//! ```
//! use dedetr::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap().requiring_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.of(x).unwrap().data(), &[6.0, -2.0]);
//! ```

mod gemm;
mod gradcheck;
mod params;
pub(crate) mod tape;

pub use gradcheck::finite_diff_check;
pub use params::{ParamId, Params};
pub use tape::{
    inverse_sigmoid as inverse_sigmoid_value, sigmoid as sigmoid_value, Gradients, Tape, Tap, Var,
    INV_SIGMOID_EPS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};

/// Initialisation rule for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `[lo, hi)`, deterministic under `seed`.
    Uniform { lo: f64, hi: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return shape_err("tensor needs at least one dimension");
    }
    if dims.iter().any(|&d| d == 0) {
        return shape_err(format!("zero extent in dims {dims:?}"));
    }
    Ok(dims.iter().product())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            dims,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn create(dims: &[usize], init: Init) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Contract(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random_range(lo..hi)).collect()
            }
        };
        Self::new(dims.to_vec(), data)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::create(dims, Init::Zeros)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return shape_err(format!(
                "gradient length {} does not match tensor of {} values",
                g.len(),
                self.data.len()
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value-level reshape; the element count must not change.
    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.dims.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        // x - x is NaN exactly for NaN and infinities; the sum propagates it
        self.data.iter().fold(0.0, |acc, x| acc + (x - x)) == 0.0
    }
}

/// `(outer, extent, inner)` decomposition used by axis-wise ops.
pub(crate) fn lanes(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}
