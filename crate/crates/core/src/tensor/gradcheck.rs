use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh tape from the leaf it is given and
/// returns a `[1]` result. Returns `max_i |g_i - fd_i| / max(1, |g_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-7, 1e-4]")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let val = tape.data(out);
        if val.len() != 1 {
            return Err(Error::Contract("function must return a [1] scalar".into()));
        }
        if !val[0].is_finite() {
            return Err(Error::Numeric("non-finite function value".into()));
        }
        Ok(val[0])
    };
    eval(x)?;

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().requiring_grad());
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = match grads.of(leaf) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
