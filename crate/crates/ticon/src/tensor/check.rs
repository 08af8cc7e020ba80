//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Evaluate the scalar function `f` built on a fresh tape at `x`.
fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let out = f(&mut tape, vx)?;
    tape.value(out).item()
}

/// Central-difference gradient of `f` at `x`, the independent oracle used by
/// [`grad_check`].
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Range(format!("grad_check eps {eps} must be > 0")));
    }
    let mut g = vec![0.0; x.numel()];
    let mut xp = x.clone();
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = xp.data[i];
        xp.data[i] = orig + eps;
        let fp = eval(f, &xp)?;
        xp.data[i] = orig - eps;
        let fm = eval(f, &xp)?;
        xp.data[i] = orig;
        *gi = (fp - fm) / (2.0 * eps);
    }
    Ok(g)
}

/// Compare the tape's analytic gradient of the scalar function `f` against
/// central differences at `x`. Returns the max over components of
/// `|analytic - cd| / max(1, |cd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Range(format!("grad_check eps {eps} must be > 0")));
    }
    let mut tape = Tape::new();
    let vx = tape.param(x.clone());
    let out = f(&mut tape, vx)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape("grad_check target must be scalar".into()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(vx)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = numeric_gradient(&f, x, eps)?;
    let mut worst = 0.0f64;
    for (a, cd) in analytic.iter().zip(&numeric) {
        let err = (a - cd).abs() / cd.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
