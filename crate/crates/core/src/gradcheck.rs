//! Central-difference gradient oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares `backward()` against central differences of `f` at `x`.
///
/// `f` receives a fresh tape and the input registered as a parameter, and
/// must return a scalar node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.param(t.clone());
        let out = f(&mut tape, xv)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::contract("grad_check function must be scalar"));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get(xv);
    if !analytic.all_finite() {
        return Err(Error::NonFinite("grad_check analytic gradient".into()));
    }

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let rel = (a - n).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic: analytic.into_data(),
        numeric,
    })
}
