//! Central-difference gradient oracle.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// single-element loss. The numeric side only evaluates `f` forward. Returns
/// `max_i |g_analytic - g_numeric| / max(1, |g_numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let numeric = numeric_grad(&f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| libm::fabs(a - n) / libm::fmax(1.0, libm::fabs(*n)))
        .fold(0.0, f64::max))
}

/// Tape gradient of `f` at `x`.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    Ok(tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_default())
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad<F>(f: &F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        Ok(tape.item(out))
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(out)
}
