//! Finite-difference verification of reverse-mode gradients.

use thiserror::Error;

use super::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("function output is not a scalar")]
    NotScalar,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn eval<F>(store: &ParamStore, f: &F, x: &Tensor) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::with_params(store);
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v);
    let t = tape.value(out);
    if t.shape() != (1, 1) {
        return Err(GradCheckError::NotScalar);
    }
    if !t.item().is_finite() {
        return Err(GradCheckError::NonFinite);
    }
    Ok(t.item())
}

/// Largest componentwise relative error between the tape gradient of `f`
/// at `point` and central differences with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    grad_check_input(&ParamStore::new(), f, point, eps)
}

/// [`grad_check`] for a function that also reads (fixed) parameters.
pub fn grad_check_input<F>(store: &ParamStore, f: F, point: &Tensor, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if !point.is_finite() {
        return Err(GradCheckError::NonFinite);
    }
    let mut tape = Tape::with_params(store);
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x);
    if tape.value(out).shape() != (1, 1) {
        return Err(GradCheckError::NotScalar);
    }
    let grads = tape.backward(out);
    let analytic = grads.of(x).cloned().unwrap_or_else(|| Tensor::zeros(point.rows, point.cols));
    if !analytic.is_finite() {
        return Err(GradCheckError::NonFinite);
    }
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(store, &f, &probe)?;
        probe.data[i] = orig - eps;
        let down = eval(store, &f, &probe)?;
        probe.data[i] = orig;
        worst = worst.max(rel_error(analytic.data[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to every scalar of
/// every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape) -> Var,
{
    let run = |s: &ParamStore| -> Result<f64, GradCheckError> {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape);
        let t = tape.value(out);
        if t.shape() != (1, 1) {
            return Err(GradCheckError::NotScalar);
        }
        t.item().is_finite().then(|| t.item()).ok_or(GradCheckError::NonFinite)
    };
    let mut analytic = store.zeros_like();
    {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape);
        if tape.value(out).shape() != (1, 1) {
            return Err(GradCheckError::NotScalar);
        }
        tape.backward(out).accumulate_into(&mut analytic);
    }
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for i in 0..store.get(id).data.len() {
            let orig = store.get(id).data[i];
            probe.get_mut(id).data[i] = orig + eps;
            let up = run(&probe)?;
            probe.get_mut(id).data[i] = orig - eps;
            let down = run(&probe)?;
            probe.get_mut(id).data[i] = orig;
            worst = worst.max(rel_error(analytic[id.0].data[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
