use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    let v = tape.value(out)?;
    if v.len() != 1 {
        return Err(Error::Graph("checked expression must be scalar".into()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of a scalar expression against central
/// differences over every parameter entry.
///
/// Returns `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
/// The expression is rebuilt by `f` on a fresh tape for every evaluation.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, eps: f64, f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {eps}"
        )));
    }

    let mut analytic = store.grad_buffer();
    {
        let mut tape = Tape::with_params(&*store);
        let out = f(&mut tape)?;
        tape.backward(out, &mut analytic)?;
    }

    let mut worst: f64 = 0.0;
    for p in 0..store.len() {
        let id = ParamId(p);
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store, &f);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store, &f);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[i];
            if !(numeric.is_finite() && a.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{i}]",
                    store.get(id).name
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
