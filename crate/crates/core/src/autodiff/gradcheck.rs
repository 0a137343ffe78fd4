//! Central-difference gradient checks.

use super::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Per-coordinate relative error used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside (0, 1e-3]"
        )));
    }
    Ok(())
}

fn scalar_of(tape: &Tape<'_>, root: Var, what: &str) -> Result<f64> {
    let v = tape.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `theta` with central differences
/// and returns the largest per-coordinate relative error.
///
/// `f` receives a fresh tape and a leaf holding the (possibly perturbed)
/// argument and must return a scalar node.
pub fn finite_diff_check<F>(f: F, theta: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |x: &Array| -> Result<f64> {
        let mut tape = Tape::detached();
        let leaf = tape.input(x.clone());
        let root = f(&mut tape, leaf)?;
        scalar_of(&tape, root, "f(theta)")
    };

    let mut tape = Tape::detached();
    let leaf = tape.input(theta.clone());
    let root = f(&mut tape, leaf)?;
    scalar_of(&tape, root, "f(theta)")?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Array::zeros(theta.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over stored parameters.
///
/// At most `max_coords` evenly strided coordinates of each parameter are
/// probed, so large models stay tractable.
pub fn param_finite_diff_check<F>(
    store: &ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    check_eps(eps)?;
    let grads = {
        let mut tape = Tape::new(store);
        let root = f(&mut tape)?;
        scalar_of(&tape, root, "f(theta)")?;
        tape.backward(root)?.into_param_map()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let root = f(&mut tape)?;
        scalar_of(&tape, root, "f(theta)")
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let len = store.get(id).len();
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(&id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
