//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::nn::{Mode, ParamStore, Scope};
use crate::tensor::{Tape, Tensor, Var};

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps gradients that are analytically zero (and numerically
/// ~1e-11 from cancellation) from registering as 100% errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `d f / d inputs` from the tape against central differences with step `h`.
///
/// `f` builds a scalar on a fresh tape from leaves holding `inputs`; it is
/// re-run for every perturbed coordinate.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad"))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Finite-difference check of `d f / d params` for the named weights of `store`
/// (every trainable weight when `names` is empty).
pub fn check_params<F>(store: &ParamStore, names: &[&str], mode: Mode, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &mut Scope) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut scope = Scope::bind(&mut tape, store, true, mode);
    let loss = f(&mut tape, &mut scope)?;
    tape.backward(loss)?;
    let grads = scope.grads(&tape);
    drop(scope);

    let selected: Vec<String> = if names.is_empty() {
        store.trainable().map(|(k, _)| k.to_string()).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut scope = Scope::bind(&mut tape, s, false, mode);
        let out = f(&mut tape, &mut scope)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck::default();
    let mut work = store.clone();
    for name in &selected {
        let analytic = grads
            .get(name)
            .ok_or_else(|| crate::Error::MissingParam(name.clone()))?;
        for j in 0..analytic.numel() {
            let orig = store.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
