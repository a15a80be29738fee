//! Finite-difference gradient checking.
//!
//! This module is deliberately independent of the backward rules it checks:
//! numeric gradients come from re-running the *forward* pass with perturbed
//! parameter values and central differences. Checks should run in `f64`,
//! where a step of ~1e-5 leaves plenty of headroom below the 1e-4 relative
//! tolerance used throughout the test suite.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Param, Tape};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

/// One failed gradient entry.
#[derive(Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "param {:?} [{}]: analytic {:.9e} vs numeric {:.9e} (rel {:.3e})",
            self.param, self.index, self.analytic, self.numeric, self.rel_error
        )
    }
}

/// Relative error with an absolute floor: tiny gradients compare absolutely.
fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Check analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` must build a fresh graph on the given tape from the *current*
/// values of `params` and return the scalar loss node — exactly the
/// define-by-run convention used everywhere else, so the real forward code
/// can be passed in unchanged.
pub fn check_gradients<T, F>(
    loss_fn: F,
    params: &[&Param<T>],
    step: f64,
    tol: f64,
) -> Result<(), Vec<GradMismatch>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>) -> NodeId,
{
    let eval = |f: &F| -> f64 {
        let mut tape = Tape::new();
        let loss = f(&mut tape);
        tape.value(loss).item().as_f64()
    };

    // Analytic pass.
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape);
    tape.backward(loss).expect("gradcheck: backward failed");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.data().iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    // Numeric pass: perturb one element at a time.
    let mut mismatches = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let original = p.value();
        for i in 0..original.numel() {
            let x0 = original.data()[i].as_f64();

            let mut plus = original.clone();
            plus.data_mut()[i] = T::from_f64(x0 + step);
            p.set_value(plus).unwrap();
            let f_plus = eval(&loss_fn);

            let mut minus = original.clone();
            minus.data_mut()[i] = T::from_f64(x0 - step);
            p.set_value(minus).unwrap();
            let f_minus = eval(&loss_fn);

            p.set_value(original.clone()).unwrap();

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi][i];
            let rel = rel_error(a, numeric);
            if rel > tol {
                mismatches.push(GradMismatch {
                    param: p.name(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(mismatches)
    }
}

/// Panic with a readable report if any gradient entry disagrees.
pub fn assert_gradients<T, F>(loss_fn: F, params: &[&Param<T>], step: f64, tol: f64)
where
    T: Scalar,
    F: Fn(&mut Tape<T>) -> NodeId,
{
    if let Err(mismatches) = check_gradients(loss_fn, params, step, tol) {
        let shown: Vec<String> = mismatches.iter().take(8).map(|m| m.to_string()).collect();
        panic!(
            "{} gradient mismatches:\n{}",
            mismatches.len(),
            shown.join("\n")
        );
    }
}
