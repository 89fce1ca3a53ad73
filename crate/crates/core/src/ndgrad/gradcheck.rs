//! Central finite-difference verification of tape gradients.

use crate::error::{invalid, Error, Result};

use super::{Module, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − fd| / max(1, |analytic|, |fd|) over checked coordinates
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates sitting on a kink or discontinuity of the function.
    pub excluded: usize,
    /// Parameter holding the worst coordinate, when checking a module.
    pub worst: Option<String>,
}

impl GradCheckReport {
    fn absorb(&mut self, other: GradCheckReport, name: &str) {
        if self.worst.is_none() || other.max_rel_error > self.max_rel_error {
            self.worst = Some(name.to_string());
            self.max_rel_error = other.max_rel_error;
        }
        self.checked += other.checked;
        self.excluded += other.excluded;
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 1e-7 && eps < 1e-3 {
        Ok(())
    } else {
        Err(invalid(format!(
            "finite-difference step must lie in (1e-7, 1e-3), got {eps}"
        )))
    }
}

/// Compares one coordinate. `f(k)` evaluates the function with the
/// coordinate shifted by `k · eps`.
///
/// A coordinate is treated as non-differentiable when the two second
/// differences at step eps and 2·eps disagree with the 1:4 ratio a smooth
/// function has; that catches ReLU kinks and quantization jumps.
fn compare(analytic: f64, eps: f64, f0: f64, f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let p1 = f(1.0)?;
    let m1 = f(-1.0)?;
    let p2 = f(2.0)?;
    let m2 = f(-2.0)?;
    let central = (p1 - m1) / (2.0 * eps);
    let d1 = p1 - 2.0 * f0 + m1;
    let d2 = p2 - 2.0 * f0 + m2;
    let scale = 1f64.max(analytic.abs()).max(central.abs()).max(f0.abs());
    if (d2 - 4.0 * d1).abs() > 1e-5 * eps * scale {
        return Ok(None);
    }
    Ok(Some(
        (analytic - central).abs() / 1f64.max(analytic.abs()).max(central.abs()),
    ))
}

/// Checks the tape gradient of the scalar `f` at `input` against central
/// differences.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone())?;
        let l = f(&mut tape, v)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true)?;
    let loss = f(&mut tape, x)?;
    let f0 = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(input.shape()));
    let again = eval(input)?;
    if again.to_bits() != f0.to_bits() {
        return Err(Error::NonDeterministic(f0, again));
    }
    let mut report = GradCheckReport::default();
    let mut probe = input.clone();
    for i in 0..input.len() {
        let base = input.data()[i];
        let mut shifted = |k: f64| {
            probe.data_mut()[i] = base + k * eps;
            let v = eval(&probe);
            probe.data_mut()[i] = base;
            v
        };
        match compare(analytic.data()[i], eps, f0, &mut shifted)? {
            Some(err) => {
                report.max_rel_error = report.max_rel_error.max(err);
                report.checked += 1;
            }
            None => report.excluded += 1,
        }
    }
    Ok(report)
}

/// Checks gradients of every parameter of `model` for the scalar built by
/// `f`. At most `max_per_param` evenly spaced coordinates are probed per
/// parameter tensor.
pub fn grad_check_params<M, F>(model: &mut M, f: F, eps: f64, max_per_param: usize) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&mut Tape<f64>, &mut M) -> Result<Var>,
{
    grad_check_params_surrogate(model, &f, &f, eps, max_per_param)
}

/// Like [`grad_check_params`], but the finite differences are taken of
/// `surrogate` instead of `f`. Straight-through and stop-gradient terms
/// are only differentiable through a surrogate that freezes them at the
/// current parameters; it must agree with `f` there to 1e-12.
pub fn grad_check_params_surrogate<M, F, S>(
    model: &mut M,
    f: F,
    surrogate: S,
    eps: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&mut Tape<f64>, &mut M) -> Result<Var>,
    S: Fn(&mut Tape<f64>, &mut M) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let loss = f(&mut tape, model)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let eval = |model: &mut M| -> Result<f64> {
        let mut tape = Tape::new();
        let l = surrogate(&mut tape, model)?;
        Ok(tape.value(l).item())
    };
    let again = eval(model)?;
    if (again - f0).abs() > 1e-12 * 1f64.max(f0.abs()) {
        return Err(invalid(format!("surrogate gives {again} where the loss gives {f0}")));
    }
    let names: Vec<(String, usize)> = model.params().into_iter().map(|(n, t)| (n, t.len())).collect();
    let mut report = GradCheckReport::default();
    for (pi, (name, len)) in names.iter().enumerate() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .clone();
        let step = len.div_ceil(max_per_param.max(1)).max(1);
        let mut sub = GradCheckReport::default();
        for i in (0..*len).step_by(step) {
            let base = model.params()[pi].1.data()[i];
            let mut shifted = |k: f64| {
                model.params_mut()[pi].1.data_mut()[i] = base + k * eps;
                let v = eval(model);
                model.params_mut()[pi].1.data_mut()[i] = base;
                v
            };
            match compare(g.data()[i], eps, f0, &mut shifted)? {
                Some(err) => {
                    sub.max_rel_error = sub.max_rel_error.max(err);
                    sub.checked += 1;
                }
                None => sub.excluded += 1,
            }
        }
        report.absorb(sub, name);
    }
    Ok(report)
}
