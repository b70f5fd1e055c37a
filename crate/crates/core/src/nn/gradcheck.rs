//! Central finite-difference verification of analytic gradients.

use super::{GradStore, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-4;
/// Denominator floor for gradients that vanish analytically, such as an
/// attention key bias.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖numeric‖, NORM_FLOOR)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Scalar computation over a parameter store. When handed a gradient buffer
/// it must accumulate `d(loss)/d(param)` into it.
pub trait Objective {
    fn eval(&self, params: &ParamStore, grads: Option<&mut GradStore>) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&ParamStore, Option<&mut GradStore>) -> f64,
{
    fn eval(&self, params: &ParamStore, grads: Option<&mut GradStore>) -> f64 {
        self(params, grads)
    }
}

/// Compares the analytic gradient of every trainable parameter against
/// central differences with step [`DEFAULT_STEP`].
pub fn grad_check(params: &mut ParamStore, objective: &impl Objective, tolerance: f64) -> GradCheckReport {
    grad_check_with_step(params, objective, tolerance, DEFAULT_STEP)
}

pub fn grad_check_with_step(
    params: &mut ParamStore,
    objective: &impl Objective,
    tolerance: f64,
    step: f64,
) -> GradCheckReport {
    let mut analytic = params.grad_buffers();
    objective.eval(params, Some(&mut analytic));

    let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.value(id).len();
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..n {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + step;
            let up = objective.eval(params, None);
            params.value_mut(id).data_mut()[i] = orig - step;
            let down = objective.eval(params, None);
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data()[i];
            diff2 += (a - numeric).powi(2);
            num2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let (diff, num) = (diff2.sqrt(), num2.sqrt());
        let rel_error = diff / num.max(NORM_FLOOR);
        checks.push(ParamCheck {
            name: params.param(id).name.clone(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = checks.iter().fold(0.0, |m: f64, c| m.max(c.rel_error));
    GradCheckReport {
        params: checks,
        max_rel_error,
        tolerance,
    }
}
