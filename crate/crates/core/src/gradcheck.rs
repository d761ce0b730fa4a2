//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// A scalar function of a [`ParamStore`] with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamStore) -> Result<f64>;

    /// Evaluates the function and overwrites the gradient slots of `params`.
    fn value_and_grad(&self, params: &mut ParamStore) -> Result<f64>;
}

impl<O: Objective + ?Sized> Objective for &O {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        (**self).value(params)
    }

    fn value_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        (**self).value_and_grad(params)
    }
}

/// Any closure that builds its scalar on a [`Graph`] is an [`Objective`].
pub struct TapeObjective<F>(pub F);

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    fn value(&self, params: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let root = (self.0)(&mut g, params)?;
        Ok(g.value(root).item())
    }

    fn value_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let root = (self.0)(&mut g, params)?;
        let grads = g.backward(root)?;
        params.zero_grad();
        g.accumulate_into(&grads, params)?;
        Ok(g.value(root).item())
    }
}

/// Wraps an objective and scales its analytic gradient. A factor other than 1
/// yields a deliberately wrong backward rule, used as a negative control.
pub struct ScaledGradient<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: Objective> Objective for ScaledGradient<O> {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        self.inner.value(params)
    }

    fn value_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        let v = self.inner.value_and_grad(params)?;
        let scaled: Vec<(String, crate::Tensor)> = params
            .grads()
            .map(|(n, g)| (n.to_string(), g.scale(self.factor - 1.0)))
            .collect();
        for (n, g) in scaled {
            params.accumulate_grad(&n, &g)?;
        }
        Ok(v)
    }
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every parameter
/// entry, with the numeric derivative from central differences of step `eps`.
pub fn grad_check(f: &dyn Objective, params: &ParamStore, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut analytic = params.clone();
    f.value_and_grad(&mut analytic)?;

    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let n = params.get(name)?.len();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = f.value(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = f.value(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective is not finite near `{name}`[{i}]"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.grad(name)?.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
