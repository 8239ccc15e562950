use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar program `f` against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// Every trainable parameter of `store` is probed on up to `per_param`
/// randomly chosen coordinates (all of them when the tensor is smaller). The
/// relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Programs that queue running-statistic updates or are not bitwise
/// repeatable are rejected.
pub fn grad_check<F, R>(store: &ParamStore<f64>, f: F, epsilon: f64, per_param: usize, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    R: rand::Rng + ?Sized,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar program, got {:?}", g.shape(loss))));
    }
    if !g.stat_updates().is_empty() {
        return Err(Error::Contract("program updates batchnorm running statistics; freeze them first".into()));
    }
    let base = g.value(loss).item();
    if eval(&f, store)?.to_bits() != base.to_bits() {
        return Err(Error::Contract("program is not deterministic".into()));
    }
    let grads = g.backward(loss)?;

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), coordinates: 0 };
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, per_param).into_vec()
        };
        let analytic = grads.param(id);
        for i in coords {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(&f, &work)?;
            work.value_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(&f, &work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((store.entry(id).name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Largest disagreement between central differences at `epsilon` and at
/// `epsilon / 10` over the probed coordinates, relative to
/// `max(|d₁|, |d₂|, 1e-6)`.
///
/// A smooth program gives a gap near rounding noise; a program whose
/// evaluation point lies within `epsilon` of a kink (relu, max tie, a
/// neighbourhood switch) does not. The analytic gradient is not consulted.
pub fn smoothness_gap<F, R>(store: &ParamStore<f64>, f: F, epsilon: f64, per_param: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    R: rand::Rng + ?Sized,
{
    let mut work = store.clone();
    let mut gap: f64 = 0.0;
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, per_param).into_vec()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = orig + h;
                let plus = eval(&f, &work)?;
                work.value_mut(id).data_mut()[i] = orig - h;
                let minus = eval(&f, &work)?;
                work.value_mut(id).data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let (wide, narrow) = (central(epsilon)?, central(epsilon / 10.0)?);
            let rel = (wide - narrow).abs() / wide.abs().max(narrow.abs()).max(1e-6);
            if rel > gap || rel.is_nan() {
                gap = rel;
            }
        }
    }
    Ok(gap)
}
