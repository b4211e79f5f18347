//! Central finite-difference verification of tape gradients.

use rand::seq::index;

use super::tensor::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Streams;

/// A scalar objective over a parameter set.
pub trait Objective {
    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, Gradients)>;

    fn value(&mut self, params: &ParamSet) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

impl<F> Objective for F
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, Gradients)> {
        self(params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients with central differences on `sample` randomly
/// chosen scalar parameters (distinct when `sample` does not exceed the
/// parameter count).
pub fn finite_difference_check<O: Objective + ?Sized>(
    objective: &mut O,
    params: &ParamSet,
    eps: f64,
    sample: usize,
    streams: &Streams,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let (base, grads) = objective.value_and_grad(params)?;
    let again = objective.value(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let offsets: Vec<(usize, usize)> = params
        .iter()
        .scan(0, |acc, (id, _, t)| {
            let start = *acc;
            *acc += t.len();
            Some((id.0, start))
        })
        .collect();
    let total = params.num_scalars();
    if total == 0 {
        return Err(Error::invalid("no parameters to check"));
    }
    let mut rng = streams.child("gradcheck").rng();
    let picks: Vec<usize> = if sample <= total {
        index::sample(&mut rng, total, sample).into_vec()
    } else {
        use rand::Rng;
        (0..sample).map(|_| rng.random_range(0..total)).collect()
    };

    let mut work = params.clone();
    let mut probes = Vec::with_capacity(picks.len());
    let mut max_rel: f64 = 0.0;
    for flat in picks {
        let slot = offsets.partition_point(|&(_, start)| start <= flat) - 1;
        let (pid, start) = offsets[slot];
        let id = super::tensor::ParamId(pid);
        let i = flat - start;
        let orig = work.get(id).data()[i];

        work.get_mut(id).data_mut()[i] = orig + eps;
        let plus = objective.value(&work)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let minus = objective.value(&work)?;
        work.get_mut(id).data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(id)[i];
        let rel = relative_error(analytic, numeric);
        max_rel = max_rel.max(rel);
        probes.push(ProbeResult {
            param: params.name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        probes,
    })
}
