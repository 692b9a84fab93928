//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::dense::Tensor;
use super::tape::{Tape, ValueId};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    /// max over entries of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: T,
    /// (parameter index, flat entry index) of the worst entry
    pub worst: Option<(usize, usize)>,
    pub entries: usize,
}

fn eval<T, F>(params: &[Tensor<T>], f: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let v = tape.data(root).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite forward value {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar expression `f` against central
/// differences with step `eps` for every entry of every parameter.
///
/// `f` receives a fresh tape and the leaf ids of `params` (in order) and must
/// return a 1×1 value. Entries are evaluated in parallel on the current rayon
/// pool; the result does not depend on the thread count.
pub fn check_gradient<T, F>(params: &[Tensor<T>], eps: T, f: F) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[ValueId]) -> Result<ValueId> + Sync,
{
    if !(eps > T::zero() && eps <= T::of(1e-2)) {
        return Err(Error::Domain(format!("gradient-check step {eps} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let v = tape.data(root).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite forward value {v}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    drop(tape);

    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e)))
        .collect();
    let chunk = (entries.len() / (4 * rayon::current_num_threads()).max(1)).clamp(1, 256);
    let two_eps = eps + eps;

    let errors: Vec<Vec<T>> = entries
        .par_chunks(chunk)
        .map(|chunk| -> Result<Vec<T>> {
            let mut work = params.to_vec();
            let mut out = Vec::with_capacity(chunk.len());
            for &(pi, e) in chunk {
                let orig = work[pi].data()[e];
                work[pi].data_mut()[e] = orig + eps;
                let plus = eval(&work, &f)?;
                work[pi].data_mut()[e] = orig - eps;
                let minus = eval(&work, &f)?;
                work[pi].data_mut()[e] = orig;
                let numeric = (plus - minus) / two_eps;
                let a = analytic[pi].data()[e];
                out.push((a - numeric).abs() / numeric.abs().max(T::one()));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: None,
        entries: entries.len(),
    };
    for (&loc, &err) in entries.iter().zip(errors.iter().flatten()) {
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(loc);
        }
    }
    Ok(report)
}
