//! Central-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

const REFINE_ABOVE: f64 = 1e-7;

fn relative_error(exact: f64, numeric: f64) -> f64 {
    (exact - numeric).abs() / (exact.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of `loss_fn` with central differences for
/// every scalar entry of `params`.
///
/// Coordinates that miss at `step` are re-estimated with five-point stencils
/// at `10 × step` and `100 × step`; the smallest error is kept.
///
/// `loss_fn` records a scalar loss on the supplied tape; it is re-run for
/// every probe, so it must be deterministic.
pub fn finite_difference_check<F>(store: &mut ParamStore, params: &[ParamId], step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!("loss is not deterministic: {first} then {second}")));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in params {
        let n = store.value(id).len();
        for k in 0..n {
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let mut probe = |h: f64| -> Result<f64> {
                let original = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = original + h;
                let plus = eval(store);
                store.value_mut(id).data_mut()[k] = original - h;
                let minus = eval(store);
                store.value_mut(id).data_mut()[k] = original;
                Ok(plus? - minus?)
            };
            let d1 = probe(step)?;
            let mut rel = relative_error(exact, d1 / (2.0 * step));
            // Roundoff swamps tiny derivatives at the nominal step; a wider
            // five-point stencil keeps truncation low, and a kink crossed by
            // the wider stencil only ever loses against the nominal estimate.
            for scale in [10.0, 100.0] {
                if rel <= REFINE_ABOVE {
                    break;
                }
                let h = step * scale;
                let five = (8.0 * probe(h)? - probe(2.0 * h)?) / (12.0 * h);
                rel = rel.min(relative_error(exact, five));
            }
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use core::cell::Cell;

    fn quadratic_store() -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(alloc::vec![0.3, -1.2, 2.5])).unwrap();
        (store, p)
    }

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let (mut store, p) = quadratic_store();
        let report = finite_difference_check(&mut store, &[p], 1e-5, |tape| {
            let v = tape.param(p);
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn detached_branch_is_caught() {
        // x·stop(x) has tape gradient x but true gradient 2x
        let (mut store, p) = quadratic_store();
        let report = finite_difference_check(&mut store, &[p], 1e-5, |tape| {
            let v = tape.param(p);
            let c = tape.constant(tape.value(v).clone());
            let sq = tape.mul(v, c)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!((report.max_relative_error - 1.0 / 3.0).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let (mut store, p) = quadratic_store();
        let report = finite_difference_check(&mut store, &[p], 1e-5, |tape| {
            let _ = tape.param(p);
            Ok(tape.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn zero_step_is_a_contract_error() {
        let (mut store, p) = quadratic_store();
        let err = finite_difference_check(&mut store, &[p], 0.0, |tape| Ok(tape.param(p))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let (mut store, p) = quadratic_store();
        let calls = Cell::new(0.0);
        let err = finite_difference_check(&mut store, &[p], 1e-5, |tape| {
            calls.set(calls.get() + 1.0);
            let v = tape.param(p);
            let s = tape.sum(v);
            let jitter = tape.constant(Tensor::scalar(calls.get()));
            tape.add(s, jitter)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }
}
