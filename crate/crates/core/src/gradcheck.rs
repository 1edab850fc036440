//! Finite-difference verification harness.
//!
//! Compares analytic gradients (from a backward pass) against central finite
//! differences of a scalar-valued forward function, coordinate by coordinate.
//! Used by the unit tests for individual operations and by the acceptance
//! suite for full encoder/loss compositions.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error bound for a passing check.
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative disagreement between an analytic and a numeric derivative, with
/// an absolute fallback when both are tiny.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        // Both near zero: count as exact unless they differ in absolute terms.
        if (analytic - numeric).abs() <= 1e-7 {
            0.0
        } else {
            (analytic - numeric).abs() / denom.max(1e-12)
        }
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Central finite difference of `forward` with respect to one coordinate of
/// one stored parameter. `forward` must be a pure function of the store.
pub fn numeric_partial<F>(
    store: &mut ParamStore,
    id: ParamId,
    coord: usize,
    step: f64,
    forward: &F,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let x0 = store.get(id).data[coord];
    store.get_mut(id).data[coord] = x0 + step;
    let fp = forward(store);
    store.get_mut(id).data[coord] = x0 - step;
    let fm = forward(store);
    store.get_mut(id).data[coord] = x0;
    Ok((fp? - fm?) / (2.0 * step))
}

/// Checks the given coordinates of the given parameters and returns the worst
/// relative error observed. `analytic` maps each checked parameter to its
/// full analytic gradient buffer (typically harvested from a backward pass
/// before calling this).
pub fn max_rel_error<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    analytic: &dyn Fn(ParamId) -> Vec<f64>,
    forward: F,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut worst = 0.0_f64;
    for &(id, coord) in coords {
        let a = analytic(id)[coord];
        let n = numeric_partial(store, id, coord, FD_STEP, &forward)?;
        worst = worst.max(rel_error(a, n));
    }
    Ok(worst)
}

/// Every coordinate of every listed parameter, for small problems.
pub fn all_coords(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        for k in 0..store.get(id).numel() {
            out.push((id, k));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn rel_error_near_zero_uses_absolute_fallback() {
        assert_eq!(rel_error(1e-9, 2e-9), 0.0);
        assert!(rel_error(1.0, 1.0001) < 2e-4);
        assert!(rel_error(1.0, 1.1) > 0.05);
    }

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut store = ParamStore::new();
        let x = store
            .insert("x", Tensor::from_vec(&[3], vec![0.7, -1.2, 0.4]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x).unwrap();
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        g.harvest_grads(&mut store).unwrap();
        let analytic = store.get(x).grad.clone().unwrap();
        let coords = all_coords(&store, &[x]);
        let worst = max_rel_error(
            &mut store,
            &coords,
            &|_| analytic.clone(),
            |s: &ParamStore| {
                let mut g = Graph::new();
                let xv = g.param(s, x)?;
                let sq = g.mul(xv, xv)?;
                let loss = g.sum_all(sq)?;
                Ok(g.scalar_value(loss))
            },
        )
        .unwrap();
        assert!(worst < FD_REL_TOL, "worst rel error {worst}");
    }
}
