//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h` for every scalar of every parameter in `store`. When
/// `max_per_param` is set, an evenly strided subset of each tensor is checked.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, max_per_param: Option<usize>, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.zero_grad();
    store.accumulate(&g, &grads);
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic[pi][j], numeric, 1e-5);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
