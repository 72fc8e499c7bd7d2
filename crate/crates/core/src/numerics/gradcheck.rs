//! Central finite-difference check of tape gradients.

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Var};

/// Denominator floor of the relative error: gradients smaller than this are
/// compared in absolute terms against `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of every entry of every parameter in `store`
/// with a central difference of step `h`. `loss` must build a scalar from the
/// store deterministically.
pub fn check_params<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward(l)?;
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    g.accumulate_param_grads(&mut with_grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = with_grads.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err.is_nan() || err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
