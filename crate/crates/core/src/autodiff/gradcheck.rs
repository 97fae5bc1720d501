use super::{Graph, Group, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// Parameter attaining `max_rel_error`.
    pub worst: Option<String>,
    pub checked_params: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` must build the same loss every time it is called (fixed noise). For
/// each parameter tensor in `groups` the error is
/// `max|analytic − numeric| / (max|numeric| + 1e-8)`; the result is the
/// largest such value.
pub fn grad_check<F>(store: &mut ParamStore, groups: &[Group], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grad();
    let mut g = Graph::new(groups);
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked_params: 0,
    };
    for id in store.ids_in(groups) {
        if matches!(store.get(id).group, Group::Feature | Group::Buffer) {
            continue;
        }
        let analytic = store.grad(id).clone();
        let n = analytic.len();
        let mut numeric = Tensor::zeros(analytic.shape());
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            numeric.data_mut()[k] = (up - down) / (2.0 * h);
        }
        let diff = analytic.zip_map(&numeric, |a, b| a - b).max_abs();
        let rel = diff / (numeric.max_abs() + 1e-8);
        report.checked_params += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some(store.get(id).name.clone());
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
