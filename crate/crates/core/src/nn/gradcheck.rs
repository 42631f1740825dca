use super::{Graph, KernelError, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient vanishes are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Every `(parameter, flat index)` coordinate of the trainable parameters.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store.trainable_ids().flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i))).collect()
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences `(f(θ+h) − f(θ−h)) / 2h` at each of `coords`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var, KernelError>,
{
    store.zero_grad();
    let mut graph = Graph::new();
    let out = f(store, &mut graph)?;
    let grads = graph.backward(out);
    graph.accumulate_param_grads(&grads, store);

    let eval = |store: &ParamStore| -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let v = f(store, &mut g)?;
        Ok(g.value(v).item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for &(id, i) in coords {
        let analytic = store.grad(id).data()[i];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[i] = orig - h;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[i] = orig;
        let err = rel_err(analytic, (plus - minus) / (2.0 * h));
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
