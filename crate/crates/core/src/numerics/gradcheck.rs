use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, so exactly-zero gradients are not judged against round-off noise.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst scalar, if any was checked.
    pub worst: Option<String>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares autodiff gradients of a scalar-valued `f` against central finite
/// differences `(f(p+ε) − f(p−ε)) / 2ε` for every scalar in `stores`.
///
/// `f` must be a pure function of the stores (re-seed any dropout inside it).
pub fn check_gradients<F>(
    stores: &mut [&mut ParamStore],
    epsilon: f64,
    tolerance: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[&ParamStore]) -> Result<(Graph, Var)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut eval = |stores: &mut [&mut ParamStore]| -> Result<(Graph, Var)> {
        let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        f(&views)
    };
    let (graph, out) = eval(stores)?;
    let grads = graph.backward(out)?;
    drop(graph);

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, tolerance, passed: true };
    for si in 0..stores.len() {
        let ids: Vec<_> = stores[si].ids().collect();
        for id in ids {
            let name = stores[si].iter().nth(id.index()).map(|(n, _)| n.to_string()).unwrap_or_default();
            let n = stores[si].get(id).len();
            for j in 0..n {
                let analytic = grads.param(id).map(|t| t.data()[j]).unwrap_or(0.0);
                let orig = stores[si].get(id).data()[j];

                stores[si].get_mut(id).data_mut()[j] = orig + epsilon;
                let (gp, op) = eval(stores)?;
                let fp = gp.value(op).data()[0];
                stores[si].get_mut(id).data_mut()[j] = orig - epsilon;
                let (gm, om) = eval(stores)?;
                let fm = gm.value(om).data()[0];
                stores[si].get_mut(id).data_mut()[j] = orig;

                let numeric = (fp - fm) / (2.0 * epsilon);
                let err = relative_error(analytic, numeric);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(format!("{name}[{j}]"));
                }
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
