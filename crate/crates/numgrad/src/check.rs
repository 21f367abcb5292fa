use crate::{Bindings, Error, Graph, Result};

/// Outcome of a finite-difference audit of a graph's gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over every trainable scalar entry.
    pub max_rel_err: f64,
    /// Tolerance the report was judged against.
    pub tol: f64,
    /// Number of scalar entries checked.
    pub checked: usize,
    /// `max_rel_err ≤ tol` (vacuously true for a graph without parameters).
    pub passed: bool,
    /// Leaf name and entry index of the worst mismatch, with both values.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn empty(tol: f64) -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            tol,
            checked: 0,
            passed: true,
            worst: None,
        }
    }
}

/// Compares the analytic gradient of the graph's root against central finite
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every trainable scalar entry.
///
/// Relative error uses `|a − n| / max(1, |a|, |n|)`, so tiny gradients are
/// compared absolutely. Failures are carried in the report, not raised.
pub fn grad_check(
    graph: &Graph,
    bindings: &Bindings,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidStep { step });
    }
    let root = graph.root();
    let eval = graph.forward(bindings)?;
    if eval.value(root).numel() != 1 {
        return Err(Error::NonScalarRoot {
            node: graph.label(root),
            shape: eval.value(root).shape().to_vec(),
        });
    }
    if graph.params().is_empty() {
        return Ok(GradCheckReport::empty(tol));
    }
    let grads = eval.backward(root)?;

    let mut report = GradCheckReport::empty(tol);
    let mut work = bindings.clone();
    for &leaf in graph.params() {
        let base = bindings
            .get(leaf)
            .ok_or_else(|| Error::UnboundLeaf {
                node: graph.label(leaf),
            })?
            .clone();
        let analytic = grads.get(leaf);
        for entry in 0..base.numel() {
            let a = analytic.map_or(0.0, |t| t.values()[entry]);

            let mut plus = base.clone();
            plus.values_mut()[entry] += step;
            work.set(leaf, plus);
            let f_plus = graph.eval(&work)?.item();

            let mut minus = base.clone();
            minus.values_mut()[entry] -= step;
            work.set(leaf, minus);
            let f_minus = graph.eval(&work)?.item();

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                let name = graph.name_of(leaf).unwrap_or("<unnamed>").to_string();
                report.worst = Some((name, entry, a, numeric));
            }
        }
        work.set(leaf, base);
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
