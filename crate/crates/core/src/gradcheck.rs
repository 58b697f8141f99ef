//! Finite-difference verification of tape gradients.
//!
//! The checker owns no knowledge of the graph internals: it treats the
//! builder closure as a black-box scalar function of its input arrays, takes
//! central differences coordinate by coordinate, and compares against the
//! gradients the tape reports. Builders are free to call
//! [`Graph::backward`] internally, so penalty terms defined through
//! first-order gradients are checked the same way as plain losses.

use crate::graph::{Graph, Var};
use ndarray::ArrayD;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest absolute difference over all coordinates.
    pub max_abs_diff: f64,
    /// Largest relative error `|a-n| / max(|a|, |n|, 1)`.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
}

impl GradReport {
    pub fn within(&self, rtol: f64) -> bool {
        self.max_rel_err < rtol
    }
}

/// Compare tape gradients of `build` against central differences at the
/// given inputs.
///
/// `build` must construct a scalar graph output from parameter leaves that
/// correspond 1:1 with `inputs`. Gradients that the tape reports as absent
/// (no path to the output) are treated as zero.
pub fn compare_gradients(
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    inputs: &[ArrayD<f64>],
) -> GradReport {
    // Analytic pass.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| match grads.wrt(*v) {
            Some(gv) => g.val(gv).clone(),
            None => ArrayD::zeros(a.raw_dim()),
        })
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|a| g.param(a.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar_value(out)
    };

    let mut report = GradReport {
        max_abs_diff: 0.0,
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.as_slice().expect("standard layout input")[ci];
            let h = 1e-5 * orig.abs().max(1.0);
            work[ti].as_slice_mut().unwrap()[ci] = orig + h;
            let up = eval(&work);
            work[ti].as_slice_mut().unwrap()[ci] = orig - h;
            let down = eval(&work);
            work[ti].as_slice_mut().unwrap()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].as_slice().unwrap()[ci];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ci);
                report.worst_pair = (a, numeric);
            }
            report.max_abs_diff = report.max_abs_diff.max(abs);
        }
    }
    report
}

/// Assert helper: panics with coordinates when the check fails.
pub fn assert_gradients_match(
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    inputs: &[ArrayD<f64>],
    rtol: f64,
) -> GradReport {
    let report = compare_gradients(build, inputs);
    assert!(
        report.within(rtol),
        "gradient mismatch: rel err {:.3e} at input {} coord {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.worst.0,
        report.worst.1,
        report.worst_pair.0,
        report.worst_pair.1
    );
    report
}
