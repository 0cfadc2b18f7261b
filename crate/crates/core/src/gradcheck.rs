//! Finite-difference verification of reverse-mode gradients.
//!
//! A probe supplies a loss builder: a closure that, given a graph and leaf
//! variables for the parameters, constructs a scalar loss. The checker
//! compares the analytic gradient of every parameter entry against a central
//! difference of the rebuilt loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-5;
/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale, so that
/// finite-difference round-off on near-zero entries does not read as error.
const REL_FLOOR: f64 = 1e-5;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct Report {
    /// Largest relative error seen across all parameter entries.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss whenever it is handed the
/// same parameter values; it is invoked once for the analytic pass and twice
/// per parameter entry for the differences.
pub fn check<F>(params: &[Tensor], build: F, h: f64, tol: f64) -> Result<Report>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic = {
        let graph = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
        let loss = build(&graph, &vars)?;
        let grads = graph.backward(loss)?;
        let mut out = Vec::with_capacity(params.len());
        for (v, p) in vars.iter().zip(params) {
            let g = grads
                .tensor(&graph, *v)
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
            out.push(g);
        }
        out
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let graph = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| graph.param(p.clone())).collect();
        let loss = build(&graph, &vars)?;
        graph.value(loss).scalar_value()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut entries = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;

            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let scale = a.abs().max(fd.abs()).max(REL_FLOOR);
            let rel = (a - fd).abs() / scale;
            max_rel_err = max_rel_err.max(rel);
            entries += 1;
            if rel > tol {
                return Err(Error::Contract(format!(
                    "gradient check failed: param {pi} entry {j}: analytic {a:.9e} vs \
                     finite-difference {fd:.9e} (relative error {rel:.3e} > {tol:.1e})"
                )));
            }
        }
    }
    Ok(Report { max_rel_err, entries })
}

/// [`check`] with the default step and tolerance.
pub fn check_default<F>(params: &[Tensor], build: F) -> Result<Report>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check(params, build, DEFAULT_H, DEFAULT_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn passes_on_correct_gradient() {
        let mut r = rng::stream(7, "gradcheck");
        let w = Tensor::uniform(vec![3, 2], 1.0, &mut r);
        let report = check_default(&[w], |g, vars| {
            let y = g.tanh(vars[0])?;
            g.mean_all(g.mul(y, y)?)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
        assert_eq!(report.entries, 6);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Loss uses x², but the builder sneaks a detach into the analytic
        // path so the reported gradient is wrong on purpose.
        let w = Tensor::from_rows(&[vec![0.8]]).unwrap();
        let result = check_default(&[w], |g, vars| {
            let frozen = g.detach(vars[0]);
            g.sum_all(g.mul(vars[0], frozen)?)
        });
        assert!(result.is_err());
    }
}
