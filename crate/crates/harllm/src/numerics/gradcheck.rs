//! Central-difference verification of analytic gradients, always in f64.

use crate::numerics::tensor::Tensor;
use crate::Result;

/// Worst coordinate found by a comparison, for diagnostics.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// (f(x+h) - f(x-h)) / 2h for every coordinate of every parameter.
/// The loss closure must be deterministic in `params`.
pub fn central_diff_grads<F>(
    params: &[Tensor<f64>],
    mut loss: F,
    h: f64,
) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for pi in 0..params.len() {
        for i in 0..params[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = loss(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = loss(&work)?;
            work[pi].data_mut()[i] = orig;
            grads[pi].data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Relative error |a - n| / max(1e-6, |a| + |n|), maximized over all
/// coordinates of all parameters. The floor sits above central-difference
/// roundoff so exactly-zero gradients compare as matching.
pub fn max_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch in parameter {pi}");
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = (av - nv).abs() / 1e-6f64.max(av.abs() + nv.abs());
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    param: pi,
                    index: i,
                    analytic: av,
                    numeric: nv,
                };
            }
        }
    }
    report
}
