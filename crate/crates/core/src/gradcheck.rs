//! Central finite-difference gradient verification.
//!
//! This module is the independent oracle for every analytic gradient in the
//! crate: it evaluates the forward pass only, never the backward sweep, so a
//! bug in the reverse-mode code cannot hide here. Checks are meant to run in
//! `f64`.

use crate::tensor::{Element, Tensor};

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Default elementwise relative-error bound.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` with respect to every element of
/// `param`, holding everything else fixed. `f` must evaluate the forward
/// pass from scratch on each call.
pub fn central_difference<E: Element>(
    param: &Tensor<E>,
    h: f64,
    mut f: impl FnMut() -> f64,
) -> Vec<f64> {
    let n = param.numel();
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let original = param.data()[i];
        param.data_mut()[i] = original + E::from_f64(h);
        let up = f();
        param.data_mut()[i] = original - E::from_f64(h);
        let down = f();
        param.data_mut()[i] = original;
        grads.push((up - down) / (2.0 * h));
    }
    grads
}

/// Worst elementwise relative error between an analytic gradient and its
/// finite-difference estimate. The denominator is floored so that genuinely
/// tiny gradients are compared absolutely instead of amplifying rounding
/// noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-3);
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Checks `d loss / d param` against central differences.
///
/// `forward` rebuilds the computation and returns the scalar loss value;
/// `analytic` is the gradient produced by a backward sweep beforehand.
/// Returns the worst relative error; panics with context if the bound is
/// exceeded.
pub fn assert_grad_matches<E: Element>(
    label: &str,
    param: &Tensor<E>,
    analytic: &[E],
    h: f64,
    tol: f64,
    mut forward: impl FnMut() -> f64,
) -> f64 {
    let numeric = central_difference(param, h, &mut forward);
    let analytic_f64: Vec<f64> = analytic.iter().map(|&g| g.as_f64()).collect();
    let err = max_relative_error(&analytic_f64, &numeric);
    assert!(
        err < tol,
        "{label}: finite-difference mismatch, rel err {err:.3e} >= {tol:.1e}\n  analytic: {analytic_f64:.6?}\n  numeric:  {numeric:.6?}"
    );
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradGraph;

    #[test]
    fn central_difference_recovers_quadratic_slope() {
        let x = Tensor::new(vec![3.0f64], &[1], true).unwrap();
        let g = central_difference(&x, 1e-5, || {
            let v = x.data()[0];
            v * v
        });
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn oracle_agrees_with_backward_on_a_small_chain() {
        let x = Tensor::new(vec![0.4f64, -1.1, 0.9, 0.2], &[2, 2], true).unwrap();
        let w = Tensor::new(vec![0.5f64, -0.3, 0.8, 0.1], &[2, 2], true).unwrap();

        let forward = |x: &Tensor<f64>, w: &Tensor<f64>| -> (GradGraph<f64>, Tensor<f64>) {
            let mut g = GradGraph::new();
            let h = g.matmul(x, w).unwrap();
            let a = g.gelu(&h);
            let loss = g.mean_all(&a);
            (g, loss)
        };

        let (g, loss) = forward(&x, &w);
        g.backward(&loss).unwrap();

        for (label, p) in [("x", &x), ("w", &w)] {
            let analytic = p.grad().unwrap();
            assert_grad_matches(label, p, &analytic, DEFAULT_H, DEFAULT_TOL, || {
                forward(&x, &w).1.item()
            });
        }
    }
}
