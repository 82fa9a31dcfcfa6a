//! Central-finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares the analytic gradient of a scalar-valued `f` at `x` against
/// central differences with step `h`. `f` must be deterministic; the base
/// point is evaluated twice and any disagreement is an error.
pub fn check_gradient(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }

    let base = x.data();
    let probe = |v: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(v.to_vec(), &x.shape())?;
        let y = f(&xt)?;
        y.item()
    };
    let f0 = probe(&base)?;
    let f0_again = probe(&base)?;
    if f0.to_bits() != f0_again.to_bits() {
        return Err(Error::InvalidArgument(
            "function is not deterministic across repeated evaluation".into(),
        ));
    }

    let leaf = Tensor::param(base.clone(), &x.shape())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "check_gradient needs a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| Error::InvalidArgument("function does not depend on x (no gradient)".into()))?;

    let mut numeric = vec![0.0; base.len()];
    let mut pert = base.clone();
    for i in 0..base.len() {
        pert[i] = base[i] + h;
        let fp = probe(&pert)?;
        pert[i] = base[i] - h;
        let fm = probe(&pert)?;
        pert[i] = base[i];
        numeric[i] = (fp - fm) / (2.0 * h);
    }

    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..base.len() {
        let e = rel_err(analytic[i], numeric[i]);
        if e > max_rel {
            max_rel = e;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        pass: max_rel < tol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_exp_passes() {
        let x = Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap();
        let rep = check_gradient(|t| t.exp()?.sum(None), &x, 1e-5, 1e-4).unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn constant_passes() {
        let x = Tensor::from_vec(vec![0.3, -0.4], &[2]).unwrap();
        // x*0 keeps the graph connected while the gradient is identically 0.
        let rep = check_gradient(|t| t.scalar_mul(0.0)?.sum(None), &x, 1e-5, 1e-4).unwrap();
        assert!(rep.pass);
        assert!(rep.analytic.iter().all(|&v| v == 0.0));
        assert!(rep.numeric.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_tolerance_fails() {
        let x = Tensor::from_vec(vec![0.5, -0.25], &[2]).unwrap();
        let rep = check_gradient(|t| t.exp()?.sum(None), &x, 1e-5, 0.0).unwrap();
        assert!(!rep.pass);
        assert!(rep.max_rel_err > 0.0);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u64);
        let x = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let res = check_gradient(
            |t| {
                calls.set(calls.get() + 1);
                t.scalar_mul(calls.get() as f64)?.sum(None)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(res.is_err());
    }
}
