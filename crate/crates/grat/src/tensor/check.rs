//! Finite-difference verification of recorded gradients.
//!
//! `grad_check` rebuilds the graph from scratch for every probe, so the
//! closure must be a pure function of its parameter values. Determinism is
//! enforced by evaluating twice and requiring bit-equal losses — a closure
//! that samples fresh noise per call cannot be checked and is rejected.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Per-parameter-entry record from `grad_check_report`.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    /// Index of the parameter tensor in the input slice.
    pub param: usize,
    /// Flat entry index inside that parameter.
    pub entry: usize,
    /// Gradient from the reverse sweep.
    pub analytic: f64,
    /// Central finite difference.
    pub numeric: f64,
    /// |analytic - numeric| / max(1, |numeric|).
    pub rel_err: f64,
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients over every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let report = grad_check_report(f, params, eps)?;
    Ok(report.iter().map(|e| e.rel_err).fold(0.0, f64::max))
}

/// Like `grad_check` but returns every comparison for diagnostics.
pub fn grad_check_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<Vec<GradCheckEntry>>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let probes: Vec<Tensor> = params
            .iter()
            .zip(values)
            .map(|(p, v)| Tensor::new(v.clone(), p.shape()).map(|t| t.requiring_grad()))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let loss = f(&mut tape, &probes)?;
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        Ok(loss.item())
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.values().to_vec()).collect();

    // Two clean evaluations must agree bitwise; otherwise finite
    // differences would measure noise, not the derivative.
    let l0 = eval(&base)?;
    let l1 = eval(&base)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministicFn);
    }

    // One reverse sweep for the analytic side.
    let bound: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::new(p.values().to_vec(), p.shape()).map(|t| t.requiring_grad()))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let loss = f(&mut tape, &bound)?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .iter()
        .map(|p| tape.grad(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = Vec::new();
    for (pi, pvals) in base.iter().enumerate() {
        for ei in 0..pvals.len() {
            let mut plus = base.clone();
            plus[pi][ei] += eps;
            let mut minus = base.clone();
            minus[pi][ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[pi][ei];
            let rel_err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.push(GradCheckEntry { param: pi, entry: ei, analytic: a, numeric, rel_err });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    #[test]
    fn quadratic_is_exact_to_float_noise() {
        let x = Tensor::new(vec![3.0], &[1]).unwrap().requiring_grad();
        let err = grad_check(
            |tape, p| {
                let sq = tape.mul(&p[0], &p[0])?;
                tape.sum(&sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn matmul_chain_of_depth_three() {
        let mk = |seed: u64, shape: &[usize]| {
            let mut rng = crate::rng::stream_rng(seed, 7);
            use rand::Rng;
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(v, shape).unwrap().requiring_grad()
        };
        let a = mk(1, &[2, 3]);
        let b = mk(2, &[3, 4]);
        let c = mk(3, &[4, 2]);
        let err = grad_check(
            |tape, p| {
                let ab = tape.matmul(&p[0], &p[1])?;
                let abc = tape.matmul(&ab, &p[2])?;
                tape.sum(&abc)
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn rejects_non_deterministic_function() {
        static CALLS: AtomicU64 = AtomicU64::new(0);
        let x = Tensor::new(vec![1.0], &[1]).unwrap().requiring_grad();
        let err = grad_check(
            |tape, p| {
                let jitter = CALLS.fetch_add(1, Ordering::Relaxed) as f64 * 1e-3;
                let shifted = tape.add_const(&p[0], &[jitter])?;
                tape.sum(&shifted)
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministicFn));
    }

    #[test]
    fn report_lists_every_entry() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().requiring_grad();
        let report = grad_check_report(
            |tape, p| {
                let sq = tape.mul(&p[0], &p[0])?;
                tape.sum(&sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.len(), 3);
        for (i, e) in report.iter().enumerate() {
            assert_eq!(e.param, 0);
            assert_eq!(e.entry, i);
            // d(x²)/dx = 2x
            let expect = 2.0 * (i as f64 + 1.0);
            assert!((e.analytic - expect).abs() < 1e-12);
            assert!(e.rel_err < 1e-9);
        }
    }
}
