//! Central-difference verification of analytic gradients.
//!
//! `f64` only: single-precision finite differences are too noisy to validate
//! anything at the tolerances used here, so the API simply does not admit f32.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks a scalar-valued tensor function against central differences over
/// every coordinate of every input. `coord_limit`, when set, checks a seeded
/// random subsample of at most that many coordinates per input instead, which
/// keeps whole-network composites tractable.
pub fn gradcheck_multi<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    coord_limit: Option<(usize, u64)>,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &ids)?;
    let numel = tape.value(root).numel();
    if numel != 1 {
        return Err(Error::NonScalarRoot { numel });
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(id, t)| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.data(out)[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match coord_limit {
            Some((limit, seed)) if n > limit => {
                let mut all: Vec<usize> = (0..n).collect();
                let mut r = rng::seeded(seed, i as u64);
                all.shuffle(&mut r);
                all.truncate(limit);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[i][c], numeric);
            if e > worst {
                worst = e;
            }
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok(GradcheckReport {
        per_input,
        max_rel_err,
        tol,
    })
}

/// Single-input convenience wrapper.
pub fn gradcheck<F>(f: &F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    let wrapped = |tape: &mut Tape<f64>, ids: &[TensorId]| f(tape, ids[0]);
    gradcheck_multi(&wrapped, core::slice::from_ref(x), h, tol, None)
}

/// Named check result, used by the suite registry and the CLI report.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn from_report(name: &str, report: &GradcheckReport) -> Self {
        Self {
            name: String::from(name),
            max_rel_err: report.max_rel_err,
            tol: report.tol,
            passed: report.passed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.3, -0.7, 1.2, 0.1, 2.0, -1.5]).unwrap();
        let report = gradcheck(&|t: &mut Tape<f64>, id| t.reduce_sum(id), &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed());
        // the analytic gradient of a sum is exact; finite differences of a
        // linear map are exact up to rounding
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn reports_failure_when_differences_disagree() {
        // cubic: central differences carry an O(h^2) truncation term, so a
        // huge step at a tiny tolerance must fail while a sane step passes
        let x = Tensor::from_vec(vec![2], vec![0.5, -0.25]).unwrap();
        let f = |t: &mut Tape<f64>, id: TensorId| {
            let sq = t.mul(id, id)?;
            let cube = t.mul(sq, id)?;
            t.reduce_sum(cube)
        };
        let good = gradcheck(&f, &x, 1e-5, 1e-4).unwrap();
        assert!(good.passed());
        let coarse = gradcheck(&f, &x, 0.4, 1e-12).unwrap();
        assert!(!coarse.passed());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, id: TensorId| t.mul(id, id);
        assert!(matches!(
            gradcheck(&f, &x, 1e-5, 1e-4),
            Err(Error::NonScalarRoot { numel: 2 })
        ));
    }
}
