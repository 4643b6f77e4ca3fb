use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Absolute ∞-norm tolerance on the residual.
    pub tolerance: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-9,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton iteration on the unknowns flagged in `active`.
///
/// Inactive unknowns keep their initial value and their residual rows are
/// dropped from the linear solve; the caller is expected to check them.
/// Returns the solution and the number of iterations used.
pub fn damped_newton<R, J>(
    mut residual: R,
    mut jacobian: J,
    x0: Vec<f64>,
    active: &[bool],
    opts: NewtonOptions,
) -> Result<(Vec<f64>, usize)>
where
    R: FnMut(&[f64]) -> Result<Vec<f64>>,
    J: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    let idx: Vec<usize> = (0..x0.len()).filter(|&k| active[k]).collect();
    let reduced = |f: &[f64]| -> Vec<f64> { idx.iter().map(|&k| f[k]).collect() };
    let norm2 = |f: &[f64]| -> f64 { f.iter().map(|x| x * x).sum::<f64>().sqrt() };

    let mut x = x0;
    let mut f = reduced(&residual(&x)?);
    for it in 0..opts.max_iterations {
        if inf_norm(&f) < opts.tolerance {
            return Ok((x, it));
        }
        let jac = jacobian(&x)?;
        let jr = DMatrix::from_fn(idx.len(), idx.len(), |r, c| jac[(idx[r], idx[c])]);
        let rhs = -DVector::from_column_slice(&f);
        let step = jr.lu().solve(&rhs).ok_or(Error::Singular("Newton Jacobian"))?;

        let f0 = norm2(&f);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-8 {
            let mut trial = x.clone();
            for (s, &k) in step.iter().zip(&idx) {
                trial[k] += alpha * s;
            }
            // Evaluation errors (e.g. a CPL voltage collapse) shrink the step.
            if let Ok(ft) = residual(&trial) {
                let ft = reduced(&ft);
                if ft.iter().all(|v| v.is_finite()) && norm2(&ft) <= (1.0 - 1e-4 * alpha) * f0 {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((xt, ft)) => {
                x = xt;
                f = ft;
            }
            None => {
                return Err(Error::NoEquilibrium {
                    iterations: it,
                    residual: inf_norm(&f),
                })
            }
        }
    }
    if inf_norm(&f) < opts.tolerance {
        Ok((x, opts.max_iterations))
    } else {
        Err(Error::NoEquilibrium {
            iterations: opts.max_iterations,
            residual: inf_norm(&f),
        })
    }
}
